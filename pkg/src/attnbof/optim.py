"""ADAM with weight decay or a max-norm cap, stepped learning rates, and class weights."""
from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, NonFiniteError, ShapeError

MAX_NORM = 4.0
WEIGHT_DECAY = 1e-4


@dataclass(frozen=True)
class LRSchedule:
    """Piecewise-constant learning rate.

    ``milestones`` holds ``(epoch, factor)`` pairs in ascending epoch order;
    each factor applies from its epoch onwards and factors compound.
    """

    base: float = 1e-3
    milestones: Tuple[Tuple[int, float], ...] = ()

    def __post_init__(self):
        epochs = [int(m) for m, _ in self.milestones]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ConfigError(f"milestones must be strictly ascending, got {epochs}")
        if self.base <= 0:
            raise ConfigError(f"base learning rate must be positive, got {self.base}")


FINANCIAL_SCHEDULE = LRSchedule(1e-3, ((11, 0.1), (51, 0.1)))
MEDICAL_SCHEDULE = LRSchedule(1e-3, ((11, 0.1), (71, 0.1)))


def lr_schedule_value(epoch: int, schedule: LRSchedule) -> float:
    """Learning rate in effect at (1-based) ``epoch``.

    The product is formed in decimal arithmetic so that e.g. ``0.001 * 0.1``
    yields exactly the float ``0.0001``.
    """
    rate = Decimal(repr(schedule.base))
    for milestone, factor in schedule.milestones:
        if epoch >= milestone:
            rate *= Decimal(repr(factor))
    return float(rate)


def class_weights_from_counts(counts: Sequence[int]) -> np.ndarray:
    """Inverse-frequency class weights rescaled to a mean of one."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise ConfigError("counts must be a non-empty vector")
    if np.any(counts < 1):
        raise ConfigError(f"every class needs at least one sample, got counts {counts.tolist()}")
    raw = 1.0 / counts
    return raw * (counts.size / raw.sum())


def apply_max_norm(W: np.ndarray, c: float = MAX_NORM) -> np.ndarray:
    """Rescale, in place, every row whose L2 norm exceeds ``c`` to norm ``c``.

    Rows are taken over all trailing axes, so a ``(K, D)`` codebook and a
    ``(out, in)`` dense weight are handled alike. Returns ``W``.
    """
    if c <= 0:
        raise ConfigError(f"max-norm cap must be positive, got {c}")
    rows = W.reshape(W.shape[0], -1)
    norms = np.sqrt(np.sum(rows * rows, axis=1))
    over = norms > c
    if np.any(over):
        rows[over] *= (c / norms[over])[:, None]
        # guard against rounding leaving a row a hair above the cap
        again = np.sqrt(np.sum(rows[over] ** 2, axis=1))
        rows[over] /= np.maximum(again / c, 1.0)[:, None]
        if not np.shares_memory(rows, W):
            W[...] = rows.reshape(W.shape)
    return W


@dataclass
class OptimState:
    """ADAM moments and hyperparameters.

    Exactly one regulariser is active per run: ``weight_decay`` (added to
    gradients as ``lambda * theta``) or ``max_norm`` (row cap after each step).
    """

    schedule: LRSchedule = field(default_factory=LRSchedule)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    max_norm: Optional[float] = None
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.weight_decay and self.max_norm is not None:
            raise ConfigError("weight decay and max-norm are mutually exclusive")

    def to_arrays(self) -> dict:
        out = {f"adam_m/{k}": a.copy() for k, a in self.m.items()}
        out.update({f"adam_v/{k}": a.copy() for k, a in self.v.items()})
        return out

    def load_arrays(self, arrays: dict) -> None:
        self.m = {k[len("adam_m/"):]: np.array(a) for k, a in arrays.items() if k.startswith("adam_m/")}
        self.v = {k[len("adam_v/"):]: np.array(a) for k, a in arrays.items() if k.startswith("adam_v/")}


def adam_step(params: dict, state: OptimState, lr: float, grads: Optional[dict] = None) -> None:
    """One bias-corrected ADAM update, in place.

    ``grads`` defaults to each tensor's ``.grad``; a missing gradient counts as
    zero. All gradients are validated before any parameter is touched.
    """
    if grads is None:
        grads = {k: p.grad for k, p in params.items()}
    checked = {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name}; step aborted")
        checked[name] = g

    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = checked[name]
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros(p.shape), np.zeros(p.shape)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def apply_constraints(params: dict, names: Sequence[str], state: OptimState) -> None:
    if state.max_norm is None:
        return
    for name in names:
        apply_max_norm(params[name].data, state.max_norm)
