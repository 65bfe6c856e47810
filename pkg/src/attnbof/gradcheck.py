"""Central-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tensor, zero_grad


@dataclass
class GradReport:
    """Outcome of a finite-difference comparison.

    ``max_rel_error`` maps each parameter label to the largest elementwise
    relative error ``|a - n| / max(1e-8, |a| + |n|)``.
    """

    max_rel_error: Dict[str, float]
    h: float
    tol: float
    pass_: bool = field(init=False)

    def __post_init__(self):
        self.pass_ = self.worst < self.tol

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.pass_


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def finite_difference_gradcheck(fragment: Callable[[], Tensor], params: Sequence[Tensor],
                                h: float = 1e-4, tol: float = 1e-4) -> GradReport:
    """Compare backprop gradients of ``fragment()`` against central differences.

    ``fragment`` must rebuild its graph from ``params`` on every call and
    return a scalar tensor. Parameter values are perturbed in place and
    restored afterwards.
    """
    if h <= 0:
        raise ContractError(f"step size must be positive, got {h}")
    zero_grad(params)
    out = fragment()
    if out.data.size != 1:
        raise ContractError(f"gradcheck needs a scalar-valued fragment, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    zero_grad(params)

    errors = {}
    for i, (p, a) in enumerate(zip(params, analytic)):
        numeric = np.zeros(p.shape)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = fragment().item()
            flat[j] = orig - h
            fm = fragment().item()
            flat[j] = orig
            nflat[j] = (fp - fm) / (2.0 * h)
        label = p.name or f"param{i}"
        errors[label] = float(relative_error(a, numeric).max())
    return GradReport(errors, h=h, tol=tol)
