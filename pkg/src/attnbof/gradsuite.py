"""Finite-difference checks for every differentiable layer.

Each check builds small random inputs from a seed and reduces the layer
output to a scalar with a fixed random projection, so that every output
entry contributes to the gradient.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from . import ops
from .attention import (AttentionBlock, apply_2da, codeword_attention, input_attention,
                        temporal_attention)
from .errors import ConfigError
from .gradcheck import GradReport, finite_difference_gradcheck
from .layers import batchnorm1d_forward, conv1d_forward, dense_forward, maxpool1d_forward
from .model import ModelConfig, build_model, parse_layers
from .quantization import Codebook, accumulate_histogram, quantize, tnbof_forward
from .tensor import Tensor

Setup = Tuple[Callable[[], Tensor], List[Tensor]]


def _param(rng, shape, name, scale=1.0, low=None):
    data = rng.standard_normal(shape) * scale
    if low is not None:
        # keep values away from a kink so central differences stay smooth
        data = np.where(np.abs(data) < low, np.sign(data + 1e-300) * low, data)
    return Tensor(data, requires_grad=True, name=name)


def _project(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    r = Tensor(rng.standard_normal(out.shape))
    return lambda t: ops.reduce_sum(ops.mul(t, r))


def _wrap(rng, forward: Callable[[], Tensor], params: List[Tensor]) -> Setup:
    proj = _project(forward(), rng)
    return (lambda: proj(forward())), params


def _block(rng, n, name):
    block = AttentionBlock.create(n, tau=float(rng.uniform(0.2, 0.8)))
    block.W_off.data[...] = rng.standard_normal((n, n)) * 0.3
    block.W_off.name, block.tau.name = f"{name}.W_off", f"{name}.tau"
    return block


def _rbf(rng):
    x = _param(rng, (2, 3, 5), "x")
    cb = Codebook(_param(rng, (4, 3), "V"), _param(rng, (4, 3), "log_w", 0.3))
    return _wrap(rng, lambda: quantize(x, cb), [x, cb.V, cb.log_w])


def _hyperbolic(rng):
    x = _param(rng, (2, 3, 5), "x")
    cb = Codebook(_param(rng, (4, 3), "V", 0.5), _param(rng, (4, 3), "log_w"), kernel="hyperbolic",
                  bias=_param(rng, (4,), "bias", 0.5))
    return _wrap(rng, lambda: quantize(x, cb), [x, cb.V, cb.bias])


def _accumulation(rng):
    phi = _param(rng, (2, 4, 6), "phi")
    return _wrap(rng, lambda: accumulate_histogram(phi), [phi])


def _tnbof(rng):
    x = _param(rng, (2, 3, 6), "x")
    long_cb = Codebook(_param(rng, (4, 3), "long.V"), _param(rng, (4, 3), "long.log_w", 0.3))
    short_cb = Codebook(_param(rng, (3, 3), "short.V"), _param(rng, (3, 3), "short.log_w", 0.3))
    params = [x, long_cb.V, long_cb.log_w, short_cb.V, short_cb.log_w]
    return _wrap(rng, lambda: tnbof_forward(x, short_cb, long_cb, 0.5), params)


def _2da(rng):
    s = _param(rng, (2, 4, 5), "S")
    block = _block(rng, 5, "2DA")
    return _wrap(rng, lambda: apply_2da(s, block), [s, block.W_off, block.tau])


def _placement(fn, shape, n_attend, name):
    def setup(rng):
        s = _param(rng, shape, "input")
        block = _block(rng, n_attend, name)
        return _wrap(rng, lambda: fn(s, block), [s, block.W_off, block.tau])
    return setup


def _conv1d(rng):
    stride = int(rng.integers(1, 3))
    x = _param(rng, (2, 3, 7), "x")
    w = _param(rng, (4, 3, 3), "weights", 0.5)
    b = _param(rng, (4,), "bias")
    return _wrap(rng, lambda: conv1d_forward(x, w, b, stride), [x, w, b])


def _batchnorm(rng):
    x = _param(rng, (3, 2, 4), "x", 2.0)
    gamma = _param(rng, (2,), "gamma")
    beta = _param(rng, (2,), "beta")
    return _wrap(rng, lambda: batchnorm1d_forward(x, gamma, beta, "train"), [x, gamma, beta])


def _maxpool(rng):
    x = _param(rng, (2, 3, 8), "x")
    return _wrap(rng, lambda: maxpool1d_forward(x, 2), [x])


def _dense(rng):
    x = _param(rng, (3, 5), "x")
    W = _param(rng, (4, 5), "W", 0.5)
    b = _param(rng, (4,), "b")
    return _wrap(rng, lambda: dense_forward(x, W, b, "none"), [x, W, b])


def _relu(rng):
    x = _param(rng, (3, 5), "x", low=0.05)
    return _wrap(rng, lambda: ops.relu(x), [x])


def _weighted_ce(rng):
    logits = _param(rng, (5, 3), "logits", 2.0)
    labels = rng.integers(0, 3, size=5)
    weights = rng.uniform(0.5, 2.0, size=3)
    return (lambda: ops.weighted_cross_entropy(logits, labels, weights)), [logits]


def _model(rng):
    seed = int(rng.integers(2 ** 31))
    cfg = ModelConfig((3, 6), parse_layers("conv(2,3),nbof(K=3),output(2)"), codewords=3,
                      attention=("IA", "CA"))
    model = build_model(cfg, seed=seed)
    x = Tensor(rng.standard_normal((4, 3, 6)))
    labels = np.array([0, 1, 1, 0])
    params = list(model.parameters().values())
    for p in params:
        p.data += rng.standard_normal(p.shape) * 0.1
    for name, p in model.parameters().items():
        p.name = name
    return (lambda: ops.weighted_cross_entropy(model.forward(x, mode="train"), labels)), params


CHECKS: Dict[str, Callable[[np.random.Generator], Setup]] = {
    "rbf_quantization": _rbf,
    "hyperbolic_quantization": _hyperbolic,
    "accumulation": _accumulation,
    "tnbof": _tnbof,
    "2da_block": _2da,
    "codeword_attention": _placement(codeword_attention, (2, 4, 5), 4, "CA"),
    "temporal_attention": _placement(temporal_attention, (2, 4, 5), 5, "TA"),
    "input_attention": _placement(input_attention, (2, 3, 5), 3, "IA"),
    "conv1d": _conv1d,
    "batchnorm": _batchnorm,
    "maxpool": _maxpool,
    "dense": _dense,
    "relu": _relu,
    "weighted_cross_entropy": _weighted_ce,
    "model": _model,
}


@dataclass
class SuiteResult:
    reports: Dict[str, List[GradReport]]
    tol: float
    seconds: float

    def worst(self, check: str) -> float:
        return max(r.worst for r in self.reports[check])

    @property
    def passed(self) -> bool:
        return all(self.worst(c) < self.tol for c in self.reports)

    def table(self) -> str:
        width = max(len(c) for c in self.reports) + 2
        lines = [f"{'layer'.ljust(width)}{'seeds':>6}  {'max rel. error':>14}  result"]
        for c in self.reports:
            w = self.worst(c)
            lines.append(f"{c.ljust(width)}{len(self.reports[c]):>6}  {w:>14.3e}  "
                         f"{'pass' if w < self.tol else 'FAIL'}")
        lines.append(f"tolerance {self.tol:g}, {self.seconds:.1f} s")
        return "\n".join(lines)


def run_gradient_suite(checks: Optional[Iterable[str]] = None, seeds: Iterable[int] = range(10),
                       h: float = 1e-4, tol: float = 1e-4) -> SuiteResult:
    names = list(CHECKS) if checks is None else list(checks)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ConfigError(f"unknown gradient check(s) {unknown}; choose from {sorted(CHECKS)}")
    start = time.perf_counter()
    reports = {}
    for name in names:
        reports[name] = []
        for seed in seeds:
            fragment, params = CHECKS[name](np.random.default_rng(seed))
            reports[name].append(finite_difference_gradcheck(fragment, params, h=h, tol=tol))
    return SuiteResult(reports, tol, time.perf_counter() - start)
