"""Soft quantization against a learnable codebook and histogram pooling.

Inputs are ``(D, N)`` sequences or ``(B, D, N)`` batches; quantized features
are ``(K, N)`` / ``(B, K, N)`` with every column a probability vector over
codewords.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor, as_tensor

KERNELS = ("rbf", "hyperbolic")


@dataclass(eq=False)
class Codebook:
    """K codewords of dimension D plus their kernel parameters.

    Attributes
    ----------
    V : Tensor
        ``(K, D)`` codeword matrix.
    log_w : Tensor
        ``(K, D)`` logarithm of the per-codeword shape parameters, so the
        widths ``exp(log_w)`` stay strictly positive under any update.
    kernel : str
        ``"rbf"`` or ``"hyperbolic"``.
    bias : Tensor, optional
        ``(K,)`` offsets, used by the hyperbolic kernel only.
    """

    V: Tensor
    log_w: Tensor
    kernel: str = "rbf"
    bias: Optional[Tensor] = None

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ConfigError(f"unknown kernel {self.kernel!r}; expected one of {KERNELS}")
        if self.V.ndim != 2 or self.V.shape != self.log_w.shape:
            raise ShapeError(f"codewords {self.V.shape} and widths {self.log_w.shape} must both be (K, D)")
        if self.kernel == "hyperbolic":
            if self.bias is None:
                self.bias = Tensor(np.zeros(self.K), requires_grad=True)
            elif self.bias.shape != (self.K,):
                raise ShapeError(f"bias must be ({self.K},), got {self.bias.shape}")

    @property
    def K(self) -> int:
        return self.V.shape[0]

    @property
    def D(self) -> int:
        return self.V.shape[1]

    @property
    def widths(self) -> np.ndarray:
        return np.exp(self.log_w.data)

    def parameters(self) -> dict:
        params = {"V": self.V}
        if self.kernel == "rbf":
            params["log_w"] = self.log_w
        else:
            params["bias"] = self.bias
        return params

    @classmethod
    def from_arrays(cls, V, widths=None, kernel="rbf", bias=None) -> "Codebook":
        V = np.asarray(V, dtype=np.float64)
        widths = np.ones_like(V) if widths is None else np.asarray(widths, dtype=np.float64)
        if np.any(widths <= 0):
            raise ContractError("codeword widths must be strictly positive")
        b = None if bias is None else Tensor(bias, requires_grad=True)
        return cls(Tensor(V, requires_grad=True), Tensor(np.log(widths), requires_grad=True), kernel, b)

    @classmethod
    def initialize(cls, K: int, D: int, rng: np.random.Generator, kernel: str = "rbf",
                   sample: Optional[np.ndarray] = None) -> "Codebook":
        """Random codebook, or k-means centroids of ``sample`` (rows are D-vectors)."""
        if K < 1 or D < 1:
            raise ConfigError(f"codebook needs K >= 1 and D >= 1, got K={K}, D={D}")
        if sample is not None:
            from scipy.cluster.vq import kmeans2
            sample = np.asarray(sample, dtype=np.float64)
            V, _ = kmeans2(sample, K, minit="++", seed=rng)
        else:
            a = math.sqrt(6.0 / (K + D))
            V = rng.uniform(-a, a, size=(K, D))
        return cls.from_arrays(V, kernel=kernel)


def _as_batch(x) -> tuple:
    x = as_tensor(x)
    if x.ndim == 2:
        return ops.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ShapeError(f"expected (D, N) or (B, D, N), got {x.shape}")
    return x, False


def _unbatch(t: Tensor, squeeze: bool) -> Tensor:
    return ops.reshape(t, t.shape[1:]) if squeeze else t


def rbf_quantize(x, cb: Codebook) -> Tensor:
    """Normalised RBF responses ``softmax_k(-||(x_n - v_k) * w_k||)``."""
    if cb.kernel != "rbf":
        raise ContractError(f"rbf_quantize needs an rbf codebook, got {cb.kernel!r}")
    xb, squeeze = _as_batch(x)
    if xb.shape[1] != cb.D:
        raise ShapeError(f"input has D={xb.shape[1]}, codebook expects D={cb.D}")
    dist = ops.weighted_distance(xb, cb.V, cb.log_w)
    phi = ops.softmax(ops.scale(dist, -1.0), axis=-2)
    return _unbatch(phi, squeeze)


def hyperbolic_quantize(x, cb: Codebook) -> Tensor:
    """Softmax over codewords of ``tanh(v_k . x_n + bias_k)``."""
    if cb.kernel != "hyperbolic":
        raise ContractError(f"hyperbolic_quantize needs a hyperbolic codebook, got {cb.kernel!r}")
    xb, squeeze = _as_batch(x)
    if xb.shape[1] != cb.D:
        raise ShapeError(f"input has D={xb.shape[1]}, codebook expects D={cb.D}")
    u = ops.tanh(ops.add_bias(ops.matmul(cb.V, xb), cb.bias, axis=1))
    return _unbatch(ops.softmax(u, axis=-2), squeeze)


def quantize(x, cb: Codebook) -> Tensor:
    if cb.kernel == "rbf":
        return rbf_quantize(x, cb)
    return hyperbolic_quantize(x, cb)


def accumulate_histogram(phi) -> Tensor:
    """Average quantized features over time (last axis)."""
    if not isinstance(phi, Tensor) and np.size(phi) == 0:
        raise ContractError("cannot accumulate an empty sequence")
    phi = as_tensor(phi)
    if phi.ndim < 2:
        raise ShapeError(f"expected (K, N) or (B, K, N), got {phi.shape}")
    return ops.reduce_mean_axis(phi, axis=-1)


def short_window(n: int, split: float) -> int:
    """Number of trailing steps covered by the short-term codebook."""
    if not 0.0 < split <= 1.0:
        raise ContractError(f"split must lie in (0, 1], got {split}")
    length = math.ceil(split * n)
    if length < 1:
        raise ContractError(f"split {split} leaves no steps for the short-term codebook")
    return length


def tnbof_forward(x, short_cb: Codebook, long_cb: Codebook, split: float = 0.5) -> Tensor:
    """Concatenated ``[long; short]`` histograms.

    The long-term codebook sees the whole sequence; the short-term codebook
    sees only the last ``ceil(split * N)`` steps.
    """
    if short_cb.D != long_cb.D:
        raise ShapeError(f"codebooks disagree on D: short {short_cb.D}, long {long_cb.D}")
    x = as_tensor(x)
    n = x.shape[-1]
    m = short_window(n, split)
    long_hist = accumulate_histogram(quantize(x, long_cb))
    recent = ops.slice_axis(x, n - m, n, axis=-1) if m < n else x
    short_hist = accumulate_histogram(quantize(recent, short_cb))
    return ops.concat([long_hist, short_hist], axis=-1)
