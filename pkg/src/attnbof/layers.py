"""Backbone layers used around the bag-of-features stage.

Functional forms (``*_forward``) operate on tensors directly; the classes
hold parameters and are what :mod:`attnbof.model` chains together. Per-sample
shapes exclude the batch axis: sequences are ``(C, N)``, vectors ``(F,)``.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import ops
from .attention import AttentionBlock, attend
from .errors import ConfigError, ShapeError
from .quantization import Codebook, accumulate_histogram, quantize, short_window
from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


# -- functional forms ------------------------------------------------------

def conv1d_forward(x: Tensor, weights: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    if x.ndim == 2:
        out = ops.conv1d(ops.reshape(x, (1,) + x.shape), weights, bias, stride)
        return ops.reshape(out, out.shape[1:])
    return ops.conv1d(x, weights, bias, stride)


def batchnorm1d_forward(x: Tensor, gamma: Tensor, beta: Tensor, mode: str = "train",
                        running: Optional[dict] = None, eps: float = BN_EPS,
                        momentum: float = BN_MOMENTUM) -> Tensor:
    """Batch normalisation over batch and time, per channel.

    In train mode ``running`` (a dict with ``mean`` and ``var`` arrays) is
    updated in place as ``momentum * old + (1 - momentum) * batch``.
    """
    if mode == "train":
        out, mu, var = ops.batchnorm_train(x, gamma, beta, eps)
        if running is not None:
            m = x.shape[0] * x.shape[2]
            unbiased = var * m / (m - 1)
            running["mean"] = momentum * running["mean"] + (1.0 - momentum) * mu
            running["var"] = momentum * running["var"] + (1.0 - momentum) * unbiased
        return out
    if mode == "eval":
        if running is None:
            raise ConfigError("eval-mode batch norm needs running statistics")
        return ops.batchnorm_eval(x, gamma, beta, running["mean"], running["var"], eps)
    raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")


def maxpool1d_forward(x: Tensor, window: int = 2) -> Tensor:
    return ops.maxpool1d(x, window)


def dense_forward(x: Tensor, W: Tensor, b: Tensor, activation: str = "none") -> Tensor:
    """``W x + b`` with ``W`` stored ``(out, in)``; ``x`` is ``(in,)`` or ``(B, in)``."""
    if x.ndim == 1:
        y = ops.reshape(ops.matmul(ops.reshape(x, (1, x.shape[0])), ops.transpose(W)), (W.shape[0],))
        y = ops.add(y, b)
    else:
        if x.shape[-1] != W.shape[1]:
            raise ShapeError(f"dense: input width {x.shape[-1]} does not match weights {W.shape}")
        y = ops.add_bias(ops.matmul(x, ops.transpose(W)), b, axis=-1)
    if activation == "relu":
        return ops.relu(y)
    if activation != "none":
        raise ConfigError(f"unknown activation {activation!r}")
    return y


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout_forward(x: Tensor, rate: float = 0.2, mode: str = "train",
                    rng: Optional[np.random.Generator] = None, seed: Optional[int] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``; eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        rng = np.random.default_rng(seed)
    return ops.mul(x, Tensor(dropout_mask(x.shape, rate, rng)))


weighted_cross_entropy = ops.weighted_cross_entropy


# -- layer objects ---------------------------------------------------------

class Layer:
    kind = "layer"

    @property
    def trace_name(self) -> str:
        return self.kind

    def __init__(self):
        self.params: dict = {}
        self.buffers: dict = {}

    def out_shape(self, shape: tuple) -> tuple:
        return shape

    def forward(self, x: Tensor, ctx: "ForwardContext") -> Tensor:
        raise NotImplementedError

    def describe(self) -> str:
        return self.kind


class ForwardContext:
    """Per-call settings: mode, dropout RNG and optional mask capture."""

    def __init__(self, mode: str = "eval", rng: Optional[np.random.Generator] = None,
                 capture_masks: bool = False):
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.mode = mode
        self.rng = rng
        self.masks: Optional[dict] = {} if capture_masks else None
        self.trace: list = []

    def record(self, stage: str, t: Tensor) -> None:
        self.trace.append((stage, tuple(t.shape[1:])))


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


class Conv1d(Layer):
    kind = "conv1d"

    def __init__(self, in_channels: int, filters: int, kernel: int, stride: int, rng):
        super().__init__()
        self.stride = stride
        bound = math.sqrt(6.0 / (in_channels * kernel))
        self.params["weight"] = Tensor(_uniform(rng, bound, (filters, in_channels, kernel)), requires_grad=True)
        self.params["bias"] = Tensor(np.zeros(filters), requires_grad=True)

    def out_shape(self, shape):
        c, n = shape
        f, _, k = self.params["weight"].shape
        if k > n:
            raise ShapeError(f"kernel size {k} exceeds sequence length {n}")
        return (f, -(-n // self.stride))

    def forward(self, x, ctx):
        return ops.conv1d(x, self.params["weight"], self.params["bias"], self.stride)

    def describe(self):
        f, _, k = self.params["weight"].shape
        return f"conv1d({f},{k},stride={self.stride})"


class BatchNorm1d(Layer):
    kind = "batchnorm"

    def __init__(self, channels: int):
        super().__init__()
        self.params["gamma"] = Tensor(np.ones(channels), requires_grad=True)
        self.params["beta"] = Tensor(np.zeros(channels), requires_grad=True)
        self.buffers["mean"] = np.zeros(channels)
        self.buffers["var"] = np.ones(channels)

    def forward(self, x, ctx):
        return batchnorm1d_forward(x, self.params["gamma"], self.params["beta"], ctx.mode, self.buffers)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, ctx):
        return ops.relu(x)


class MaxPool1d(Layer):
    kind = "maxpool"

    def __init__(self, window: int = 2):
        super().__init__()
        self.window = window

    def out_shape(self, shape):
        c, n = shape
        if n < self.window:
            raise ShapeError(f"pool window {self.window} exceeds sequence length {n}")
        return (c, n // self.window)

    def forward(self, x, ctx):
        return ops.maxpool1d(x, self.window)


class InputAttention(Layer):
    kind = "attention(IA)"

    def __init__(self, n_series: int, tau: float = 0.5):
        super().__init__()
        self.block = AttentionBlock.create(n_series, tau=tau)
        self.params.update(self.block.parameters())

    def out_shape(self, shape):
        if shape[0] != self.block.n_attend:
            raise ShapeError(f"block built for {self.block.n_attend} series, input has {shape[0]}")
        return shape

    def forward(self, x, ctx):
        out, mask = attend("IA", x, self.block, return_mask=True)
        if ctx.masks is not None:
            ctx.masks["IA"] = mask.data
        return out

    def taus(self):
        return {"IA": self.block.tau_value}


class BagOfFeatures(Layer):
    """Quantization, optional codeword/temporal attention, and pooling.

    With ``split`` set, a second (short-term) codebook pools over the last
    ``ceil(split * N)`` steps and its histogram is appended to the long-term
    one. Each branch gets its own attention block.
    """

    def __init__(self, in_shape: tuple, K: int, kernel: str, rng, split: Optional[float] = None,
                 attention: Optional[str] = None, init_sample: Optional[np.ndarray] = None, tau: float = 0.5):
        super().__init__()
        self.kind = "tnbof" if split is not None else "nbof"
        d, n = in_shape
        self.K, self.split, self.attention = K, split, attention
        self.branches = {"long": (0, n)}
        if split is not None:
            m = short_window(n, split)
            self.branches["short"] = (n - m, n)
        self.codebooks, self.blocks = {}, {}
        for name, (lo, hi) in self.branches.items():
            cb = Codebook.initialize(K, d, rng, kernel, sample=init_sample)
            self.codebooks[name] = cb
            for pname, p in cb.parameters().items():
                self.params[f"{name}.{pname}"] = p
            if attention is not None:
                size = K if attention == "CA" else hi - lo
                blk = AttentionBlock.create(size, tau=tau)
                self.blocks[name] = blk
                for pname, p in blk.parameters().items():
                    self.params[f"{name}.{attention}.{pname}"] = p

    def out_shape(self, shape):
        d, n = shape
        cb = self.codebooks["long"]
        if d != cb.D:
            raise ShapeError(f"codebook dimension {cb.D} does not match {d} input series")
        if self.attention == "TA" and n != self.branches["long"][1]:
            raise ShapeError(f"temporal attention built for N={self.branches['long'][1]}, input has N={n}")
        return (self.K * len(self.branches),)

    def forward(self, x, ctx):
        n = x.shape[-1]
        hists = []
        for name, cb in self.codebooks.items():
            if name == "short":
                m = short_window(n, self.split)
                seq = ops.slice_axis(x, n - m, n, axis=-1) if m < n else x
            else:
                seq = x
            phi = quantize(seq, cb)
            if name == "long" and self.attention is not None:
                ctx.record(self.kind, phi)
            if self.attention is not None:
                phi, mask = attend(self.attention, phi, self.blocks[name], return_mask=True)
                if name == "long":
                    ctx.record(f"attention({self.attention})", phi)
                if ctx.masks is not None:
                    ctx.masks[f"{self.attention}_{name}"] = mask.data
            hists.append(accumulate_histogram(phi))
        return hists[0] if len(hists) == 1 else ops.concat(hists, axis=-1)

    @property
    def trace_name(self):
        return "accumulate" if self.attention else self.kind

    def taus(self):
        return {f"{self.attention}_{name}": blk.tau_value for name, blk in self.blocks.items()}

    def describe(self):
        att = f"+{self.attention}" if self.attention else ""
        return f"{self.kind}(K={self.K}){att}"


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, units: int, rng, activation: str = "relu"):
        super().__init__()
        self.activation = activation
        bound = math.sqrt(6.0 / (in_features + units))
        self.params["weight"] = Tensor(_uniform(rng, bound, (units, in_features)), requires_grad=True)
        self.params["bias"] = Tensor(np.zeros(units), requires_grad=True)

    def out_shape(self, shape):
        if len(shape) != 1:
            raise ShapeError(f"dense layer needs a vector input, got per-sample shape {shape}")
        if shape[0] != self.params["weight"].shape[1]:
            raise ShapeError(f"dense layer expects width {self.params['weight'].shape[1]}, got {shape[0]}")
        return (self.params["weight"].shape[0],)

    def forward(self, x, ctx):
        return dense_forward(x, self.params["weight"], self.params["bias"], self.activation)

    def describe(self):
        return f"{self.kind}({self.params['weight'].shape[0]})"


class Output(Dense):
    kind = "output"

    def __init__(self, in_features: int, classes: int, rng):
        super().__init__(in_features, classes, rng, activation="none")


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate: float = 0.2):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, ctx):
        if ctx.mode == "train" and self.rate > 0 and ctx.rng is None:
            raise ConfigError("train-mode dropout needs a random generator")
        return dropout_forward(x, self.rate, ctx.mode, rng=ctx.rng)

    def describe(self):
        return f"dropout({self.rate})"
