"""2D attention over the columns of a matrix and its three NBoF placements.

For ``S`` of shape ``(M, N)`` the block computes

    Z = S @ W,   A = row-softmax(Z),   S~ = tau * (S * A) + (1 - tau) * S

where ``W`` is ``N x N`` with its diagonal held at ``1/N``. Placements:

* codeword attention: rows of the quantized features ``(K, N)`` compete,
* temporal attention: time steps of the quantized features compete,
* input attention: the input series ``(D, N)`` compete, before quantization.

All functions also accept a leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .tensor import Tensor, as_tensor

PLACEMENTS = ("CA", "TA", "IA")


@dataclass(eq=False)
class AttentionBlock:
    """Learnable off-diagonal weights and mixing scalar for one placement.

    Only the off-diagonal entries of ``W_off`` are ever read; the effective
    weight matrix is rebuilt with a ``1/N`` diagonal on every forward pass.
    """

    W_off: Tensor
    tau: Tensor
    n_attend: int

    def __post_init__(self):
        if self.W_off.shape != (self.n_attend, self.n_attend):
            raise ShapeError(f"W_off must be ({self.n_attend}, {self.n_attend}), got {self.W_off.shape}")
        if self.tau.shape != (1,):
            raise ShapeError(f"tau must have shape (1,), got {self.tau.shape}")

    @classmethod
    def create(cls, n_attend: int, tau: float = 0.5, W_off=None) -> "AttentionBlock":
        if n_attend < 1:
            raise ConfigError(f"attention dimension must be >= 1, got {n_attend}")
        W = np.zeros((n_attend, n_attend)) if W_off is None else np.asarray(W_off, dtype=np.float64)
        return cls(Tensor(W, requires_grad=True), Tensor([float(tau)], requires_grad=True), n_attend)

    def effective_weight(self) -> Tensor:
        return ops.pin_diagonal(self.W_off, 1.0 / self.n_attend)

    def parameters(self) -> dict:
        return {"W_off": self.W_off, "tau": self.tau}

    @property
    def tau_value(self) -> float:
        return float(self.tau.data[0])


def _check(s: Tensor, block: AttentionBlock, what: str) -> None:
    if s.ndim not in (2, 3):
        raise ShapeError(f"attention expects a matrix or a batch of matrices, got {s.shape}")
    if s.shape[-1] != block.n_attend:
        raise ShapeError(f"{what}: block attends over {block.n_attend} entries, input provides {s.shape[-1]}")


def attention_mask(s, block: AttentionBlock) -> Tensor:
    """Row-softmax of ``S @ W_eff``; same shape as ``S``."""
    s = as_tensor(s)
    _check(s, block, "attention_mask")
    return ops.row_softmax(ops.matmul(s, block.effective_weight()))


def apply_2da(s, block: AttentionBlock, return_mask: bool = False):
    """Attention-filtered ``S``, optionally with the mask that produced it."""
    s = as_tensor(s)
    _check(s, block, "apply_2da")
    mask = attention_mask(s, block)
    tau = block.tau
    out = ops.add(ops.scale(ops.mul(s, mask), tau), ops.scale(s, ops.sub(Tensor([1.0]), tau)))
    return (out, mask) if return_mask else out


def _transposed(x, block: AttentionBlock, what: str, return_mask: bool):
    x = as_tensor(x)
    if x.ndim not in (2, 3):
        raise ShapeError(f"{what} expects a matrix or a batch of matrices, got {x.shape}")
    if x.shape[-2] != block.n_attend:
        raise ShapeError(f"{what}: block attends over {block.n_attend} rows, input has {x.shape[-2]}")
    out, mask = apply_2da(ops.transpose(x), block, return_mask=True)
    out = ops.transpose(out)
    return (out, mask) if return_mask else out


def codeword_attention(phi, block: AttentionBlock, return_mask: bool = False):
    """Let the codeword rows of ``(K, N)`` quantized features compete.

    The result is transposed back to ``(K, N)``. The optional mask keeps the
    attention orientation, ``(N, K)``.
    """
    return _transposed(phi, block, "codeword_attention", return_mask)


def temporal_attention(phi, block: AttentionBlock, return_mask: bool = False):
    """Reweight time steps of ``(K, N)`` quantized features.

    Averaging the result over time gives an input-dependent weighted average
    instead of a plain mean. Works only for sequences of length
    ``block.n_attend``.
    """
    phi = as_tensor(phi)
    if phi.ndim in (2, 3) and phi.shape[-1] != block.n_attend:
        raise ShapeError(
            f"temporal_attention: block built for sequences of length {block.n_attend}, got {phi.shape[-1]}")
    return apply_2da(phi, block, return_mask=return_mask)


def input_attention(x, block: AttentionBlock, return_mask: bool = False):
    """Let the ``D`` input series of ``(D, N)`` compete before quantization.

    The optional mask is ``(N, D)``: one distribution over series per step.
    """
    return _transposed(x, block, "input_attention", return_mask)


def series_weights(mask: np.ndarray) -> np.ndarray:
    """Mean attention weight per attended entry, averaged over mask rows."""
    mask = np.asarray(mask)
    return mask.mean(axis=-2)


def attend(kind: str, x, block: AttentionBlock, return_mask: bool = False):
    if kind == "CA":
        return codeword_attention(x, block, return_mask)
    if kind == "TA":
        return temporal_attention(x, block, return_mask)
    if kind == "IA":
        return input_attention(x, block, return_mask)
    raise ConfigError(f"unknown attention placement {kind!r}; expected one of {PLACEMENTS}")


__all__ = [
    "AttentionBlock", "PLACEMENTS", "attention_mask", "apply_2da", "codeword_attention",
    "temporal_attention", "input_attention", "series_weights", "attend",
]
