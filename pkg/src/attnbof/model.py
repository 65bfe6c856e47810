"""Declarative model specs and the assembler that turns them into a layer chain."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import PLACEMENTS
from .errors import BuildError, ConfigError, ShapeError
from .layers import (BagOfFeatures, BatchNorm1d, Conv1d, Dense, Dropout, ForwardContext,
                     InputAttention, MaxPool1d, Output, ReLU)
from .tensor import Tensor

KINDS = ("conv1d", "batchnorm", "relu", "maxpool", "dense", "dropout", "nbof", "tnbof",
         "attention", "output")
_ALIASES = {"conv": "conv1d", "bn": "batchnorm", "pool": "maxpool", "fc": "dense",
            "attn": "attention"}
_POSITIONAL = {
    "conv1d": ("filters", "kernel", "stride"),
    "maxpool": ("window",),
    "dense": ("units", "activation"),
    "dropout": ("rate",),
    "nbof": ("K",),
    "tnbof": ("K", "split"),
    "attention": ("placement", "n"),
    "output": ("classes",),
}


@dataclass
class LayerSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = _ALIASES.get(self.kind, self.kind)
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")

    def __str__(self):
        if not self.params:
            return self.kind
        args = ",".join(f"{k}={v}" for k, v in self.params.items())
        return f"{self.kind}({args})"


@dataclass
class ModelConfig:
    """Architecture recipe.

    ``attention`` lists placements to insert around the bag-of-features stage
    in addition to any explicit ``attention(...)`` layer specs.
    """

    input_shape: tuple
    layers: list
    kernel: str = "rbf"
    codewords: int = 256
    split: float = 0.5
    attention: tuple = ()
    codebook_init: str = "random"
    tau_init: float = 0.5


def _coerce(value: str):
    value = value.strip()
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def parse_layers(text: str) -> list:
    """Parse ``"conv(64,5),bn,relu,nbof(K=256),dense(512),dropout(0.2),output(3)"``."""
    specs = []
    for m in re.finditer(r"\s*([A-Za-z_0-9]+)\s*(?:\(([^)]*)\))?\s*(?:,|$)", text.strip()):
        if not m.group(1):
            continue
        kind = _ALIASES.get(m.group(1).lower(), m.group(1).lower())
        if kind not in KINDS:
            raise ConfigError(f"unknown layer kind {m.group(1)!r} in {text!r}")
        params = {}
        if m.group(2):
            names = _POSITIONAL.get(kind, ())
            for i, arg in enumerate(a for a in m.group(2).split(",") if a.strip()):
                if "=" in arg:
                    k, v = arg.split("=", 1)
                    params[k.strip()] = _coerce(v)
                elif i < len(names):
                    params[names[i]] = _coerce(arg)
                else:
                    raise ConfigError(f"too many arguments for {kind} in {text!r}")
        specs.append(LayerSpec(kind, params))
    if not specs:
        raise ConfigError("empty layer list")
    return specs


class Model:
    """Ordered layer chain with named parameters and a validated shape trace."""

    def __init__(self, cfg: ModelConfig, layers: list, trace: list):
        self.cfg = cfg
        self.layers = layers
        self.trace = trace

    @property
    def n_classes(self) -> int:
        return self.trace[-1][1][0]

    def parameters(self) -> dict:
        return {f"{i}.{layer.kind}.{name}": p
                for i, layer in enumerate(self.layers) for name, p in layer.params.items()}

    def buffers(self) -> dict:
        return {f"{i}.{layer.kind}.{name}": b
                for i, layer in enumerate(self.layers) for name, b in layer.buffers.items()}

    def constrained_parameters(self) -> list:
        """Names of tensors whose rows are subject to a max-norm cap."""
        names = []
        for name in self.parameters():
            _, kind, pname = name.split(".", 2)
            if kind in ("dense", "output") and pname == "weight":
                names.append(name)
            elif kind in ("nbof", "tnbof") and pname.endswith(".V"):
                names.append(name)
        return names

    def attention_blocks(self) -> dict:
        blocks = {}
        for layer in self.layers:
            if isinstance(layer, InputAttention):
                blocks["IA"] = layer.block
            elif isinstance(layer, BagOfFeatures):
                for name, blk in layer.blocks.items():
                    blocks[f"{layer.attention}_{name}"] = blk
        return blocks

    def taus(self) -> dict:
        return {k: b.tau_value for k, b in self.attention_blocks().items()}

    def forward(self, x, mode: str = "eval", rng: Optional[np.random.Generator] = None,
                capture_masks: bool = False, return_context: bool = False):
        """Logits ``(B, C)`` for a batch ``(B, D, N)``."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float64))
        if x.ndim != 3:
            raise ShapeError(f"model input must be (B, D, N), got {x.shape}")
        ctx = ForwardContext(mode, rng, capture_masks)
        ctx.record("input", x)
        for layer in self.layers:
            x = layer.forward(x, ctx)
            ctx.record(layer.trace_name, x)
        return (x, ctx) if return_context else x

    def predict(self, x) -> np.ndarray:
        return self.forward(x, mode="eval").data.argmax(axis=1)

    def state_arrays(self) -> dict:
        out = {f"param/{k}": p.data.copy() for k, p in self.parameters().items()}
        out.update({f"buffer/{k}": np.asarray(b).copy() for k, b in self.buffers().items()})
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        for k, p in self.parameters().items():
            arr = arrays[f"param/{k}"]
            if arr.shape != p.shape:
                raise ShapeError(f"checkpoint tensor {k} has shape {arr.shape}, model expects {p.shape}")
            p.data[...] = arr
        for i, layer in enumerate(self.layers):
            for name in layer.buffers:
                layer.buffers[name] = np.array(arrays[f"buffer/{i}.{layer.kind}.{name}"], dtype=np.float64)

    def summary(self) -> str:
        return " -> ".join("x".join(map(str, shape)) for _, shape in self.trace)


def _arrange(cfg: ModelConfig) -> list:
    specs = [LayerSpec(s.kind, dict(s.params)) for s in cfg.layers]
    for s in specs:
        if s.kind == "attention":
            s.params["placement"] = str(s.params.get("placement", "")).upper()
    bof_idx = [i for i, s in enumerate(specs) if s.kind in ("nbof", "tnbof")]
    for placement in (str(p).upper() for p in cfg.attention):
        if placement not in PLACEMENTS:
            raise BuildError(f"unknown attention placement {placement!r}")
        if not bof_idx:
            raise BuildError("attention placement requested but the model has no nbof/tnbof stage")
        i = bof_idx[0]
        spec = LayerSpec("attention", {"placement": placement})
        specs.insert(i if placement == "IA" else i + 1, spec)
        bof_idx = [j for j, s in enumerate(specs) if s.kind in ("nbof", "tnbof")]
    seen = [s.params.get("placement") for s in specs if s.kind == "attention"]
    for p in seen:
        if p not in PLACEMENTS:
            raise BuildError(f"unknown attention placement {p!r}")
        if seen.count(p) > 1:
            raise BuildError(f"attention placement {p} appears more than once")
    if "CA" in seen and "TA" in seen:
        raise BuildError("codeword and temporal attention cannot share one bag-of-features stage")
    if len(bof_idx) > 1:
        raise BuildError("only one nbof/tnbof stage is supported")
    if not specs or specs[-1].kind != "output" or sum(s.kind == "output" for s in specs) != 1:
        raise BuildError("the layer list must end with exactly one output(C) stage")
    return specs


def build_model(cfg: ModelConfig, seed: int = 0, init_sample: Optional[np.ndarray] = None) -> Model:
    """Assemble and shape-check the layer chain described by ``cfg``.

    Attention blocks are initialised deterministically, so adding one does
    not change the random initialisation of any other layer.
    """
    if len(cfg.input_shape) != 2 or min(cfg.input_shape) < 1:
        raise BuildError(f"input shape must be (D, N) with positive entries, got {cfg.input_shape}")
    specs = _arrange(cfg)
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in cfg.input_shape)
    trace = [("input", shape)]
    layers = []
    i = 0
    while i < len(specs):
        spec = specs[i]
        p = spec.params
        try:
            if spec.kind == "conv1d":
                layer = Conv1d(shape[0], int(p["filters"]), int(p["kernel"]), int(p.get("stride", 1)), rng)
            elif spec.kind == "batchnorm":
                layer = BatchNorm1d(shape[0])
            elif spec.kind == "relu":
                layer = ReLU()
            elif spec.kind == "maxpool":
                layer = MaxPool1d(int(p.get("window", 2)))
            elif spec.kind == "attention":
                if p["placement"] != "IA":
                    raise BuildError(f"{p['placement']} attention must directly follow an nbof/tnbof stage")
                if i + 1 >= len(specs) or specs[i + 1].kind not in ("nbof", "tnbof"):
                    raise BuildError("input attention must directly precede an nbof/tnbof stage")
                if len(shape) != 2:
                    raise ShapeError(f"input attention needs a (D, N) input, got {shape}")
                if "n" in p and int(p["n"]) != shape[0]:
                    raise ShapeError(f"block built for D={p['n']} but the stage receives D={shape[0]}")
                layer = InputAttention(shape[0], tau=cfg.tau_init)
            elif spec.kind in ("nbof", "tnbof"):
                if len(shape) != 2:
                    raise ShapeError(f"{spec.kind} needs a (D, N) input, got {shape}")
                att = None
                nxt = specs[i + 1] if i + 1 < len(specs) else None
                if nxt is not None and nxt.kind == "attention" and nxt.params["placement"] in ("CA", "TA"):
                    att = nxt.params["placement"]
                    n_req = nxt.params.get("n")
                    K = int(p.get("K", cfg.codewords))
                    have = K if att == "CA" else shape[1]
                    if n_req is not None and int(n_req) != have:
                        what = "K" if att == "CA" else "N"
                        raise ShapeError(f"{att} block built for {what}={n_req} but the stage provides {what}={have}")
                split = float(p.get("split", cfg.split)) if spec.kind == "tnbof" else None
                if cfg.codebook_init not in ("random", "kmeans"):
                    raise ConfigError(f"unknown codebook init {cfg.codebook_init!r}")
                sample = init_sample if cfg.codebook_init == "kmeans" else None
                layer = BagOfFeatures(shape, int(p.get("K", cfg.codewords)), p.get("kernel", cfg.kernel), rng,
                                      split=split, attention=att, init_sample=sample, tau=cfg.tau_init)
                if att is not None:
                    out = layer.out_shape(shape)
                    inner = (layer.K, shape[1])
                    trace.append((spec.kind, inner))
                    trace.append((f"attention({att})", inner))
                    layers.append(layer)
                    shape = out
                    trace.append(("accumulate", shape))
                    i += 2
                    continue
            elif spec.kind == "dense":
                if len(shape) != 1:
                    raise ShapeError(f"dense needs a vector input, got per-sample shape {shape}")
                layer = Dense(shape[0], int(p["units"]), rng, activation=p.get("activation", "relu"))
            elif spec.kind == "dropout":
                layer = Dropout(float(p.get("rate", 0.2)))
            elif spec.kind == "output":
                if len(shape) != 1:
                    raise ShapeError(f"output needs a vector input, got per-sample shape {shape}")
                layer = Output(shape[0], int(p["classes"]), rng)
            else:  # pragma: no cover - guarded by LayerSpec
                raise BuildError(f"unhandled kind {spec.kind}")
            shape = layer.out_shape(shape)
        except BuildError as exc:
            raise BuildError(f"stage {i} ({spec}): {exc}") from None
        except (ShapeError, ConfigError, KeyError, ValueError) as exc:
            raise BuildError(f"stage {i} ({spec}): {exc}") from None
        layers.append(layer)
        trace.append((spec.kind if spec.kind != "attention" else "attention(IA)", shape))
        i += 1
    return Model(cfg, layers, trace)
