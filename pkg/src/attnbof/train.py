"""Training loop, evaluation, checkpoints and the flat key-value run config."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import ops
from .data import Dataset, kfold_split, load_seqb
from .errors import ConfigError, ContractError, NonFiniteError, ShapeError
from .metrics import Metrics, confusion_matrix
from .model import Model, ModelConfig, build_model, parse_layers
from .optim import (MAX_NORM, WEIGHT_DECAY, LRSchedule, OptimState, adam_step, apply_constraints,
                    class_weights_from_counts, lr_schedule_value)
from .tensor import Tensor, zero_grad

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

CONFIG_KEYS = {
    "model.layers": "layers",
    "nbof.codewords": "codewords",
    "nbof.kernel": "kernel",
    "attention.placement": "attention",
    "tnbof.split": "split",
    "train.epochs": "epochs",
    "train.batch": "batch",
    "train.lr": "lr",
    "train.milestones": "milestones",
    "train.reg": "reg",
    "train.seed": "seed",
    "data.path": "data_path",
    "data.folds": "folds",
    "out.dir": "out_dir",
    # extension: inverse-frequency loss weighting can be switched off
    "train.class_weights": "class_weights",
}
REGULARIZERS = ("maxnorm", "decay", "none")


@dataclass
class TrainConfig:
    """One training run.

    ``folds`` >= 2 holds out the first stratified fold as a validation set;
    0 or 1 trains on everything.
    """

    layers: str = "nbof,dense(512),dropout(0.2),output(2)"
    codewords: int = 256
    kernel: str = "rbf"
    attention: tuple = ()
    split: float = 0.5
    epochs: int = 80
    batch: int = 64
    lr: float = 1e-3
    milestones: tuple = ((11, 0.1), (51, 0.1))
    reg: str = "maxnorm"
    seed: int = 0
    data_path: Optional[str] = None
    folds: int = 0
    out_dir: Optional[str] = None
    class_weights: bool = True

    def __post_init__(self):
        self.attention = tuple(str(a).upper() for a in self.attention)
        self.milestones = tuple((int(m), float(f)) for m, f in self.milestones)
        if self.reg not in REGULARIZERS:
            raise ConfigError(f"train.reg must be one of {REGULARIZERS}, got {self.reg!r}")
        if self.epochs < 0 or self.batch < 1:
            raise ConfigError("train.epochs must be >= 0 and train.batch >= 1")
        if self.folds < 0:
            raise ConfigError("data.folds must be >= 0")
        LRSchedule(self.lr, self.milestones)

    @property
    def schedule(self) -> LRSchedule:
        return LRSchedule(self.lr, self.milestones)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["attention"] = tuple(d.get("attention", ()))
        d["milestones"] = tuple(tuple(m) for m in d.get("milestones", ()))
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def model_config(self, input_shape) -> ModelConfig:
        return ModelConfig(tuple(input_shape), parse_layers(self.layers), kernel=self.kernel,
                           codewords=self.codewords, split=self.split, attention=self.attention)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_milestones(text: str) -> tuple:
    out = []
    for part in (p.strip() for p in text.split(",") if p.strip()):
        if ":" in part:
            e, f = part.split(":", 1)
            out.append((int(e), float(f)))
        else:
            out.append((int(part), 0.1))
    return tuple(out)


def parse_config_text(text: str, base_dir: Optional[Path] = None) -> TrainConfig:
    """Read ``key = value`` lines (``#`` starts a comment)."""
    values: Dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":" if ":" in line else None
        if sep is None:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split(sep, 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        field_name = CONFIG_KEYS[key]
        try:
            if field_name in ("codewords", "epochs", "batch", "seed", "folds"):
                values[field_name] = int(value)
            elif field_name in ("split", "lr"):
                values[field_name] = float(value)
            elif field_name == "attention":
                parts = [p.strip().upper() for p in value.replace("+", ",").split(",") if p.strip()]
                values[field_name] = tuple(p for p in parts if p != "NONE")
            elif field_name == "milestones":
                values[field_name] = _parse_milestones(value)
            elif field_name == "class_weights":
                values[field_name] = _parse_bool(value)
            elif field_name == "data_path" and base_dir is not None and value:
                p = Path(value)
                values[field_name] = str(p if p.is_absolute() else base_dir / p)
            else:
                values[field_name] = value
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), base_dir=path.parent)


# -- checkpoints -----------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    input_shape: tuple
    arrays: Dict[str, np.ndarray]
    optim_t: int
    rng_state: dict
    epoch: int
    history: List[dict] = field(default_factory=list)
    version: int = CHECKPOINT_VERSION

    @property
    def config_hash(self) -> str:
        return self.config.digest()

    def model(self) -> Model:
        model = build_model(self.config.model_config(self.input_shape), seed=self.config.seed)
        model.load_state_arrays(self.arrays)
        return model

    def save(self, path) -> Path:
        path = Path(path)
        meta = {
            "version": self.version, "config": self.config.to_dict(), "input_shape": list(self.input_shape),
            "optim_t": self.optim_t, "rng_state": self.rng_state, "epoch": self.epoch,
            "history": self.history, "config_hash": self.config_hash,
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta)), **self.arrays)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"checkpoint not found: {path}")
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            arrays = {k: z[k] for k in z.files if k != "__meta__"}
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta.get('version')}")
        cfg = TrainConfig.from_dict(meta["config"])
        if cfg.digest() != meta["config_hash"]:
            raise ConfigError("checkpoint config hash mismatch")
        return cls(cfg, tuple(meta["input_shape"]), arrays, meta["optim_t"], meta["rng_state"],
                   meta["epoch"], meta["history"])


# -- batching --------------------------------------------------------------

def _length_groups(ds: Dataset, idx: np.ndarray) -> list:
    groups: Dict[int, list] = {}
    for i in idx:
        groups.setdefault(ds.samples[i].shape[1], []).append(i)
    return [np.asarray(g) for _, g in sorted(groups.items())]


def batch_loss(model: Model, ds: Dataset, idx: np.ndarray, class_weights, rng) -> Tensor:
    """Mean weighted cross-entropy over ``idx``; sequences are grouped by length."""
    total = None
    for g in _length_groups(ds, idx):
        logits = model.forward(ds.stacked(g), mode="train", rng=rng)
        part = ops.weighted_cross_entropy(logits, ds.labels[g], class_weights)
        part = ops.scale(part, len(g) / len(idx))
        total = part if total is None else ops.add(total, part)
    return total


def predict(model: Model, ds: Dataset, idx=None, chunk: int = 256) -> np.ndarray:
    idx = np.arange(len(ds)) if idx is None else np.asarray(idx)
    preds = np.empty(len(idx), dtype=np.int64)
    pos = {int(i): k for k, i in enumerate(idx)}
    for g in _length_groups(ds, idx):
        for s in range(0, len(g), chunk):
            part = g[s:s + chunk]
            out = model.predict(ds.stacked(part))
            for i, p in zip(part, out):
                preds[pos[int(i)]] = p
    return preds


def _metrics(model: Model, ds: Dataset, idx=None) -> Metrics:
    idx = np.arange(len(ds)) if idx is None else np.asarray(idx)
    if len(idx) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    preds = predict(model, ds, idx)
    return Metrics(confusion_matrix(ds.labels[idx], preds, model.n_classes))


def evaluate(ckpt, ds: Dataset) -> Metrics:
    """Eval-mode metrics of a checkpoint (or model) on ``ds``."""
    if len(ds) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    model = ckpt if isinstance(ckpt, Model) else ckpt.model()
    d = model.trace[0][1][0]
    if ds.n_features != d:
        raise ShapeError(f"model expects D={d}, dataset has D={ds.n_features}")
    m = _metrics(model, ds)
    if not isinstance(ckpt, Model):
        m.loss_history = [row["train_loss"] for row in ckpt.history]
        m.tau_history = {k[4:]: [row[k] for row in ckpt.history]
                         for k in (ckpt.history[0] if ckpt.history else {}) if k.startswith("tau_")}
    return m


# -- training --------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: Model
    history: List[dict]
    step_losses: List[float]
    train_idx: np.ndarray
    val_idx: Optional[np.ndarray]
    checkpoint_path: Optional[Path] = None
    history_path: Optional[Path] = None


def _input_shape(ds: Dataset) -> tuple:
    n = ds.fixed_length
    if n is None:
        n = min(s.shape[1] for s in ds.samples)
    return (ds.n_features, n)


def _optim_state(cfg: TrainConfig) -> OptimState:
    if cfg.reg == "maxnorm":
        return OptimState(cfg.schedule, max_norm=MAX_NORM)
    if cfg.reg == "decay":
        return OptimState(cfg.schedule, weight_decay=WEIGHT_DECAY)
    return OptimState(cfg.schedule)


def history_columns(model: Model) -> list:
    return (["epoch", "lr", "train_loss", "train_acc", "val_acc", "macro_f1"]
            + [f"tau_{k}" for k in model.attention_blocks()])


def write_history(path, rows: List[dict], columns: list, cfg: TrainConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# batch_size={cfg.batch} seed={cfg.seed} reg={cfg.reg} config_hash={cfg.digest()}\n")
        fh.write("# macro_f1 = unweighted mean of per-class F1 (validation fold if data.folds >= 2, "
                 "else training set)\n")
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def read_history(path) -> List[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    for r in csv.DictReader(lines):
        rows.append({k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()})
    return rows


def train(cfg: TrainConfig, dataset: Optional[Dataset] = None, resume: Optional[Checkpoint] = None,
          write_files: bool = True) -> TrainResult:
    """Run the epoch loop described by ``cfg``.

    The dataset comes from ``dataset`` or ``cfg.data_path``. With ``resume``
    the run continues after the checkpoint's epoch with its parameters,
    optimizer moments and RNG state restored.
    """
    if dataset is None:
        if not cfg.data_path:
            raise ConfigError("no dataset given and data.path is not set")
        if not Path(cfg.data_path).is_file():
            raise ConfigError(f"dataset not found: {cfg.data_path}")
        dataset = load_seqb(cfg.data_path)
    ds = dataset
    if len(ds) == 0:
        raise ContractError("cannot train on an empty dataset")

    if cfg.folds >= 2:
        train_idx, val_idx = kfold_split(ds.labels, cfg.folds, cfg.seed)[0]
    else:
        train_idx, val_idx = np.arange(len(ds)), None

    input_shape = _input_shape(ds)
    model = build_model(cfg.model_config(input_shape), seed=cfg.seed)
    if model.n_classes < ds.n_classes:
        raise ConfigError(f"output layer has {model.n_classes} classes, dataset has {ds.n_classes}")
    params = model.parameters()
    state = _optim_state(cfg)
    constrained = model.constrained_parameters()
    rng = np.random.default_rng([cfg.seed, 1])
    history: List[dict] = []
    start_epoch = 1
    if resume is not None:
        ignore = {"epochs": 0, "out_dir": None}
        if resume.config.to_dict() | ignore != cfg.to_dict() | ignore:
            raise ConfigError("resume checkpoint was produced by a different configuration")
        model.load_state_arrays(resume.arrays)
        state.load_arrays(resume.arrays)
        state.t = resume.optim_t
        rng.bit_generator.state = resume.rng_state
        history = [dict(r) for r in resume.history]
        start_epoch = resume.epoch + 1
    else:
        apply_constraints(params, constrained, state)

    counts = np.bincount(ds.labels[train_idx], minlength=model.n_classes)
    # classes absent from the training split keep a neutral count
    weights = class_weights_from_counts(np.maximum(counts, 1)) if cfg.class_weights else None
    columns = history_columns(model)
    step_losses: List[float] = []
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None

    def snapshot(epoch: int) -> Checkpoint:
        arrays = model.state_arrays()
        arrays.update(state.to_arrays())
        return Checkpoint(cfg, input_shape, arrays, state.t, rng.bit_generator.state, epoch,
                          [dict(r) for r in history])

    for epoch in range(start_epoch, cfg.epochs + 1):
        lr = lr_schedule_value(epoch, cfg.schedule)
        order = rng.permutation(train_idx)
        total = 0.0
        for s in range(0, len(order), cfg.batch):
            idx = order[s:s + cfg.batch]
            zero_grad(params.values())
            try:
                loss = batch_loss(model, ds, idx, weights, rng)
                loss.backward()
                adam_step(params, state, lr)
            except NonFiniteError:
                if out_dir is not None and write_files:
                    snapshot(epoch - 1).save(out_dir / "diagnostic_checkpoint.npz")
                raise
            apply_constraints(params, constrained, state)
            value = loss.item()
            step_losses.append(value)
            total += value * len(idx)
        train_loss = total / len(order)
        if not math.isfinite(train_loss):
            raise NonFiniteError(f"non-finite training loss at epoch {epoch}")
        train_m = _metrics(model, ds, train_idx)
        row = {"epoch": epoch, "lr": lr, "train_loss": train_loss, "train_acc": train_m.accuracy}
        if val_idx is not None:
            val_m = _metrics(model, ds, val_idx)
            row.update(val_acc=val_m.accuracy, macro_f1=val_m.macro_f1)
        else:
            row.update(val_acc=float("nan"), macro_f1=train_m.macro_f1)
        row.update({f"tau_{k}": v for k, v in model.taus().items()})
        history.append(row)
        log.info("epoch %d lr=%g loss=%.5f train_acc=%.4f val_acc=%.4f", epoch, lr, train_loss,
                 row["train_acc"], row["val_acc"])

    ckpt = snapshot(max(cfg.epochs, start_epoch - 1))
    result = TrainResult(ckpt, model, history, step_losses, train_idx, val_idx)
    if out_dir is not None and write_files:
        result.checkpoint_path = ckpt.save(out_dir / "checkpoint.npz")
        result.history_path = write_history(out_dir / "history.csv", history, columns, cfg)
    return result
