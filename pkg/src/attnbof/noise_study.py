"""Clean versus noise-injected comparison of NBoF with and without input attention.

Every seed draws one synthetic task, trains each model variant on the clean
and the noise-injected version of it, and scores a large held-out set from
the same generator. Variants that differ only by the attention block share
their seed, so all other layers start from identical weights.
"""
from __future__ import annotations

import csv
import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attention import series_weights
from .data import Dataset, inject_noise_bands, synth_clusters
from .errors import ConfigError
from .tensor import Tensor
from .train import TrainConfig, evaluate, parse_config_text, train

CONDITIONS = ("clean", "noisy")
NOISE_SEED_SHIFT = 1000

# Study defaults. The hyperbolic kernel and the plain NBoF head follow the
# noisy-audio experiment (no convolution front end); everything about the
# synthetic task itself is a desk-scale choice.
DEFAULT_TRAIN = TrainConfig(
    layers="nbof,dense(32),dropout(0.2),output(2)",
    codewords=16, kernel="hyperbolic", epochs=40, batch=32, milestones=(),
)


@dataclass(frozen=True)
class StudySettings:
    """Synthetic task and noise protocol for one study."""

    D: int = 8
    N: int = 20
    classes: int = 2
    train_per_class: int = 100
    test_per_class: int = 500
    separation: float = 1.0
    offset: float = 10.0
    bands: int = 10
    noise_scale: float = 1.0
    temporal: bool = False

    def __post_init__(self):
        if min(self.D, self.N, self.classes, self.train_per_class, self.test_per_class, self.bands) < 1:
            raise ConfigError("study sizes must all be >= 1")


STUDY_KEYS = {f"study.{f.name}": f.name for f in dataclasses.fields(StudySettings)}


def parse_study_text(text: str, base_dir: Optional[Path] = None) -> Tuple[TrainConfig, StudySettings]:
    """Split a config into training keys and ``study.*`` keys.

    Training keys missing from the file take the study defaults rather than
    the general training defaults.
    """
    train_lines, study = [], {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        key = re.split(r"[=:]", line, 1)[0].strip() if line else ""
        if key.startswith("study."):
            if key not in STUDY_KEYS:
                raise ConfigError(f"unknown key {key!r}")
            study[STUDY_KEYS[key]] = re.split(r"[=:]", line, 1)[1].strip()
        else:
            train_lines.append(raw)
    given = parse_config_text("\n".join(train_lines), base_dir)
    explicit = {k for k in _keys_in(train_lines)}
    merged = {f: getattr(given if f in explicit else DEFAULT_TRAIN, f)
              for f in DEFAULT_TRAIN.to_dict()}
    cfg = TrainConfig(**merged)
    types = {f.name: f.type for f in dataclasses.fields(StudySettings)}
    values = {}
    for name, value in study.items():
        try:
            if types[name] in ("bool", bool):
                values[name] = value.lower() in ("1", "true", "yes", "on")
            elif types[name] in ("int", int):
                values[name] = int(value)
            else:
                values[name] = float(value)
        except ValueError:
            raise ConfigError(f"bad value for study.{name}: {value!r}") from None
    return cfg, StudySettings(**values)


def _keys_in(lines) -> set:
    from .train import CONFIG_KEYS
    out = set()
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if line:
            key = re.split(r"[=:]", line, 1)[0].strip()
            if key in CONFIG_KEYS:
                out.add(CONFIG_KEYS[key])
    return out


def load_study_config(path) -> Tuple[TrainConfig, StudySettings]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_study_text(path.read_text(), base_dir=path.parent)


def _variants(cfg: TrainConfig, temporal: bool) -> List[Tuple[str, str, tuple]]:
    base = re.sub(r"\btnbof\b", "nbof", cfg.layers)
    out = [("NBoF", base, ()), ("NBoF-IA", base, ("IA",))]
    if temporal:
        tl = re.sub(r"\bnbof\b", "tnbof", base)
        out += [("TNBoF", tl, ()), ("TNBoF-IA", tl, ("IA",))]
    return out


def _split(ds: Dataset, per_class: int) -> Tuple[np.ndarray, np.ndarray]:
    train_idx = []
    for c in range(ds.n_classes):
        train_idx.extend(np.flatnonzero(ds.labels == c)[:per_class])
    train_idx = np.sort(np.asarray(train_idx))
    test_idx = np.setdiff1d(np.arange(len(ds.labels)), train_idx)
    return train_idx, test_idx


@dataclass
class NoiseStudyReport:
    seeds: List[int]
    variants: List[str]
    settings: StudySettings
    accuracy: Dict[Tuple[str, str], List[float]] = field(default_factory=dict)
    tau_history: Dict[Tuple[str, str, int], List[float]] = field(default_factory=dict)
    masks: Dict[Tuple[str, int], np.ndarray] = field(default_factory=dict)

    def cell(self, variant: str, condition: str) -> Tuple[float, float]:
        v = np.asarray(self.accuracy[(variant, condition)])
        return float(v.mean()), float(v.std())

    def cell_text(self, variant: str, condition: str) -> str:
        mean, std = self.cell(variant, condition)
        return f"{mean:.4f}±{std:.4f} over {len(self.seeds)} seeds"

    def mask_weights(self, variant: str) -> Tuple[float, float]:
        """Mean input-attention weight on original rows and on injected rows."""
        D = self.settings.D
        w = np.concatenate([series_weights(self.masks[(variant, s)]) for s in self.seeds])
        return float(w[:, :D].mean()), float(w[:, D:].mean())

    def table(self) -> str:
        width = max(len(v) for v in self.variants) + 2
        cells = {(v, c): self.cell_text(v, c) for v in self.variants for c in CONDITIONS}
        col = max(len(t) for t in cells.values()) + 2
        lines = ["test accuracy, " + f"{self.settings.bands} injected bands",
                 "model".ljust(width) + "".join(c.ljust(col) for c in CONDITIONS)]
        for v in self.variants:
            lines.append(v.ljust(width) + "".join(cells[(v, c)].ljust(col) for c in CONDITIONS))
        attn = [v for v in self.variants if v.endswith("-IA")]
        if attn:
            lines.append("")
            lines.append("mean input-attention weight on noisy data (original rows vs injected rows)")
            for v in attn:
                o, i = self.mask_weights(v)
                lines.append(f"{v.ljust(width)}original {o:.4f}   injected {i:.4f}")
            lines.append("")
            lines.append("final tau of the input-attention block (mean over seeds)")
            for v in attn:
                for c in CONDITIONS:
                    final = [self.tau_history[(v, c, s)][-1] for s in self.seeds if self.tau_history[(v, c, s)]]
                    if final:
                        lines.append(f"{v.ljust(width)}{c:<7}{np.mean(final):+.4f}")
        return "\n".join(lines)

    def write(self, out_dir) -> Dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"table": out / "noise_study.txt", "accuracy": out / "noise_study.csv",
                 "tau": out / "noise_study_tau.csv", "masks": out / "noise_study_masks.csv",
                 "mask_arrays": out / "noise_study_masks.npz"}
        paths["table"].write_text(self.table() + "\n")
        with open(paths["accuracy"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "condition", "seed", "accuracy"])
            for (v, c), accs in self.accuracy.items():
                for s, a in zip(self.seeds, accs):
                    w.writerow([v, c, s, repr(a)])
        with open(paths["tau"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "condition", "seed", "epoch", "tau"])
            for (v, c, s), taus in self.tau_history.items():
                for e, t in enumerate(taus, 1):
                    w.writerow([v, c, s, e, repr(t)])
        D = self.settings.D
        with open(paths["masks"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "seed", "sample", "mean_weight_original", "mean_weight_injected"])
            for (v, s), mask in self.masks.items():
                sw = series_weights(mask)
                for i, row in enumerate(sw):
                    w.writerow([v, s, i, repr(float(row[:D].mean())), repr(float(row[D:].mean()))])
        np.savez_compressed(paths["mask_arrays"],
                            **{f"{v}/seed{s}": m.astype(np.float32) for (v, s), m in self.masks.items()})
        return paths


def run_noise_study(cfg: Optional[TrainConfig] = None, seeds: Sequence[int] = (0, 1, 2, 3, 4),
                    settings: Optional[StudySettings] = None, log=None) -> NoiseStudyReport:
    """Train every variant on clean and noisy data for each seed.

    ``cfg`` supplies the architecture and optimisation recipe; its attention,
    seed, fold and path fields are overridden per run.
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) < 3:
        raise ConfigError(f"a noise study needs at least 3 seeds to report a spread, got {len(seeds)}")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")
    cfg = DEFAULT_TRAIN if cfg is None else cfg
    st = settings or StudySettings()
    variants = _variants(cfg, st.temporal)
    report = NoiseStudyReport(seeds, [v for v, _, _ in variants], st)

    for seed in seeds:
        clean = synth_clusters(st.D, st.N, st.classes, st.train_per_class + st.test_per_class, seed=seed,
                               separation=st.separation, offset=st.offset)
        noisy = inject_noise_bands(clean, st.bands, seed=seed + NOISE_SEED_SHIFT, noise_scale=st.noise_scale)
        train_idx, test_idx = _split(clean, st.train_per_class)
        for condition, ds in zip(CONDITIONS, (clean, noisy)):
            train_ds, test_ds = ds.subset(train_idx), ds.subset(test_idx)
            for name, layers, att in variants:
                run_cfg = dataclasses.replace(cfg, layers=layers, attention=att, seed=seed, folds=0,
                                              data_path=None, out_dir=None)
                result = train(run_cfg, train_ds, write_files=False)
                acc = evaluate(result.model, test_ds).accuracy
                report.accuracy.setdefault((name, condition), []).append(acc)
                if att:
                    report.tau_history[(name, condition, seed)] = [row["tau_IA"] for row in result.history]
                    if condition == "noisy":
                        _, ctx = result.model.forward(Tensor(test_ds.stacked()), capture_masks=True,
                                                      return_context=True)
                        report.masks[(name, seed)] = np.asarray(ctx.masks["IA"])
                if log:
                    log(f"seed {seed} {condition:<5} {name:<9} accuracy {acc:.4f}")
    return report
