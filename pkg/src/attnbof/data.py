"""Datasets of ``(D, N)`` feature sequences: container I/O, windowing, generators, folds.

Samples are stored as float32, which is also the on-disk precision, so a
write/read round trip is bit-exact. Models convert batches to float64.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, SeqbFormatError, ShapeError

MAGIC = b"SQB1"
VERSION = 1
FLAG_FIXED_N = 0x01


@dataclass(eq=False)
class Dataset:
    """Labelled sequences sharing a feature dimension ``D``.

    Attributes
    ----------
    samples : list of ndarray
        ``(D, N_i)`` float32 matrices. ``N_i`` may vary between samples.
    labels : ndarray
        Integer class index per sample.
    class_names : list of str
    provenance : str
        Free-text source description, including any generator seed.
    """

    samples: List[np.ndarray]
    labels: np.ndarray
    class_names: List[str]
    provenance: str = ""
    n_features: Optional[int] = field(default=None)

    def __post_init__(self):
        self.samples = [np.ascontiguousarray(s, dtype=np.float32) for s in self.samples]
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.class_names = [str(c) for c in self.class_names]
        if len(self.samples) != len(self.labels):
            raise ContractError(f"{len(self.samples)} samples but {len(self.labels)} labels")
        if self.samples:
            dims = {s.shape[0] for s in self.samples}
            if any(s.ndim != 2 for s in self.samples):
                raise ShapeError("every sample must be a (D, N) matrix")
            if len(dims) != 1:
                raise ShapeError(f"samples disagree on D: {sorted(dims)}")
            d = dims.pop()
            if self.n_features is not None and self.n_features != d:
                raise ShapeError(f"n_features={self.n_features} but samples have D={d}")
            self.n_features = d
            if any(s.shape[1] < 1 for s in self.samples):
                raise ShapeError("samples must have at least one step")
            if not all(np.isfinite(s).all() for s in self.samples):
                raise ContractError("samples contain NaN or Inf")
        if self.n_features is None:
            raise ContractError("an empty dataset needs an explicit n_features")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ContractError(f"labels must lie in [0, {len(self.class_names)})")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def fixed_length(self) -> Optional[int]:
        """Common sequence length, or None if lengths vary (or no samples)."""
        lengths = {s.shape[1] for s in self.samples}
        return lengths.pop() if len(lengths) == 1 else None

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset([self.samples[i] for i in indices], self.labels[indices], self.class_names,
                       self.provenance, self.n_features)

    def stacked(self, indices=None) -> np.ndarray:
        """``(B, D, N)`` float64 batch; requires equal lengths."""
        chosen = self.samples if indices is None else [self.samples[i] for i in indices]
        lengths = {s.shape[1] for s in chosen}
        if len(lengths) > 1:
            raise ShapeError(f"cannot stack sequences of different lengths {sorted(lengths)}")
        return np.stack(chosen).astype(np.float64)


# -- seqb container -------------------------------------------------------
#
# "SQB1" | u16 version | u32 sample_count | u32 D | u8 flags | [u32 N if fixed]
# | u16 class_count | per sample: [u32 N if variable] u32 label, D*N float32
# | u32 CRC32 of every preceding byte. All integers little-endian.

def write_seqb(ds: Dataset, path) -> None:
    n_fixed = ds.fixed_length
    flags = FLAG_FIXED_N if n_fixed is not None else 0
    parts = [MAGIC, struct.pack("<HIIB", VERSION, len(ds), ds.n_features, flags)]
    if n_fixed is not None:
        parts.append(struct.pack("<I", n_fixed))
    parts.append(struct.pack("<H", ds.n_classes))
    for x, y in zip(ds.samples, ds.labels):
        if n_fixed is None:
            parts.append(struct.pack("<I", x.shape[1]))
        parts.append(struct.pack("<I", int(y)))
        parts.append(np.ascontiguousarray(x, dtype="<f4").tobytes())
    payload = b"".join(parts)
    Path(path).write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise SeqbFormatError(f"truncated file while reading {what}", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_seqb(path) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise SeqbFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    if len(buf) < 8:
        raise SeqbFormatError("truncated file: missing checksum footer", len(buf))
    end = len(buf) - 4
    r = _Reader(buf, end)
    r.take(4, "magic")
    version, count, d, flags = r.unpack("<HIIB", "header")
    if version != VERSION:
        raise SeqbFormatError(f"unsupported version {version}", 4)
    if d < 1:
        raise SeqbFormatError("feature dimension must be >= 1", 10)
    n_fixed = r.unpack("<I", "sequence length")[0] if flags & FLAG_FIXED_N else None
    (n_classes,) = r.unpack("<H", "class count")
    samples, labels = [], []
    for i in range(count):
        n = n_fixed if n_fixed is not None else r.unpack("<I", f"length of sample {i}")[0]
        start = r.pos
        (label,) = r.unpack("<I", f"label of sample {i}")
        if n < 1:
            raise SeqbFormatError(f"sample {i} has zero length", start)
        nbytes = d * n * 4
        if r.pos + nbytes > end:
            raise SeqbFormatError(f"sample {i} of shape ({d}, {n}) extends past the end of the file", r.pos)
        if label >= n_classes:
            raise SeqbFormatError(f"label {label} of sample {i} exceeds class count {n_classes}", start)
        data = np.frombuffer(r.take(nbytes, f"data of sample {i}"), dtype="<f4").reshape(d, n)
        samples.append(data.astype(np.float32))
        labels.append(label)
    if r.pos != end:
        raise SeqbFormatError(f"{end - r.pos} unexpected trailing bytes", r.pos)
    (crc,) = struct.unpack("<I", buf[end:])
    if crc != zlib.crc32(buf[:end]):
        raise SeqbFormatError("checksum mismatch", end)
    return Dataset(samples, np.asarray(labels, dtype=np.int64), [str(c) for c in range(n_classes)],
                   provenance=f"seqb:{Path(path).name}", n_features=d)


# -- construction ----------------------------------------------------------

def sliding_windows(series: np.ndarray, window: int = 15, stride: int = 1, labels=None,
                    class_names: Optional[Sequence[str]] = None) -> Dataset:
    """Cut a ``(D, T)`` series into windows labelled by their final step."""
    series = np.asarray(series)
    if series.ndim != 2:
        raise ShapeError(f"series must be (D, T), got {series.shape}")
    d, t = series.shape
    if window < 1 or stride < 1:
        raise ContractError("window and stride must be >= 1")
    if t < window:
        raise ContractError(f"series of length {t} is shorter than the window {window}")
    labels = np.zeros(t, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    if labels.shape != (t,):
        raise ShapeError(f"need one label per step ({t}), got {labels.shape}")
    starts = range(0, t - window + 1, stride)
    samples = [series[:, s:s + window] for s in starts]
    win_labels = [labels[s + window - 1] for s in starts]
    if class_names is None:
        class_names = [str(c) for c in range(int(labels.max()) + 1)]
    return Dataset(samples, np.asarray(win_labels), list(class_names),
                   provenance=f"sliding_windows(window={window}, stride={stride})", n_features=d)


def _separated_means(rng, count: int, d: int, min_dist: float) -> np.ndarray:
    half = min_dist * max(1.0, count ** (1.0 / d)) * 0.75
    means: list = []
    attempts = 0
    while len(means) < count:
        cand = rng.uniform(-half, half, size=d)
        if all(np.linalg.norm(cand - m) >= min_dist for m in means):
            means.append(cand)
        attempts += 1
        if attempts % 2000 == 0:
            half *= 1.25
    return np.asarray(means)


def synth_clusters(D: int, N: int, classes: int, samples_per_class: int, seed: int,
                   components: int = 3, sigma: float = 1.0, separation: float = 4.0,
                   offset: float = 0.0) -> Dataset:
    """Sequences whose columns come from a class-specific Gaussian mixture.

    Every class owns ``components`` mixture means; all means (across all
    classes) are pairwise at least ``separation * sigma`` apart. Each column
    picks a component of its class uniformly and adds isotropic noise of
    standard deviation ``sigma``. ``offset`` shifts every value by a constant,
    the way log-energy features sit well away from zero; it does not touch
    the random stream.
    """
    if min(D, N, classes, samples_per_class, components) < 1:
        raise ConfigError("all sizes must be >= 1")
    rng = np.random.default_rng(seed)
    means = _separated_means(rng, classes * components, D, separation * sigma)
    means = means.reshape(classes, components, D)
    samples, labels = [], []
    for c in range(classes):
        for _ in range(samples_per_class):
            pick = rng.integers(components, size=N)
            x = means[c, pick].T + sigma * rng.standard_normal((D, N)) + offset
            samples.append(x)
            labels.append(c)
    order = rng.permutation(len(samples))
    return Dataset([samples[i] for i in order], np.asarray(labels)[order],
                   [f"class{c}" for c in range(classes)],
                   provenance=(f"synth_clusters(D={D}, N={N}, classes={classes}, "
                               f"samples_per_class={samples_per_class}, components={components}, "
                               f"sigma={sigma}, separation={separation}, offset={offset}, seed={seed})"),
                   n_features=D)


def inject_noise_bands(ds: Dataset, count: int = 10, seed: int = 0, noise_scale: float = 1.0) -> Dataset:
    """Append ``count`` noisy copies of each sample's across-series mean.

    For a sample ``X`` with row mean ``m = X.mean(axis=0)``, each new row is
    ``m + e`` with white noise ``e ~ N(0, (noise_scale * std(m))**2)``. The
    original rows are left untouched.
    """
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    out = []
    for x in ds.samples:
        x64 = x.astype(np.float64)
        m = x64.mean(axis=0)
        sigma = noise_scale * m.std()
        noise = rng.standard_normal((count, m.shape[0])) * sigma
        out.append(np.vstack([x64, m[None, :] + noise]).astype(np.float32))
        out[-1][: x.shape[0]] = x
    return Dataset(out, ds.labels.copy(), ds.class_names,
                   provenance=f"{ds.provenance} + inject_noise_bands(count={count}, seed={seed}, "
                              f"noise_scale={noise_scale}, sigma=std of series mean per sample)",
                   n_features=ds.n_features + count)


def kfold_split(labels, k: int, seed: int = 0) -> list:
    """Stratified k-fold partition as a list of ``(train_idx, test_idx)`` pairs.

    Each class is shuffled and dealt round-robin over the folds, continuing
    from where the previous class stopped so fold sizes stay balanced.
    """
    if isinstance(labels, Dataset):
        labels = labels.labels
    labels = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    folds: list = [[] for _ in range(k)]
    offset = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < k:
            raise ConfigError(f"class {c} has {idx.size} samples, fewer than k={k}")
        idx = rng.permutation(idx)
        for j, i in enumerate(idx):
            folds[(offset + j) % k].append(i)
        offset = (offset + idx.size) % k
    all_idx = np.arange(labels.size)
    out = []
    for f in folds:
        test = np.sort(np.asarray(f, dtype=np.int64))
        train = np.setdiff1d(all_idx, test)
        out.append((train, test))
    return out


def train_test_split(labels, test_fraction: float = 0.2, seed: int = 0):
    """Stratified single split; the fold count is derived from ``test_fraction``."""
    k = max(2, int(round(1.0 / test_fraction)))
    return kfold_split(labels, k, seed)[0]

