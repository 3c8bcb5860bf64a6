"""Long-tailed synthetic data, dataset files, splits, perturbations and samplers."""

from __future__ import annotations

import csv
import logging
import math
import os
import struct
import tempfile
import warnings
import zlib
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"LMDS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class DatasetFormatError(ValueError):
    """Malformed dataset file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class LongTailSpec:
    num_classes: int
    head_count: int
    imbalance_factor: float
    feature_dim: int = 8
    class_separation: float = 3.0
    noise_dims: int = 0
    seed: int = 0
    sigma: float = 1.0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.head_count < 1:
            raise ValueError("head_count must be >= 1")
        if not self.imbalance_factor >= 1:
            raise ValueError("imbalance_factor must be >= 1")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        if not self.class_separation > 0:
            raise ValueError("class_separation must be positive")
        if self.noise_dims < 0:
            raise ValueError("noise_dims must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if max(1, round(self.head_count / self.imbalance_factor)) < 1:
            raise ValueError("tail count must be >= 1")


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split_tag: str = "train"
    class_counts: np.ndarray = field(init=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features must be N x C and match labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.split_tag not in ("train", "val", "test"):
            raise ValueError(f"bad split tag {self.split_tag!r}")
        self.class_counts = np.bincount(self.labels, minlength=self.num_classes)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx, split_tag: Optional[str] = None) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.num_classes,
                       split_tag or self.split_tag)


def pareto_counts(spec: LongTailSpec) -> np.ndarray:
    """Per-class counts ``N0 * r**(-c/(K-1))`` rounded half-to-even, floored at 1."""
    k, n0, r = spec.num_classes, spec.head_count, spec.imbalance_factor
    if r < 1:
        raise ValueError("imbalance factor must be >= 1")
    return np.array([max(1, round(n0 * r ** (-c / (k - 1)))) for c in range(k)], dtype=np.int64)


def class_means(spec: LongTailSpec) -> np.ndarray:
    """Class centres on a circle in the first two coordinates.

    Neighbouring centres are ``class_separation`` apart; for two classes the
    centres sit at +-sep/2 on the first axis.
    """
    k = spec.num_classes
    dim = spec.feature_dim + spec.noise_dims
    means = np.zeros((k, dim))
    if k == 2:
        means[:, 0] = [-spec.class_separation / 2, spec.class_separation / 2]
        return means
    radius = spec.class_separation / (2.0 * math.sin(math.pi / k))
    angles = 2.0 * math.pi * np.arange(k) / k
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def synth_longtail(spec: LongTailSpec, counts: Optional[np.ndarray] = None) -> Dataset:
    """Isotropic Gaussian classes with Pareto counts.

    Features are rounded to float32 precision so the in-memory dataset equals
    what the binary format stores.
    """
    counts = pareto_counts(spec) if counts is None else np.asarray(counts, dtype=np.int64)
    rng = np.random.default_rng(spec.seed)
    means = class_means(spec)
    dim = means.shape[1]
    feats, labels = [], []
    for c, n in enumerate(counts):
        feats.append(means[c] + spec.sigma * rng.standard_normal((int(n), dim)))
        labels.append(np.full(int(n), c, dtype=np.int64))
    x = np.concatenate(feats).astype(np.float32).astype(np.float64)
    return Dataset(x, np.concatenate(labels), spec.num_classes, "train")


def split(ds: Dataset, ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2),
          seed: int = 0) -> Tuple[Dataset, Dataset, Dataset]:
    """Stratified train/val/test split."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must be three positive numbers summing to 1")
    rng = np.random.default_rng([seed, 7])
    parts = ([], [], [])
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size == 0:
            continue
        idx = idx[rng.permutation(idx.size)]
        n = idx.size
        if n < 3:
            warnings.warn(f"class {c} has {n} samples; all placed in train", stacklevel=2)
            parts[0].append(idx)
            continue
        n_val = max(1, round(ratios[1] * n))
        n_test = max(1, round(ratios[2] * n))
        n_train = n - n_val - n_test
        if n_train < 1:
            n_train, n_test = 1, n - n_val - 1
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train:n_train + n_val])
        parts[2].append(idx[n_train + n_val:])
    out = []
    for tag, chunk in zip(("train", "val", "test"), parts):
        idx = np.sort(np.concatenate(chunk)) if chunk else np.zeros(0, dtype=np.int64)
        out.append(ds.subset(idx, tag))
    return tuple(out)


@dataclass(frozen=True)
class PerturbConfig:
    mode: str = "weak"
    gauss_sigma: float = 0.05
    mask_prob: float = 0.0
    scale_jitter: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("strong", "weak"):
            raise ValueError(f"unknown perturbation mode {self.mode!r}")
        if self.gauss_sigma < 0 or self.scale_jitter < 0:
            raise ValueError("sigma and jitter must be non-negative")
        # mask_prob == 1 is accepted as the degenerate all-masked case
        if not 0 <= self.mask_prob <= 1:
            raise ValueError("mask_prob must lie in [0, 1]")

    @classmethod
    def weak(cls, seed: int = 0) -> "PerturbConfig":
        return cls("weak", 0.05, 0.0, 0.02, seed)

    @classmethod
    def strong(cls, seed: int = 0) -> "PerturbConfig":
        return cls("strong", 0.2, 0.15, 0.1, seed)

    def with_seed(self, seed: int) -> "PerturbConfig":
        return replace(self, seed=seed)


def check_perturb_order(weak: PerturbConfig, strong: PerturbConfig) -> None:
    """Weak view must be strictly milder on every active knob."""
    for attr in ("gauss_sigma", "mask_prob", "scale_jitter"):
        w, s = getattr(weak, attr), getattr(strong, attr)
        if s > 0 and not w < s:
            raise ValueError(f"weak {attr}={w} is not below strong {attr}={s}")


def perturb(batch: np.ndarray, cfg: PerturbConfig, batch_index: int = 0) -> np.ndarray:
    """``mask * (x + noise) * (1 + u)`` with a per-row scale draw ``u``."""
    x = np.asarray(batch, dtype=np.float64)
    rng = np.random.default_rng([cfg.seed, batch_index])
    out = x.copy()
    if cfg.gauss_sigma > 0:
        out += cfg.gauss_sigma * rng.standard_normal(x.shape)
    if cfg.mask_prob > 0:
        out *= rng.random(x.shape) >= cfg.mask_prob
    if cfg.scale_jitter > 0:
        u = rng.uniform(-cfg.scale_jitter, cfg.scale_jitter, size=(x.shape[0], 1))
        out *= 1.0 + u
    return out


# samplers -------------------------------------------------------------------

def instance_batches(n: int, batch: int, seed: int, epoch: int = 0) -> Iterator[np.ndarray]:
    """One shuffled pass over ``n`` instances."""
    perm = np.random.default_rng([seed, 11, epoch]).permutation(n)
    for start in range(0, n, batch):
        yield perm[start:start + batch]


def _class_index(labels: np.ndarray, num_classes: int):
    members = [np.flatnonzero(labels == c) for c in range(num_classes)]
    empty = [c for c, m in enumerate(members) if m.size == 0]
    if empty:
        raise ValueError(f"classes {empty} have no samples")
    return members


def class_balanced_indices(labels: np.ndarray, num_classes: int, n: int,
                           rng: np.random.Generator) -> np.ndarray:
    """``n`` draws: class uniform in [0, K), then an instance uniform within it."""
    members = _class_index(np.asarray(labels), num_classes)
    cls = rng.integers(num_classes, size=n)
    out = np.empty(n, dtype=np.int64)
    for c, m in enumerate(members):
        sel = cls == c
        out[sel] = m[rng.integers(m.size, size=int(sel.sum()))]
    return out


def sampler_class_balanced(ds: Dataset, batch: int, seed: int) -> Iterator[np.ndarray]:
    """Infinite stream of class-balanced index batches (with replacement)."""
    _class_index(ds.labels, ds.num_classes)
    rng = np.random.default_rng([seed, 13])
    while True:
        yield class_balanced_indices(ds.labels, ds.num_classes, batch, rng)


def uniform_indices(n_items: int, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(n_items, size=n)


# file formats ---------------------------------------------------------------

def _atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_dataset(ds: Dataset) -> bytes:
    n, c = ds.features.shape
    if ds.num_classes > 0xFFFF:
        raise ValueError("labels do not fit in u16")
    record = np.dtype([("x", "<f4", (c,)), ("y", "<u2")])
    rows = np.empty(n, dtype=record)
    rows["x"] = ds.features.astype("<f4")
    rows["y"] = ds.labels.astype("<u2")
    body = _HEADER.pack(MAGIC, FORMAT_VERSION, n, c, ds.num_classes) + rows.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_dataset(blob: bytes, split_tag: str = "train") -> Dataset:
    if len(blob) < _HEADER.size:
        raise DatasetFormatError(
            f"truncated header: expected {_HEADER.size} bytes, got {len(blob)}", len(blob))
    magic, version, n, c, k = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    expected = _HEADER.size + n * (4 * c + 2) + 4
    if len(blob) != expected:
        raise DatasetFormatError(
            f"length mismatch: expected {expected} bytes, got {len(blob)}",
            min(len(blob), expected))
    stored = struct.unpack_from("<I", blob, expected - 4)[0]
    actual = zlib.crc32(blob[:expected - 4])
    if stored != actual:
        raise DatasetFormatError(
            f"CRC32 mismatch: stored {stored:#010x}, computed {actual:#010x}", expected - 4)
    record = np.dtype([("x", "<f4", (c,)), ("y", "<u2")])
    rows = np.frombuffer(blob, dtype=record, count=n, offset=_HEADER.size)
    labels = rows["y"].astype(np.int64)
    if labels.size and labels.max() >= k:
        bad = int(np.argmax(labels >= k))
        raise DatasetFormatError(f"label {labels[bad]} out of range for K={k}",
                                 _HEADER.size + bad * record.itemsize + 4 * c)
    return Dataset(rows["x"].astype(np.float64), labels, k, split_tag)


def save_dataset(ds: Dataset, path: str) -> None:
    """Write ``.csv`` as text, anything else as the binary LMDS format."""
    if str(path).lower().endswith(".csv"):
        _atomic_write(path, _csv_bytes(ds))
    else:
        _atomic_write(path, encode_dataset(ds))


def load_dataset(path: str, split_tag: str = "train", num_classes: Optional[int] = None) -> Dataset:
    if str(path).lower().endswith(".csv"):
        return _load_csv(path, split_tag, num_classes)
    with open(path, "rb") as fh:
        return decode_dataset(fh.read(), split_tag)


def _csv_bytes(ds: Dataset) -> bytes:
    c = ds.dim
    lines = [",".join([f"f{i}" for i in range(c)] + ["label"])]
    for row, y in zip(ds.features, ds.labels):
        lines.append(",".join(f"{v:.9g}" for v in row.astype(np.float32)) + f",{int(y)}")
    return ("\n".join(lines) + "\n").encode()


def _load_csv(path: str, split_tag: str, num_classes: Optional[int]) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-1] != "label":
            raise DatasetFormatError("CSV header must end with 'label'", 0)
        c = len(header) - 1
        if header[:-1] != [f"f{i}" for i in range(c)]:
            raise DatasetFormatError("CSV feature columns must be f0..f{C-1}", 0)
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != c + 1:
                raise DatasetFormatError(f"line {lineno}: expected {c + 1} fields, got {len(row)}",
                                         lineno)
            feats.append([float(v) for v in row[:-1]])
            labels.append(int(row[-1]))
    labels = np.asarray(labels, dtype=np.int64)
    k = num_classes if num_classes is not None else (int(labels.max()) + 1 if labels.size else 1)
    x = np.asarray(feats, dtype=np.float32).astype(np.float64).reshape(len(labels), c)
    return Dataset(x, labels, k, split_tag)
