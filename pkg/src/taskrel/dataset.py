"""Embedding datasets: validation, file formats, standardization and resampling.

A dataset is the empirical joint distribution of (embedding, label) pairs
for one task. Features arrive pre-extracted from some encoder; nothing here
touches images or text.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

MAGIC = b"EMBD"
VERSION = 1
_HEADER = struct.Struct("<4sIQII")


@dataclass(frozen=True, eq=False)
class EmbeddingDataset:
    """Feature matrix ``(n, d)`` with integer labels in ``[0, K)``."""

    features: np.ndarray
    labels: np.ndarray
    K: int
    name: str = ""

    def __post_init__(self):
        feats = np.asarray(self.features)
        if not np.issubdtype(feats.dtype, np.floating):
            feats = feats.astype(np.float64)
        labels = np.asarray(self.labels)
        if feats.ndim != 2:
            raise InputError(f"features must be 2-D, got shape {feats.shape}")
        n, d = feats.shape
        if n < 1 or d < 1:
            raise InputError(f"dataset needs n >= 1 and d >= 1, got n={n}, d={d}")
        if labels.shape != (n,):
            raise InputError(f"labels shape {labels.shape} does not match n={n}")
        if labels.dtype.kind not in "iu":
            if not np.all(np.equal(np.mod(labels, 1), 0)):
                raise InputError("labels must be integers")
        labels = labels.astype(np.int64)
        K = int(self.K)
        if K < 1:
            raise InputError(f"class count must be >= 1, got {K}")
        if labels.min() < 0 or labels.max() >= K:
            raise InputError(f"label out of range [0, {K})")
        if not np.all(np.isfinite(feats)):
            raise InputError("non-finite feature value")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "K", K)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    def take(self, idx, name=None):
        """Return the sub-dataset at integer positions ``idx``."""
        idx = np.asarray(idx, dtype=np.int64)
        return EmbeddingDataset(self.features[idx], self.labels[idx], self.K,
                                self.name if name is None else name)

    def with_features(self, features):
        return EmbeddingDataset(features, self.labels, self.K, self.name)

    def with_labels(self, labels, K=None):
        return EmbeddingDataset(self.features, labels, self.K if K is None else K, self.name)


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray = field(repr=False)

    def apply(self, features):
        return (np.asarray(features, dtype=np.float64) - self.mean) / self.std

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


# --------------------------------------------------------------------------
# file formats


def _infer_format(path, format):
    if format is not None:
        if format not in ("binary", "csv"):
            raise InputError(f"unknown format {format!r}")
        return format
    return "csv" if str(path).lower().endswith(".csv") else "binary"


def load_dataset(path, format=None, name=None):
    """Read a dataset from ``path``.

    ``format`` is ``"binary"`` or ``"csv"``; when omitted it is inferred from
    the file extension (``.csv`` means csv, anything else binary).
    """
    format = _infer_format(path, format)
    if not os.path.exists(path):
        raise InputError(f"no such file: {path}")
    name = os.path.splitext(os.path.basename(str(path)))[0] if name is None else name
    if format == "binary":
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) < _HEADER.size:
            raise InputError(f"{path}: truncated header")
        magic, version, n, d, K = _HEADER.unpack_from(raw, 0)
        if magic != MAGIC:
            raise InputError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise InputError(f"{path}: unsupported version {version}")
        expected = _HEADER.size + 4 * n + 4 * n * d
        if len(raw) != expected:
            raise InputError(f"{path}: expected {expected} bytes for n={n}, d={d}, got {len(raw)}")
        off = _HEADER.size
        labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(np.int64)
        feats = np.frombuffer(raw, dtype="<f4", count=n * d, offset=off + 4 * n)
        feats = feats.reshape(n, d).astype(np.float32)
        return EmbeddingDataset(feats, labels, K, name)

    with open(path) as fh:
        header = fh.readline().strip().split(",")
        d = len(header) - 1
        if header[0] != "label" or d < 1 or header[1:] != [f"f{j}" for j in range(d)]:
            raise InputError(f"{path}: header must be 'label,f0,...,f{{d-1}}'")
        rows = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != d + 1:
                raise InputError(f"{path}:{lineno}: expected {d + 1} fields, got {len(parts)}")
            rows.append(parts)
    if not rows:
        raise InputError(f"{path}: no samples")
    try:
        table = np.array(rows, dtype=np.float64)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None
    labels = table[:, 0]
    if np.any(labels != np.round(labels)) or np.any(labels < 0):
        raise InputError(f"{path}: labels must be non-negative integers")
    labels = labels.astype(np.int64)
    return EmbeddingDataset(table[:, 1:], labels, int(labels.max()) + 1, name)


def save_dataset(ds, path, format=None):
    """Write ``ds`` atomically (temp file, then rename)."""
    format = _infer_format(path, format)
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        if format == "binary":
            with open(tmp, "wb") as fh:
                fh.write(_HEADER.pack(MAGIC, VERSION, ds.n, ds.d, ds.K))
                fh.write(ds.labels.astype("<u4").tobytes())
                fh.write(np.ascontiguousarray(ds.features, dtype="<f4").tobytes())
        else:
            header = ",".join(["label"] + [f"f{j}" for j in range(ds.d)])
            fmt = "%.9g" if ds.features.dtype == np.float32 else "%.17g"
            with open(tmp, "w") as fh:
                fh.write(header + "\n")
                for y, row in zip(ds.labels, ds.features):
                    fh.write(str(int(y)) + "," + ",".join(fmt % v for v in row) + "\n")
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


# --------------------------------------------------------------------------
# statistics and resampling


def standardize(ds):
    """Zero-mean, unit-variance features (population std, per dimension).

    Constant dimensions get ``std = 1`` so the map stays defined; they come
    out as all zeros.
    """
    if ds.n < 2:
        raise InputError("standardization needs at least 2 samples")
    X = np.asarray(ds.features, dtype=np.float64)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 1e-12 * np.maximum(1.0, np.abs(mean)), std, 1.0)
    stats = StandardizationStats(mean, std)
    return ds.with_features(stats.apply(X)), stats


def empirical_prior(ds):
    """Class frequencies ``count(label == k) / n`` as a length-K vector."""
    return np.bincount(ds.labels, minlength=ds.K) / ds.n


def check_prior(prior, K=None):
    p = np.asarray(prior, dtype=np.float64)
    if p.ndim != 1 or (K is not None and p.shape[0] != K):
        raise InputError(f"prior must be a vector of length {K}")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise InputError("prior must be nonnegative and sum to 1")
    return p


def _as_rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def class_counts(prior, m):
    """Split ``m`` draws across classes by largest remainder of ``m * prior``."""
    prior = np.asarray(prior, dtype=np.float64)
    raw = m * prior
    counts = np.floor(raw).astype(np.int64)
    short = m - counts.sum()
    if short > 0:
        # stable sort keeps lower class indices first among equal remainders
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def sample_indices(labels, K, prior, m, rng, replace=True):
    """Indices of ``m`` samples whose class counts follow ``prior``."""
    counts = class_counts(prior, m)
    by_class = [np.flatnonzero(labels == k) for k in range(K)]
    out = []
    for k, c in enumerate(counts):
        if c == 0:
            continue
        pool = by_class[k]
        if pool.size == 0:
            raise InputError(f"prior assigns mass to empty class {k}")
        if not replace and c > pool.size:
            raise InputError(f"class {k} has {pool.size} samples, {c} requested without replacement")
        out.append(rng.choice(pool, size=c, replace=replace))
    idx = np.concatenate(out)
    return idx[rng.permutation(idx.size)]


def subsample_by_prior(ds, prior, m, seed=None, replace=True):
    """Draw ``m`` samples from ``ds`` with class proportions given by ``prior``.

    Per-class counts are fixed by largest-remainder rounding of ``m * prior``;
    the members of each class are drawn uniformly (with replacement unless
    ``replace=False``) and the result is shuffled.
    """
    prior = check_prior(prior, ds.K)
    if m < 1:
        raise InputError("m must be >= 1")
    idx = sample_indices(ds.labels, ds.K, prior, int(m), _as_rng(seed), replace)
    return ds.take(idx)


def subsample_classes(ds, k, seed=None, return_classes=False):
    """Keep ``k`` randomly chosen classes and relabel them ``0..k-1``.

    The kept classes are relabelled in increasing order of their original id;
    ``return_classes=True`` also returns those ids.
    """
    if k > ds.K:
        raise InputError(f"cannot keep {k} of {ds.K} classes")
    present = np.flatnonzero(np.bincount(ds.labels, minlength=ds.K) > 0)
    if k > present.size:
        raise InputError(f"only {present.size} classes have samples, {k} requested")
    keep = np.sort(_as_rng(seed).choice(present, size=k, replace=False))
    mask = np.isin(ds.labels, keep)
    remap = np.full(ds.K, -1, dtype=np.int64)
    remap[keep] = np.arange(k)
    out = EmbeddingDataset(ds.features[mask], remap[ds.labels[mask]], k, ds.name)
    return (out, keep) if return_classes else out
