"""Synthetic labeled datasets with known ground-truth densities.

Because the generating distribution is explicit, the smoothed
class-conditional score has a closed form here; that analytic score is
the oracle the trained score network is validated against.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"ULDS"
DATASET_VERSION = 1


class DatasetFormatError(Exception):
    """Dataset file is malformed or truncated."""


class NormalizationError(ValueError):
    """Normalization is undefined for this data (zero-variance column)."""


@dataclass(frozen=True)
class LabeledDataset:
    """n feature vectors in R^d with integer labels in [0, n_classes)."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    name: str = ""

    def __post_init__(self):
        feats = np.asarray(self.features)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValueError(f"features must be (n, d) with n >= 1, got {feats.shape}")
        if labels.shape != (feats.shape[0],):
            raise ValueError("labels must be one integer per example")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain non-finite values")
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        present = np.unique(labels)
        if present.min() < 0 or present.max() >= self.n_classes:
            raise ValueError(f"labels outside [0, {self.n_classes})")
        if present.size != self.n_classes:
            raise ValueError("every class must have at least one example")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def with_features(self, feats: np.ndarray, name: str | None = None) -> "LabeledDataset":
        return LabeledDataset(feats, self.labels, self.n_classes,
                              self.name if name is None else name)


@dataclass(frozen=True)
class GaussianComponent:
    mean: tuple[float, ...]
    scale: float
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        if self.scale <= 0:
            raise ValueError("component scale must be positive")
        if self.weight <= 0:
            raise ValueError("component weight must be positive")


@dataclass(frozen=True)
class GaussianMixtureSpec:
    """Per-class isotropic Gaussian mixtures with explicit densities.

    `classes[c]` lists the components of class c (within-class weights must
    sum to 1); `class_weights` is the prior over classes.
    """

    classes: tuple[tuple[GaussianComponent, ...], ...]
    class_weights: tuple[float, ...]

    def __post_init__(self):
        classes = tuple(tuple(comps) for comps in self.classes)
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "class_weights",
                           tuple(float(w) for w in self.class_weights))
        if not classes or any(not comps for comps in classes):
            raise ValueError("every class needs at least one component")
        if len(self.class_weights) != len(classes):
            raise ValueError("one class weight per class")
        if any(w <= 0 for w in self.class_weights):
            raise ValueError("class weights must be positive")
        if abs(sum(self.class_weights) - 1.0) > 1e-9:
            raise ValueError("class weights must sum to 1")
        dim = len(classes[0][0].mean)
        for comps in classes:
            if any(len(c.mean) != dim for c in comps):
                raise ValueError("all component means must share one dimension")
            if abs(sum(c.weight for c in comps) - 1.0) > 1e-9:
                raise ValueError("within-class component weights must sum to 1")

    @property
    def dim(self) -> int:
        return len(self.classes[0][0].mean)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @classmethod
    def single_gaussians(cls, means, scale: float) -> "GaussianMixtureSpec":
        """One isotropic component per class, uniform class prior."""
        means = [tuple(float(v) for v in m) for m in means]
        k = len(means)
        return cls(
            classes=tuple((GaussianComponent(m, scale, 1.0),) for m in means),
            class_weights=tuple(1.0 / k for _ in means),
        )

    def _class_params(self, c: int):
        comps = self.classes[c]
        means = np.array([comp.mean for comp in comps], dtype=np.float64)
        scales = np.array([comp.scale for comp in comps], dtype=np.float64)
        weights = np.array([comp.weight for comp in comps], dtype=np.float64)
        return means, scales, weights


def gen_mixture(spec: GaussianMixtureSpec, n_per_class: int, seed: int,
                name: str = "mixture", dtype=np.float32) -> LabeledDataset:
    """Draw n_per_class points from each class, labels by generating class."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    feats = []
    labels = []
    for c in range(spec.n_classes):
        means, scales, weights = spec._class_params(c)
        idx = rng.choice(len(means), size=n_per_class, p=weights)
        eps = rng.standard_normal((n_per_class, spec.dim))
        feats.append(means[idx] + scales[idx, None] * eps)
        labels.append(np.full(n_per_class, c, dtype=np.int64))
    return LabeledDataset(np.concatenate(feats).astype(dtype),
                          np.concatenate(labels), spec.n_classes, name)


def gen_two_moons(n_per_class: int, noise_scale: float, seed: int,
                  name: str = "two_moons", dtype=np.float32) -> LabeledDataset:
    """Two interleaved half-circles; noise_scale=0 puts points exactly on them."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, np.pi, n_per_class)
    outer = np.stack([np.cos(t), np.sin(t)], axis=1)
    inner = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    feats = np.concatenate([outer, inner])
    feats = feats + noise_scale * rng.standard_normal(feats.shape)
    labels = np.concatenate([np.zeros(n_per_class, dtype=np.int64),
                             np.ones(n_per_class, dtype=np.int64)])
    return LabeledDataset(feats.astype(dtype), labels, 2, name)


def _class_log_terms(spec: GaussianMixtureSpec, smoothing: float, x: np.ndarray,
                     c: int):
    """Per-component log weights*density and smoothed variances for class c."""
    means, scales, weights = spec._class_params(c)
    variances = scales**2 + float(smoothing) ** 2
    d = spec.dim
    diff = x[:, None, :] - means[None, :, :]              # (n, m, d)
    sq = np.sum(diff * diff, axis=2)                      # (n, m)
    log_terms = (np.log(weights)[None, :]
                 - 0.5 * d * np.log(2.0 * np.pi * variances)[None, :]
                 - sq / (2.0 * variances)[None, :])
    return log_terms, means, variances


def analytic_log_density(spec: GaussianMixtureSpec, smoothing: float, x, y):
    """log of the sigma-smoothed class-conditional density q(x | y)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    out = np.empty(x.shape[0], dtype=np.float64)
    for c in np.unique(y):
        mask = y == c
        log_terms, _, _ = _class_log_terms(spec, smoothing, x[mask], int(c))
        m = np.max(log_terms, axis=1, keepdims=True)
        out[mask] = m[:, 0] + np.log(np.sum(np.exp(log_terms - m), axis=1))
    return out if out.size > 1 else float(out[0])


def analytic_score(spec: GaussianMixtureSpec, smoothing: float, x, y) -> np.ndarray:
    """Exact gradient of log q_smoothed(x | y).

    For a single-component class this is (mean - x) / (scale^2 + smoothing^2);
    multi-component classes combine component scores with posterior
    responsibilities.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape[0] != x.shape[0]:
        raise ValueError("analytic_score: one label per point")
    if y.min() < 0 or y.max() >= spec.n_classes:
        raise ValueError(f"analytic_score: label outside [0, {spec.n_classes})")
    out = np.empty_like(x)
    for c in np.unique(y):
        mask = y == c
        log_terms, means, variances = _class_log_terms(spec, smoothing, x[mask], int(c))
        m = np.max(log_terms, axis=1, keepdims=True)
        r = np.exp(log_terms - m)
        r /= np.sum(r, axis=1, keepdims=True)             # responsibilities (n, m)
        comp_scores = (means[None, :, :] - x[mask][:, None, :]) / variances[None, :, None]
        out[mask] = np.sum(r[:, :, None] * comp_scores, axis=1)
    return out[0] if single else out


# -- normalization ------------------------------------------------------------

@dataclass(frozen=True)
class NormalizeTransform:
    """Affine record mapping raw features to zero mean, unit std per dimension."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, feats: np.ndarray) -> np.ndarray:
        out = (np.asarray(feats, dtype=np.float64) - self.mean) / self.std
        return out.astype(np.asarray(feats).dtype)

    def invert(self, feats: np.ndarray) -> np.ndarray:
        out = np.asarray(feats, dtype=np.float64) * self.std + self.mean
        return out.astype(np.asarray(feats).dtype)

    def to_json(self) -> dict:
        return {"mean": [float(v) for v in self.mean],
                "std": [float(v) for v in self.std]}

    @classmethod
    def from_json(cls, obj: dict) -> "NormalizeTransform":
        return cls(np.asarray(obj["mean"], dtype=np.float64),
                   np.asarray(obj["std"], dtype=np.float64))


def normalize(ds: LabeledDataset) -> tuple[LabeledDataset, NormalizeTransform]:
    """Zero mean, unit per-dimension std; returns the transform for inversion."""
    feats = ds.features.astype(np.float64)
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    if np.any(std == 0.0):
        cols = np.flatnonzero(std == 0.0)
        raise NormalizationError(f"zero variance in feature column(s) {cols.tolist()}")
    transform = NormalizeTransform(mean, std)
    return ds.with_features(transform.apply(ds.features)), transform


# -- file I/O -----------------------------------------------------------------
#
# Layout: magic "ULDS", u32 version, u64 n, u32 d, u32 K,
# f32 features row-major little-endian, u16 labels little-endian.

def save_dataset(ds: LabeledDataset, path) -> None:
    if ds.n_classes > 0xFFFF:
        raise ValueError("too many classes for the u16 label encoding")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IQII", DATASET_VERSION, ds.n, ds.dim, ds.n_classes))
        fh.write(ds.features.astype("<f4", copy=False).tobytes())
        fh.write(ds.labels.astype("<u2").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DatasetFormatError(f"truncated dataset file while reading {what}")
    return buf


def load_dataset(path) -> LabeledDataset:
    path = Path(path)
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != DATASET_MAGIC:
            raise DatasetFormatError(f"{path}: bad magic, not a dataset file")
        version, n, d, k = struct.unpack("<IQII", _read_exact(fh, 20, "header"))
        if version != DATASET_VERSION:
            raise DatasetFormatError(f"{path}: unsupported dataset version {version}")
        feats = np.frombuffer(_read_exact(fh, n * d * 4, "features"), dtype="<f4")
        labels = np.frombuffer(_read_exact(fh, n * 2, "labels"), dtype="<u2")
        if fh.read(1):
            raise DatasetFormatError(f"{path}: trailing bytes after label payload")
    return LabeledDataset(feats.astype(np.float32).reshape(n, d),
                          labels.astype(np.int64), k, name=path.stem)


def dataset_hash(ds: LabeledDataset) -> bytes:
    """Content hash over the canonical file encoding of the dataset."""
    h = hashlib.sha256()
    h.update(struct.pack("<QII", ds.n, ds.dim, ds.n_classes))
    h.update(ds.features.astype("<f4", copy=False).tobytes())
    h.update(ds.labels.astype("<u2").tobytes())
    return h.digest()
