"""Protection and collapse metrics, CSV reports, and 2-D scatter figures.

Collapse is quantified directly (mean per-example score norm, intra-class
pairwise spread) instead of through embedding visualizations; scatters are
plain SVG with an optional PCA projection for d > 2.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, fields

import numpy as np

from .datasets import LabeledDataset
from .models import ArchSpec, ScoreModel, score_eval
from .poisonforge import PoisonedDataset


@dataclass(frozen=True)
class MetricsRecord:
    """One experiment cell: a victim trained on (partially) poisoned data."""

    run_id: str
    dataset: str
    surrogate_arch: str
    victim_arch: str
    rho_u: float
    rho_a_train: float
    fraction: float
    clean_test_acc: float
    poisoned_test_acc: float
    mean_score_norm_clean: float
    mean_score_norm_poisoned: float
    intra_class_spread_clean: float
    intra_class_spread_poisoned: float

    def __post_init__(self):
        for name in ("clean_test_acc", "poisoned_test_acc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"MetricsRecord: {name}={v} outside [0, 1]")
        for name in ("intra_class_spread_clean", "intra_class_spread_poisoned"):
            if getattr(self, name) < 0:
                raise ValueError(f"MetricsRecord: {name} must be non-negative")


def describe_arch(spec: ArchSpec) -> str:
    dims = [spec.input_dim, *spec.hidden, spec.output_dim]
    return "-".join(str(d) for d in dims) + f"-{spec.activation}"


def intra_class_spread(features, labels, n_classes: int | None = None,
                       ) -> tuple[np.ndarray, float]:
    """Mean pairwise L2 distance within each class, plus the pooled mean.

    Per-class values are exact all-pairs means (classes with one point
    contribute 0); the pooled value averages over all within-class pairs.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if n_classes is None:
        n_classes = int(y.max()) + 1
    per_class = np.zeros(n_classes)
    total = 0.0
    pairs = 0
    for c in range(n_classes):
        pts = x[y == c]
        if pts.shape[0] == 0:
            raise ValueError(f"intra_class_spread: class {c} is empty")
        if pts.shape[0] == 1:
            continue
        sq = np.sum(pts * pts, axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (pts @ pts.T)
        np.clip(d2, 0.0, None, out=d2)
        dist = np.sqrt(d2)
        m = pts.shape[0]
        class_sum = float(np.sum(dist)) / 2.0
        class_pairs = m * (m - 1) // 2
        per_class[c] = class_sum / class_pairs
        total += class_sum
        pairs += class_pairs
    pooled = total / pairs if pairs else 0.0
    return per_class, pooled


def score_norm_stats(score_model: ScoreModel, dataset: LabeledDataset,
                     ) -> tuple[float, float]:
    """Mean and population std of the per-example score norm over the dataset."""
    norms = np.linalg.norm(
        score_eval(score_model, dataset.features, dataset.labels), axis=1)
    return float(np.mean(norms)), float(np.std(norms))


def write_report(records: list[MetricsRecord], path) -> None:
    """Report CSV with one row per record; columns follow MetricsRecord order.

    Float cells use repr, so a round-trip parse recovers them exactly.
    """
    names = [f.name for f in fields(MetricsRecord)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for rec in records:
            row = []
            for name in names:
                v = getattr(rec, name)
                row.append(repr(v) if isinstance(v, float) else v)
            writer.writerow(row)


# -- projection and figures ---------------------------------------------------

def pca_project(features, k: int = 2) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project features onto their top-k principal components.

    Components are ordered by decreasing explained variance, with signs fixed
    so each component's largest-magnitude entry is positive. Returns
    (projected, mean, components) with components of shape (k, d).
    """
    x = np.asarray(features, dtype=np.float64)
    mean = x.mean(axis=0)
    centered = x - mean
    cov = (centered.T @ centered) / x.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:k]
    comps = eigvecs[:, order].T
    for i in range(comps.shape[0]):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return centered @ comps.T, mean, comps


_PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]

_SVG_SIZE = 480.0
_SVG_MARGIN = 24.0


def _to_canvas(points: np.ndarray, lo: np.ndarray, scale: float,
               center: np.ndarray) -> np.ndarray:
    span = _SVG_SIZE - 2 * _SVG_MARGIN
    xy = (points - center) * scale + span / 2.0 + _SVG_MARGIN
    xy[:, 1] = _SVG_SIZE - xy[:, 1]  # SVG y axis points down
    return xy


def scatter_svg(data, path) -> None:
    """2-D scatter of a dataset, colored by class.

    For a PoisonedDataset the clean points are drawn as faint circles and
    their poisoned counterparts as crosses. Data with d > 2 is PCA-projected
    to 2-D (the projection is recorded in the SVG metadata block).
    """
    if isinstance(data, PoisonedDataset):
        base, labels = data.base.features, data.base.labels
        overlay = data.poisoned_features
    else:
        base, labels = data.features, data.labels
        overlay = None

    if base.shape[1] == 2:
        meta = {"projection": "identity"}
        proj_base = np.asarray(base, dtype=np.float64)
        proj_overlay = None if overlay is None else np.asarray(overlay, np.float64)
    else:
        _, mean, comps = pca_project(base, k=2)
        meta = {"projection": {"mean": mean.tolist(), "components": comps.tolist()}}
        proj_base = (np.asarray(base, np.float64) - mean) @ comps.T
        proj_overlay = None if overlay is None else \
            (np.asarray(overlay, np.float64) - mean) @ comps.T

    stacked = proj_base if proj_overlay is None else np.vstack([proj_base, proj_overlay])
    lo, hi = stacked.min(axis=0), stacked.max(axis=0)
    extent = float(np.max(hi - lo))
    scale = (_SVG_SIZE - 2 * _SVG_MARGIN) / extent if extent > 0 else 1.0
    center = (lo + hi) / 2.0

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{int(_SVG_SIZE)}" '
        f'height="{int(_SVG_SIZE)}" viewBox="0 0 {int(_SVG_SIZE)} {int(_SVG_SIZE)}">',
        f"<metadata>{json.dumps(meta, sort_keys=True)}</metadata>",
        f'<rect width="{int(_SVG_SIZE)}" height="{int(_SVG_SIZE)}" fill="white"/>',
    ]
    base_xy = _to_canvas(proj_base, lo, scale, center)
    base_opacity = 0.35 if proj_overlay is not None else 0.9
    for (cx, cy), label in zip(base_xy, labels):
        color = _PALETTE[int(label) % len(_PALETTE)]
        lines.append(f'<circle cx="{cx:.3f}" cy="{cy:.3f}" r="2.5" '
                     f'fill="{color}" fill-opacity="{base_opacity}"/>')
    if proj_overlay is not None:
        over_xy = _to_canvas(proj_overlay, lo, scale, center)
        for (cx, cy), label in zip(over_xy, labels):
            color = _PALETTE[int(label) % len(_PALETTE)]
            lines.append(
                f'<path d="M {cx - 3:.3f} {cy - 3:.3f} L {cx + 3:.3f} {cy + 3:.3f} '
                f'M {cx - 3:.3f} {cy + 3:.3f} L {cx + 3:.3f} {cy - 3:.3f}" '
                f'stroke="{color}" stroke-width="1.2"/>')
    lines.append("</svg>")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
