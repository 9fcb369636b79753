"""PCA by eigendecomposition of the sample covariance."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import svg
from .dataset import NormalizedPanel, format_float
from .errors import ROutOfRange, ShapeMismatch


@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # r x b, orthonormal rows
    explained_variance: np.ndarray
    explained_ratio: np.ndarray
    total_variance: float

    @property
    def rank(self) -> int:
        return self.components.shape[0]


def _rows(data) -> np.ndarray:
    if isinstance(data, NormalizedPanel):
        return data.z
    x = np.asarray(data, dtype=float)
    if x.ndim != 2:
        raise ShapeMismatch("expected a 2-D matrix of rows")
    return x


def fit_pca(rows, r: int = 2) -> PcaModel:
    """Top-``r`` principal axes of the mean-centred rows.

    The covariance uses divisor n-1.  Each axis is oriented so that its
    largest-magnitude entry is positive.
    """
    x = _rows(rows)
    n, b = x.shape
    if not 1 <= r <= min(n - 1, b):
        raise ROutOfRange(f"r={r} outside [1, {min(n - 1, b)}]")
    mean = x.mean(axis=0)
    centred = x - mean
    cov = centred.T @ centred / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order].T
    for row in evecs:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    total = float(np.trace(cov))
    ratio = evals[:r] / total if total > 0 else np.zeros(r)
    return PcaModel(mean, evecs[:r].copy(), evals[:r].copy(), ratio, total)


def project(model: PcaModel, rows) -> np.ndarray:
    x = _rows(rows)
    if x.shape[1] != model.mean.shape[0]:
        raise ShapeMismatch(f"rows have {x.shape[1]} columns, model expects {model.mean.shape[0]}")
    return (x - model.mean) @ model.components.T


def back_project(model: PcaModel, scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 2 or scores.shape[1] != model.rank:
        raise ShapeMismatch(f"scores must have {model.rank} columns")
    return scores @ model.components + model.mean


def scores_csv(subjects, scores, clusters, provenance, comment: str | None = None) -> str:
    """``id,pc1,pc2,cluster,provenance`` rows for the first two components."""
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 2 or scores.shape[1] < 2 or not len(subjects) == len(scores) == len(clusters) == len(provenance):
        raise ShapeMismatch("scores, clusters and provenance must align with subjects and have 2 columns")
    buf = io.StringIO()
    for line in (comment or "").splitlines():
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "pc1", "pc2", "cluster", "provenance"])
    for s, row, c, p in zip(subjects, scores, clusters, provenance):
        writer.writerow([s, format_float(row[0]), format_float(row[1]), int(c), p])
    return buf.getvalue()


def render_scatter(
    scores,
    clusters,
    model: PcaModel | None = None,
    cluster_names: Sequence[str] | None = None,
    comment: str | None = None,
    width: float = 640.0,
    height: float = 480.0,
) -> str:
    """PC1/PC2 scatter, one colour per cluster label."""
    scores = np.asarray(scores, dtype=float)
    clusters = np.asarray(clusters, dtype=int)
    if scores.ndim != 2 or scores.shape[1] < 2 or len(clusters) != len(scores):
        raise ShapeMismatch("need an n x 2 score matrix and n cluster labels")
    left, right, top, bottom = 60.0, 170.0, 20.0, 50.0
    plot_w, plot_h = width - left - right, height - top - bottom
    lo, hi = scores[:, :2].min(axis=0), scores[:, :2].max(axis=0)
    pad = np.where(hi > lo, (hi - lo) * 0.05, 1.0)
    lo, hi = lo - pad, hi + pad

    def place(p):
        return (
            left + plot_w * (p[0] - lo[0]) / (hi[0] - lo[0]),
            top + plot_h * (1.0 - (p[1] - lo[1]) / (hi[1] - lo[1])),
        )

    doc = svg.Document(width, height, comment)
    doc.rect(left, top, plot_w, plot_h, "none", stroke="#333333")
    xlabel, ylabel = "PC1", "PC2"
    if model is not None and model.rank >= 2:
        xlabel += f" ({100 * model.explained_ratio[0]:.1f}%)"
        ylabel += f" ({100 * model.explained_ratio[1]:.1f}%)"
    doc.text(left + plot_w / 2, height - 12, xlabel, size=11, anchor="middle")
    doc.text(16, top + plot_h / 2, ylabel, size=11, anchor="middle", rotate=-90)
    for p, c in zip(scores, clusters):
        x, y = place(p)
        doc.circle(x, y, 3.0, svg.PALETTE[c % len(svg.PALETTE)])
    for i, c in enumerate(sorted(set(clusters.tolist()))):
        y = top + 14 + 16 * i
        doc.circle(left + plot_w + 16, y - 4, 4.0, svg.PALETTE[c % len(svg.PALETTE)], opacity=1)
        name = cluster_names[c] if cluster_names is not None else f"Cluster {c}"
        doc.text(left + plot_w + 26, y, name, size=10)
    return doc.render()
