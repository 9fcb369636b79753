"""Multivariate safety screening in z-space.

Subjects lying farther than ``threshold`` (Euclidean) from the global
centroid are flagged and removed before clustering.  The centroid is taken
over *all* subjects, outliers included, and z-scores are not refit after
exclusion.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .dataset import NormalizedPanel
from .errors import ShapeMismatch, StaleReport, ValidationError

DEFAULT_THRESHOLD = 25.0


def euclidean_distance(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeMismatch(f"cannot compare vectors of shape {x.shape} and {y.shape}")
    return math.sqrt(float(np.sum((x - y) ** 2)))


@dataclass(frozen=True)
class ScreeningReport:
    threshold: float
    subjects: tuple[str, ...]
    distances: tuple[float, ...]
    flagged: tuple[str, ...]
    retained: tuple[str, ...]

    def distance_of(self, subject: str) -> float:
        return self.distances[self.subjects.index(subject)]

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "distances": {s: d for s, d in zip(self.subjects, self.distances)},
            "flagged": list(self.flagged),
            "retained": list(self.retained),
        }

    def to_json(self, meta: dict | None = None) -> str:
        d = self.to_dict()
        if meta:
            d["meta"] = meta
        return json.dumps(d, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ScreeningReport":
        subjects = tuple(d["distances"].keys())
        return cls(
            float(d["threshold"]),
            subjects,
            tuple(float(v) for v in d["distances"].values()),
            tuple(d["flagged"]),
            tuple(d["retained"]),
        )


def screen(panel: NormalizedPanel, threshold: float = DEFAULT_THRESHOLD) -> ScreeningReport:
    if not (threshold > 0 and math.isfinite(threshold)):
        raise ValidationError(f"threshold must be a positive finite number, got {threshold}")
    centroid = panel.z.mean(axis=0)
    distances = tuple(euclidean_distance(row, centroid) for row in panel.z)
    flagged = tuple(s for s, d in zip(panel.subjects, distances) if d > threshold)
    retained = tuple(s for s, d in zip(panel.subjects, distances) if not d > threshold)
    return ScreeningReport(float(threshold), panel.subjects, distances, flagged, retained)


def exclude(panel: NormalizedPanel, report: ScreeningReport) -> NormalizedPanel:
    """Restrict ``panel`` to the subjects the report retained.

    Raises EmptyPanel (via the panel constructor) when fewer than two
    subjects survive.
    """
    if tuple(report.subjects) != tuple(panel.subjects):
        raise StaleReport("screening report was produced for a different set of subjects")
    return panel.subset(report.retained)
