"""Ward agglomerative clustering, K-Means baseline, and model selection."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from . import svg
from .dataset import NormalizedPanel
from .errors import KOutOfRange, MalformedCsv, ShapeMismatch, SingleCluster, ValidationError


class Method(str, enum.Enum):
    WARD = "ward"
    KMEANS = "kmeans"

    @classmethod
    def parse(cls, value) -> "Method":
        if isinstance(value, Method):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValidationError(f"unknown clustering method {value!r} (expected ward or kmeans)") from None


def _matrix(data) -> np.ndarray:
    if isinstance(data, NormalizedPanel):
        return data.z
    x = np.asarray(data, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return x


def _subjects(data, n: int) -> tuple[str, ...]:
    if isinstance(data, NormalizedPanel):
        return data.subjects
    return tuple(f"s{i:03d}" for i in range(n))


# --------------------------------------------------------------------------
# Linkage tree


@dataclass(frozen=True)
class Merge:
    left: int
    right: int
    height: float
    size: int


@dataclass(frozen=True)
class LinkageTree:
    merges: tuple[Merge, ...]
    leaf_count: int
    leaf_labels: tuple[str, ...] = ()

    def __post_init__(self):
        n = self.leaf_count
        if len(self.merges) != n - 1:
            raise ValidationError(f"a tree over {n} leaves needs {n - 1} merges, got {len(self.merges)}")
        sizes = [1] * n
        used = set()
        for step, m in enumerate(self.merges):
            for child in (m.left, m.right):
                if child >= n + step or child in used:
                    raise ValidationError(f"merge {step} references invalid or reused node {child}")
                used.add(child)
            if m.size != sizes[m.left] + sizes[m.right]:
                raise ValidationError(f"merge {step} size {m.size} != sum of child sizes")
            sizes.append(m.size)

    @property
    def heights(self) -> np.ndarray:
        return np.array([m.height for m in self.merges])

    def as_array(self) -> np.ndarray:
        """(n-1) x 4 array in the conventional linkage-matrix layout."""
        return np.array([[m.left, m.right, m.height, m.size] for m in self.merges], dtype=float)

    def to_text(self, comment: str | None = None) -> str:
        lines = [f"# {c}" for c in (comment or "").splitlines()]
        lines += [f"{m.left} {m.right} {m.height!r} {m.size}" for m in self.merges]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, leaf_labels: Sequence[str] = ()) -> "LinkageTree":
        merges = []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise MalformedCsv(f"merge line must have 4 fields: {line!r}")
            merges.append(Merge(int(parts[0]), int(parts[1]), float(parts[2]), int(parts[3])))
        return cls(tuple(merges), len(merges) + 1, tuple(leaf_labels))

    def leaf_order(self) -> list[int]:
        """Left-to-right leaf order of the drawn dendrogram."""
        n = self.leaf_count
        if n == 1:
            return [0]
        order: list[int] = []
        stack = [2 * n - 2]
        while stack:
            node = stack.pop()
            if node < n:
                order.append(node)
            else:
                m = self.merges[node - n]
                stack.append(m.right)
                stack.append(m.left)
        return order


def ward_linkage(panel) -> LinkageTree:
    """Ward agglomeration via the Lance-Williams recurrence.

    Works on squared Ward distances ``d2 = 2 * delta`` where
    ``delta = |A||B| / (|A| + |B|) * ||c_A - c_B||^2``; the recorded height is
    ``sqrt(d2)``, which for two singletons is their Euclidean distance.  Ties
    on the merge cost go to the lexicographically smallest node-id pair.
    """
    x = _matrix(panel)
    n = x.shape[0]
    if n < 2:
        raise ValidationError("ward_linkage needs at least 2 observations")
    d2 = np.empty((n, n))
    for i in range(n):
        d2[i] = np.sum((x - x[i]) ** 2, axis=1)
    np.fill_diagonal(d2, np.inf)

    node_id = np.arange(n)
    size = np.ones(n)
    active = np.ones(n, dtype=bool)
    merges = []
    for step in range(n - 1):
        best = d2.min()
        ii, jj = np.nonzero(d2 == best)
        lo = np.minimum(node_id[ii], node_id[jj])
        hi = np.maximum(node_id[ii], node_id[jj])
        pick = np.lexsort((hi, lo))[0]
        i, j = ii[pick], jj[pick]
        if node_id[i] > node_id[j]:
            i, j = j, i
        ni, nj = size[i], size[j]
        merges.append(Merge(int(node_id[i]), int(node_id[j]), math.sqrt(best), int(ni + nj)))

        others = active.copy()
        others[[i, j]] = False
        nk = size[others]
        updated = ((ni + nk) * d2[i, others] + (nj + nk) * d2[j, others] - nk * best) / (ni + nj + nk)
        updated = np.maximum(updated, 0.0)
        # the merged cluster takes slot i, slot j is retired
        d2[i, others] = updated
        d2[others, i] = updated
        d2[j, :] = np.inf
        d2[:, j] = np.inf
        active[j] = False
        size[i] = ni + nj
        node_id[i] = n + step
    return LinkageTree(tuple(merges), n, _subjects(panel, n))


def canonical_labels(labels) -> np.ndarray:
    """Relabel so clusters are numbered by first appearance."""
    labels = np.asarray(labels)
    mapping: dict = {}
    out = np.empty(len(labels), dtype=int)
    for i, lab in enumerate(labels.tolist()):
        out[i] = mapping.setdefault(lab, len(mapping))
    return out


def tree_labels(tree: LinkageTree, k: int) -> np.ndarray:
    n = tree.leaf_count
    if not 1 <= k <= n:
        raise KOutOfRange(f"k={k} outside [1, {n}]")
    parent = list(range(2 * n - 1))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for step, m in enumerate(tree.merges[: n - k]):
        parent[find(m.left)] = n + step
        parent[find(m.right)] = n + step
    return canonical_labels([find(i) for i in range(n)])


# --------------------------------------------------------------------------
# Flat cluster models


@dataclass(frozen=True, eq=False)
class ClusterModel:
    k: int
    assignments: np.ndarray
    centroids: np.ndarray
    silhouette: float | None
    method: Method
    seed: int | None = None
    subjects: tuple[str, ...] = ()

    def __post_init__(self):
        a = np.array(self.assignments, dtype=int)
        c = np.array(self.centroids, dtype=float)
        a.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "assignments", a)
        object.__setattr__(self, "centroids", c)
        object.__setattr__(self, "method", Method.parse(self.method))
        object.__setattr__(self, "subjects", tuple(self.subjects))
        if set(np.unique(a).tolist()) != set(range(self.k)):
            raise ValidationError(f"labels must cover 0..{self.k - 1} with no empty cluster")

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "method": self.method.value,
            "seed": self.seed,
            "silhouette": self.silhouette,
            "subjects": list(self.subjects),
            "assignments": [int(v) for v in self.assignments],
            "centroids": [[float(v) for v in row] for row in self.centroids],
        }

    def to_json(self, meta: dict | None = None) -> str:
        d = self.to_dict()
        if meta:
            d["meta"] = meta
        return json.dumps(d, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterModel":
        return cls(
            int(d["k"]),
            np.asarray(d["assignments"], dtype=int),
            np.asarray(d["centroids"], dtype=float),
            d.get("silhouette"),
            d["method"],
            d.get("seed"),
            tuple(d.get("subjects", ())),
        )


def cluster_means(x: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((k, x.shape[1]))
    for r in range(k):
        out[r] = x[labels == r].mean(axis=0)
    return out


def model_from_labels(panel, labels, method=Method.WARD, seed=None) -> ClusterModel:
    """Build a ClusterModel (centroids and silhouette) from a labeling."""
    x = _matrix(panel)
    labels = canonical_labels(labels)
    k = int(labels.max()) + 1
    sil = silhouette_score(x, labels) if k >= 2 else None
    return ClusterModel(k, labels, cluster_means(x, labels, k), sil, method, seed, _subjects(panel, len(x)))


def cut_tree(tree: LinkageTree, k: int, panel) -> ClusterModel:
    """Flat clustering with k clusters: undo the last k-1 merges."""
    x = _matrix(panel)
    n = tree.leaf_count
    if x.shape[0] != n:
        raise ShapeMismatch(f"tree has {n} leaves but panel has {x.shape[0]} rows")
    if not 2 <= k <= n:
        raise KOutOfRange(f"k={k} outside [2, {n}]")
    return model_from_labels(panel, tree_labels(tree, k), Method.WARD)


# --------------------------------------------------------------------------
# K-Means


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return np.stack([np.sum((x - c) ** 2, axis=1) for c in centers], axis=1)


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding (D^2 sampling)."""
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    closest = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            idx = int(rng.integers(n))
        centers.append(x[idx])
        closest = np.minimum(closest, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


@dataclass
class LloydResult:
    labels: np.ndarray
    centroids: np.ndarray
    wcss_history: list[float] = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False
    repairs: int = 0


def _repair_empty(x, labels, d2, k) -> tuple[np.ndarray, int]:
    labels = labels.copy()
    counts = np.bincount(labels, minlength=k)
    repairs = 0
    for r in np.flatnonzero(counts == 0):
        own = d2[np.arange(len(labels)), labels]
        donors = counts[labels] > 1
        own = np.where(donors, own, -np.inf)
        i = int(np.argmax(own))
        counts[labels[i]] -= 1
        labels[i] = r
        counts[r] = 1
        repairs += 1
    return labels, repairs


def lloyd(x, k: int, seed: int, max_iter: int = 300, tol: float = 1e-6) -> LloydResult:
    """Lloyd iterations from a seeded k-means++ start.

    Records the within-cluster sum of squares after every update step.
    Empty clusters are repaired by moving in the point farthest from its
    current centroid (taken only from clusters with more than one member).
    """
    x = _matrix(x)
    n = x.shape[0]
    if not 2 <= k <= n:
        raise KOutOfRange(f"k={k} outside [2, {n}]")
    rng = np.random.default_rng(seed)
    centers = kmeans_plusplus(x, k, rng)
    result = LloydResult(np.zeros(n, dtype=int), centers)
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(x, centers)
        labels = np.argmin(d2, axis=1)
        labels, repaired = _repair_empty(x, labels, d2, k)
        result.repairs += repaired
        new_centers = cluster_means(x, labels, k)
        result.wcss_history.append(float(np.sum((x - new_centers[labels]) ** 2)))
        shift = float(np.max(np.sqrt(np.sum((new_centers - centers) ** 2, axis=1))))
        centers = new_centers
        result.labels = labels
        result.n_iter = it
        if shift < tol:
            result.converged = True
            break
    result.centroids = centers
    return result


def kmeans(panel, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-6) -> ClusterModel:
    res = lloyd(panel, k, seed, max_iter, tol)
    return model_from_labels(panel, res.labels, Method.KMEANS, seed)


# --------------------------------------------------------------------------
# Validation indices


def pairwise_distances(x: np.ndarray) -> np.ndarray:
    x = _matrix(x)
    out = np.empty((len(x), len(x)))
    for i in range(len(x)):
        out[i] = np.sqrt(np.sum((x - x[i]) ** 2, axis=1))
    return out


def silhouette_samples(panel, labels) -> np.ndarray:
    x = _matrix(panel)
    labels = np.asarray(labels)
    if labels.shape != (x.shape[0],):
        raise ShapeMismatch("one label per subject required")
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise SingleCluster("silhouette needs at least two clusters")
    dist = pairwise_distances(x)
    members = [labels == u for u in uniq]
    sizes = np.array([m.sum() for m in members])
    # mean distance from every point to every cluster
    sums = np.stack([dist[:, m].sum(axis=1) for m in members], axis=1)
    own = np.searchsorted(uniq, labels)
    s = np.zeros(len(x))
    for i in range(len(x)):
        c = own[i]
        if sizes[c] == 1:
            continue
        a = sums[i, c] / (sizes[c] - 1)
        b = min(sums[i, r] / sizes[r] for r in range(len(uniq)) if r != c)
        denom = max(a, b)
        s[i] = 0.0 if denom == 0 else (b - a) / denom
    return s


def silhouette_score(panel, labels) -> float:
    return float(np.mean(silhouette_samples(panel, labels)))


def adjusted_rand_index(a, b) -> float:
    a = canonical_labels(a)
    b = canonical_labels(b)
    if a.shape != b.shape:
        raise ShapeMismatch("labelings must have equal length")
    n = len(a)
    table = np.zeros((a.max() + 1, b.max() + 1), dtype=np.int64)
    np.add.at(table, (a, b), 1)

    def pairs(v):
        return sum(int(c) * (int(c) - 1) // 2 for c in np.ravel(v))

    index = pairs(table)
    sum_a = pairs(table.sum(axis=1))
    sum_b = pairs(table.sum(axis=0))
    total = n * (n - 1) // 2
    expected = sum_a * sum_b / total if total else 0.0
    max_index = (sum_a + sum_b) / 2
    if max_index == expected:
        # both partitions are trivial in the same way (all singletons or one block)
        return 1.0
    return (index - expected) / (max_index - expected)


# --------------------------------------------------------------------------
# Model selection and stability


def fit_model(panel, k: int, method=Method.WARD, seed: int = 0, tree: LinkageTree | None = None) -> ClusterModel:
    method = Method.parse(method)
    if method is Method.WARD:
        return cut_tree(tree or ward_linkage(panel), k, panel)
    return kmeans(panel, k, seed)


def select_k(panel, k_range=(2, 8), method=Method.WARD, seed: int = 0) -> list[tuple[int, float]]:
    """Silhouette for every k in the inclusive range, best first.

    Ties go to the smaller k.
    """
    method = Method.parse(method)
    lo, hi = k_range
    n = _matrix(panel).shape[0]
    if not 2 <= lo <= hi <= n:
        raise KOutOfRange(f"k range [{lo}, {hi}] not within [2, {n}]")
    tree = ward_linkage(panel) if method is Method.WARD else None
    scores = [(k, fit_model(panel, k, method, seed, tree).silhouette) for k in range(lo, hi + 1)]
    return sorted(scores, key=lambda ks: (-ks[1], ks[0]))


@dataclass(frozen=True)
class StabilityReport:
    runs: int
    mean_ari: float
    per_run_silhouette: tuple[float, ...]
    method: Method = Method.WARD
    k: int = 0
    seeds: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {
            "runs": self.runs,
            "k": self.k,
            "method": self.method.value,
            "seeds": list(self.seeds),
            "mean_ari": self.mean_ari,
            "per_run_silhouette": list(self.per_run_silhouette),
        }

    def to_json(self, meta: dict | None = None) -> str:
        d = self.to_dict()
        if meta:
            d["meta"] = meta
        return json.dumps(d, indent=2) + "\n"


def stability(panel, k: int, method=Method.WARD, runs: int = 10) -> StabilityReport:
    """Repeat a configuration with seeds 0..runs-1 and compare labelings.

    Ward ignores the seed; it is re-run anyway so a loss of determinism
    shows up as mean ARI < 1.
    """
    method = Method.parse(method)
    if runs < 2:
        raise ValidationError("stability needs at least 2 runs")
    models = []
    for seed in range(runs):
        if method is Method.WARD:
            models.append(cut_tree(ward_linkage(panel), k, panel))
        else:
            models.append(kmeans(panel, k, seed))
    aris = [adjusted_rand_index(a.assignments, b.assignments) for a, b in combinations(models, 2)]
    return StabilityReport(
        runs,
        float(np.mean(aris)),
        tuple(float(m.silhouette) for m in models),
        method,
        k,
        tuple(range(runs)),
    )


def render_dendrogram(tree: LinkageTree, comment: str | None = None, width: float = 720.0, height: float = 420.0) -> str:
    """Vertical dendrogram: leaves along the bottom, merge height on the y axis."""
    n = tree.leaf_count
    left, right, top, bottom = 60.0, 20.0, 20.0, 70.0
    plot_w, plot_h = width - left - right, height - top - bottom
    order = tree.leaf_order()
    step = plot_w / max(n, 1)
    xpos = {leaf: left + step * (i + 0.5) for i, leaf in enumerate(order)}
    hmax = max(float(tree.heights.max()) if n > 1 else 0.0, 1e-12)

    def y_of(h: float) -> float:
        return top + plot_h * (1.0 - h / hmax)

    doc = svg.Document(width, height, comment)
    base = y_of(0.0)
    doc.line(left, top, left, base)
    for t in range(5):
        h = hmax * t / 4
        doc.line(left - 4, y_of(h), left, y_of(h))
        doc.text(left - 6, y_of(h) + 3, f"{h:.2f}", size=9, anchor="end")
    doc.text(14, top + plot_h / 2, "height", size=10, anchor="middle", rotate=-90)
    ypos = {leaf: base for leaf in range(n)}
    for step_i, m in enumerate(tree.merges):
        node = n + step_i
        y = y_of(m.height)
        x1, x2 = xpos[m.left], xpos[m.right]
        doc.line(x1, ypos[m.left], x1, y)
        doc.line(x2, ypos[m.right], x2, y)
        doc.line(x1, y, x2, y)
        xpos[node], ypos[node] = (x1 + x2) / 2, y
    labels = tree.leaf_labels or tuple(str(i) for i in range(n))
    size = 9 if n <= 60 else 6
    for leaf in order:
        doc.text(xpos[leaf], base + 10, labels[leaf], size=size, anchor="end", rotate=-90)
    return doc.render()
