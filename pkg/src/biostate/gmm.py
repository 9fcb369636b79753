"""Diagonal-covariance Gaussian mixtures for synthetic cohort augmentation.

The M-step sets every variance to the responsibility-weighted variance plus
``reg_covar``.  That floor moves the fixed point away from a stationary
point of the plain likelihood, so EM is run on the floor-penalized
objective

    F = mean_i log sum_m w_m N(x_i | mu_m, S_m) exp(-reg_covar/2 * sum_j 1/S_mj)

which is exactly what the floored M-step maximizes.  F is nondecreasing
across iterations; with ``reg_covar = 0`` it is the ordinary log-likelihood.
The plain per-observation log-likelihood is recorded alongside.
"""
from __future__ import annotations

import enum
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .clustering import kmeans_plusplus
from .dataset import NormalizedPanel
from .errors import ShapeMismatch, TooFewObservations, ValidationError

LOG_2PI = math.log(2 * math.pi)


class RatioStatus(str, enum.Enum):
    OK_10_TO_1 = "Ok10to1"
    OK_5_TO_1 = "Ok5to1"
    INSUFFICIENT = "Insufficient"


class RatioWarning(UserWarning):
    """Observation-to-variable ratio below 5:1."""


def check_ratio(n: int, b: int) -> RatioStatus:
    if n < 1 or b < 1:
        raise ValidationError("n and b must be positive")
    if n >= 10 * b:
        return RatioStatus.OK_10_TO_1
    if n >= 5 * b:
        return RatioStatus.OK_5_TO_1
    return RatioStatus.INSUFFICIENT


def ratio_message(n: int, b: int) -> str:
    return (
        f"observation-to-variable ratio {n}/{b} = {n / b:.2f} is below 5:1 "
        "(10:1 ideal); estimates on this panel are unstable"
    )


@dataclass(frozen=True)
class GmmConfig:
    components: int = 5
    reg_covar: float = 0.1
    max_iter: int = 200
    tol: float = 1e-4
    seed: int = 0
    n_init: int = 5

    def __post_init__(self):
        if self.components < 1:
            raise ValidationError("components must be >= 1")
        if not self.reg_covar >= 0:
            raise ValidationError("reg_covar must be >= 0")
        if not self.tol > 0:
            raise ValidationError("tol must be > 0")
        if self.max_iter < 1 or self.n_init < 1:
            raise ValidationError("max_iter and n_init must be >= 1")


@dataclass(frozen=True, eq=False)
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    config: GmmConfig = field(default_factory=GmmConfig)
    final_log_likelihood: float = float("nan")
    n_iter: int = 0
    converged: bool = True
    objective_history: tuple[float, ...] = ()
    log_likelihood_history: tuple[float, ...] = ()

    def __post_init__(self):
        for name in ("weights", "means", "variances"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        m = len(self.weights)
        if self.means.ndim != 2 or self.means.shape[0] != m or self.variances.shape != self.means.shape:
            raise ShapeMismatch("weights, means and variances disagree on shape")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1) > 1e-9:
            raise ValidationError("weights must lie on the simplex")
        if not np.all(self.variances > 0):
            raise ValidationError("variances must be strictly positive")

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def to_dict(self) -> dict:
        return {
            "weights": [float(w) for w in self.weights],
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "config": asdict(self.config),
            "final_log_likelihood": self.final_log_likelihood,
            "n_iter": self.n_iter,
            "converged": self.converged,
        }

    def to_json(self, meta: dict | None = None) -> str:
        d = self.to_dict()
        if meta:
            d["meta"] = meta
        return json.dumps(d, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "GmmModel":
        return cls(
            np.asarray(d["weights"], dtype=float),
            np.asarray(d["means"], dtype=float),
            np.asarray(d["variances"], dtype=float),
            GmmConfig(**d.get("config", {})),
            float(d.get("final_log_likelihood", float("nan"))),
            int(d.get("n_iter", 0)),
            bool(d.get("converged", True)),
        )


def logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    top = np.max(a, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - top), axis=axis, keepdims=True)) + top
    return np.squeeze(out, axis=axis)


def _component_log_pdf(x: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """n x M matrix of log N(x_i | mu_m, diag var_m)."""
    out = np.empty((x.shape[0], means.shape[0]))
    for m in range(means.shape[0]):
        var = variances[m]
        out[:, m] = -0.5 * (np.sum(LOG_2PI + np.log(var)) + np.sum((x - means[m]) ** 2 / var, axis=1))
    return out


def _log_weights(weights: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(weights)


def _as_rows(model: GmmModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ShapeMismatch(f"expected vectors of length {model.dim}, got shape {x.shape}")
    return x


def log_density(model: GmmModel, x) -> np.ndarray:
    """log p(x) for each row of ``x``."""
    x = _as_rows(model, x)
    return logsumexp(_component_log_pdf(x, model.means, model.variances) + _log_weights(model.weights), axis=1)


def density(model: GmmModel, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ShapeMismatch("density takes a single vector; use log_density for batches")
    return float(np.exp(log_density(model, x)[0]))


def responsibilities(model: GmmModel, x) -> np.ndarray:
    x = _as_rows(model, x)
    logp = _component_log_pdf(x, model.means, model.variances) + _log_weights(model.weights)
    return np.exp(logp - logsumexp(logp, axis=1)[:, None])


def predict(model: GmmModel, x) -> np.ndarray:
    return np.argmax(responsibilities(model, x), axis=1)


def _m_step(x: np.ndarray, resp: np.ndarray, reg: float):
    nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
    weights = nk / nk.sum()
    means = (resp.T @ x) / nk[:, None]
    variances = np.empty_like(means)
    for m in range(len(nk)):
        variances[m] = (resp[:, m] @ (x - means[m]) ** 2) / nk[m] + reg
    return weights, means, variances


def _e_step(x, weights, means, variances, reg):
    plain = _component_log_pdf(x, means, variances) + _log_weights(weights)
    penalized = plain - 0.5 * reg * np.sum(1.0 / variances, axis=1)
    norm = logsumexp(penalized, axis=1)
    resp = np.exp(penalized - norm[:, None])
    return float(np.mean(norm)), float(np.mean(logsumexp(plain, axis=1))), resp


def _run_em(x: np.ndarray, config: GmmConfig, rng: np.random.Generator) -> GmmModel:
    n = x.shape[0]
    m_count = config.components
    reg = config.reg_covar
    centers = kmeans_plusplus(x, m_count, rng)
    d2 = np.stack([np.sum((x - c) ** 2, axis=1) for c in centers], axis=1)
    resp = np.zeros((n, m_count))
    resp[np.arange(n), np.argmin(d2, axis=1)] = 1.0
    params = _m_step(x, resp, reg)

    objective, loglik = [], []
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        obj, ll, resp = _e_step(x, *params, reg)
        objective.append(obj)
        loglik.append(ll)
        if len(objective) > 1 and obj - objective[-2] < config.tol:
            converged = True
            break
        params = _m_step(x, resp, reg)
    if not converged:
        obj, ll, _ = _e_step(x, *params, reg)
        objective.append(obj)
        loglik.append(ll)
    weights, means, variances = params
    return GmmModel(
        weights, means, variances, config, loglik[-1], it, converged, tuple(objective), tuple(loglik)
    )


def fit(panel, config: GmmConfig | None = None) -> GmmModel:
    """Fit a diagonal GMM by EM from k-means++-seeded means.

    With ``config.n_init > 1`` EM is restarted from independent seedings and
    the run with the highest final objective is kept.  A :class:`RatioWarning`
    is issued when the panel has fewer than five observations per variable.
    """
    config = config or GmmConfig()
    x = panel.z if isinstance(panel, NormalizedPanel) else np.asarray(panel, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, b = x.shape
    if b < 1:
        raise ShapeMismatch("need at least one variable")
    if n < config.components:
        raise TooFewObservations(f"{n} observations cannot support {config.components} components")
    if check_ratio(n, b) is RatioStatus.INSUFFICIENT:
        warnings.warn(ratio_message(n, b), RatioWarning, stacklevel=2)
    best = None
    for restart in range(config.n_init):
        rng = np.random.default_rng([config.seed, restart])
        model = _run_em(x, config, rng)
        if best is None or model.objective_history[-1] > best.objective_history[-1]:
            best = model
    return best


def sample(model: GmmModel, count: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``count`` rows; returns ``(rows, component_labels)``."""
    if count < 1:
        raise ValidationError("count must be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.choice(model.n_components, size=count, p=model.weights)
    noise = rng.standard_normal((count, model.dim))
    rows = model.means[labels] + noise * np.sqrt(model.variances[labels])
    return rows, labels


@dataclass(frozen=True)
class AugmentedCohort:
    panel: NormalizedPanel
    provenance: tuple[str, ...]
    component: tuple[int, ...]


def augment(seed_panel: NormalizedPanel, model: GmmModel, count: int, seed: int = 0) -> AugmentedCohort:
    """Append ``count`` GMM draws to the seed rows.

    Seed rows are tagged with their most probable component.
    """
    rows, labels = sample(model, count, seed)
    taken = set(seed_panel.subjects)
    width = max(4, len(str(count)))
    prefix = "syn"
    while any(f"{prefix}{i:0{width}d}" in taken for i in range(1, count + 1)):
        prefix = "x" + prefix
    synth_ids = [f"{prefix}{i:0{width}d}" for i in range(1, count + 1)]
    panel = NormalizedPanel(
        seed_panel.subjects + tuple(synth_ids),
        seed_panel.schema,
        np.vstack([seed_panel.z, rows]),
        seed_panel.params,
    )
    provenance = ("seed",) * len(seed_panel.subjects) + ("synthetic",) * count
    component = tuple(int(c) for c in predict(model, seed_panel.z)) + tuple(int(c) for c in labels)
    return AugmentedCohort(panel, provenance, component)
