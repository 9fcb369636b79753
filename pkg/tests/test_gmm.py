import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import norm

from biostate import gmm
from biostate.dataset import NormalizedPanel, as_z_space
from biostate.errors import ShapeMismatch, TooFewObservations, ValidationError
from biostate.seedgen import default_spec, generate_seed
from oracles import diag_gauss_mixture_pdf, simpson


def model_1d(weights, means, variances):
    return gmm.GmmModel(np.asarray(weights, float), np.asarray(means, float)[:, None], np.asarray(variances, float)[:, None])


def planted_1d(rng, n, means, sds, weights):
    labels = rng.choice(len(weights), size=n, p=weights)
    return (np.asarray(means)[labels] + np.asarray(sds)[labels] * rng.standard_normal(n))[:, None]


# -- config and ratio -------------------------------------------------------------


@pytest.mark.parametrize(
    "n, b, status",
    [(15, 32, "Insufficient"), (290, 32, "Ok5to1"), (320, 32, "Ok10to1"), (160, 32, "Ok5to1"), (159, 32, "Insufficient")],
)
def test_check_ratio(n, b, status):
    assert gmm.check_ratio(n, b).value == status


@pytest.mark.parametrize("kw", [{"components": 0}, {"reg_covar": -0.1}, {"tol": 0.0}, {"max_iter": 0}, {"n_init": 0}])
def test_config_validation(kw):
    with pytest.raises(ValidationError):
        gmm.GmmConfig(**kw)


def test_defaults():
    c = gmm.GmmConfig()
    assert (c.components, c.reg_covar, c.max_iter, c.tol) == (5, 0.1, 200, 1e-4)


# -- density ---------------------------------------------------------------------


def test_standard_normal_peak():
    m = model_1d([1.0], [0.0], [1.0])
    assert gmm.density(m, np.array([0.0])) == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-12)
    assert gmm.density(m, np.array([0.0])) == pytest.approx(0.39894, abs=1e-5)


@given(st.floats(0.1, 5.0))
def test_symmetric_pair_at_origin(a):
    pair = model_1d([0.5, 0.5], [-a, a], [1.0, 1.0])
    single = model_1d([1.0], [a], [1.0])
    assert gmm.density(pair, np.array([0.0])) == pytest.approx(gmm.density(single, np.array([0.0])), rel=1e-12)


def test_density_matches_explicit_product(rng):
    for _ in range(20):
        m, b = rng.integers(1, 4), rng.integers(1, 5)
        w = rng.dirichlet(np.ones(m))
        mu = rng.normal(size=(m, b))
        var = rng.uniform(0.2, 3, size=(m, b))
        model = gmm.GmmModel(w, mu, var)
        x = rng.normal(size=b)
        assert gmm.density(model, x) == pytest.approx(diag_gauss_mixture_pdf(x, w, mu, var), rel=1e-10)


def test_density_in_high_dimension_does_not_underflow():
    b = 32
    model = gmm.GmmModel(np.array([1.0]), np.zeros((1, b)), np.full((1, b), 0.01))
    x = np.full(b, 3.0)
    logp = gmm.log_density(model, x)[0]
    assert np.isfinite(logp)
    assert logp == pytest.approx(sum(norm.logpdf(3.0, 0, 0.1) for _ in range(b)), rel=1e-12)


def test_density_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        gmm.density(model_1d([1.0], [0.0], [1.0]), np.zeros(2))


def test_quadrature_integrates_to_one(rng):
    for _ in range(5):
        m = rng.integers(1, 4)
        model = model_1d(rng.dirichlet(np.ones(m)), rng.uniform(-5, 5, m), rng.uniform(0.3, 4, m))
        total = simpson(lambda t: gmm.density(model, np.array([t])), -20, 20, 4000)
        assert abs(total - 1) < 1e-3


def test_logsumexp_handles_neg_inf():
    assert gmm.logsumexp(np.array([-np.inf, -np.inf])) == -np.inf
    assert gmm.logsumexp(np.array([1000.0, 1000.0])) == pytest.approx(1000 + math.log(2))


# -- fitting -----------------------------------------------------------------------


def test_single_component_closed_form(rng):
    x = rng.normal(size=(30, 4)) * [1, 2, 3, 4] + [5, 0, -1, 2]
    model = gmm.fit(NormalizedPanel.from_z(x), gmm.GmmConfig(components=1))
    np.testing.assert_allclose(model.weights, [1.0])
    np.testing.assert_allclose(model.means[0], x.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(model.variances[0], x.var(axis=0) + 0.1, atol=1e-12)


def test_two_separated_blobs(rng):
    x = np.concatenate([rng.normal(0, 1, 20), rng.normal(10, 1, 20)])[:, None]
    model = gmm.fit(x, gmm.GmmConfig(components=2, seed=3))
    order = np.argsort(model.means[:, 0])
    np.testing.assert_allclose(model.weights[order], [0.5, 0.5], atol=0.05)
    assert abs(model.means[order[0], 0] - x[:20].mean()) < 0.1
    assert abs(model.means[order[1], 0] - x[20:].mean()) < 0.1


def test_seed_fit_is_nonsingular():
    seed = as_z_space(generate_seed(default_spec(0)).panel)
    with pytest.warns(gmm.RatioWarning):
        model = gmm.fit(seed, gmm.GmmConfig(components=5, reg_covar=0.1))
    assert np.all(model.variances >= 0.1)
    assert np.all(np.isfinite(model.means))
    assert abs(model.weights.sum() - 1) < 1e-9


def test_too_few_observations():
    with pytest.raises(TooFewObservations):
        gmm.fit(np.zeros((3, 2)) + np.arange(3)[:, None], gmm.GmmConfig(components=4))


@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 4))
def test_em_invariants(seed, m, b):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(m, 40))
    x = rng.normal(size=(n, b)) + rng.integers(0, 3, size=(n, 1)) * 4
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", gmm.RatioWarning)
        model = gmm.fit(x, gmm.GmmConfig(components=m, seed=seed, n_init=1))
    f = np.array(model.objective_history)
    assert np.all(np.diff(f) >= -1e-9)
    assert abs(model.weights.sum() - 1) < 1e-9 and np.all(model.weights >= 0)
    assert np.all(model.variances >= 0.1)


def test_plain_loglik_monotone_without_floor(rng):
    for seed in range(10):
        x = rng.normal(size=(60, 2)) + rng.integers(0, 2, size=(60, 1)) * 5
        model = gmm.fit(x, gmm.GmmConfig(components=3, reg_covar=0.0, seed=seed, n_init=1))
        ll = np.array(model.log_likelihood_history)
        assert np.all(np.diff(ll) >= -1e-9)
        assert np.array_equal(ll, np.array(model.objective_history))


def test_planted_recovery_multidimensional(rng):
    means = np.array([[0.0, 0.0, 0.0], [6.0, -6.0, 6.0]])
    labels = rng.choice(2, size=800, p=[0.3, 0.7])
    x = means[labels] + rng.standard_normal((800, 3))
    model = gmm.fit(x, gmm.GmmConfig(components=2, reg_covar=0.0, seed=1))
    order = np.argsort(model.means[:, 0])
    np.testing.assert_allclose(model.means[order], means, atol=0.15)
    np.testing.assert_allclose(model.weights[order], [0.3, 0.7], atol=0.05)


def test_fit_is_deterministic(rng):
    x = rng.normal(size=(50, 3))
    a = gmm.fit(x, gmm.GmmConfig(components=3, seed=9))
    b = gmm.fit(x, gmm.GmmConfig(components=3, seed=9))
    assert a.to_json() == b.to_json()


def test_model_json_round_trip(rng):
    model = gmm.fit(rng.normal(size=(40, 2)), gmm.GmmConfig(components=2))
    d = json.loads(model.to_json({"tool": "x"}))
    assert set(d) >= {"weights", "means", "variances", "config", "final_log_likelihood"}
    again = gmm.GmmModel.from_dict(d)
    assert np.array_equal(again.means, model.means) and again.config == model.config


def test_invalid_model_rejected():
    with pytest.raises(ValidationError):
        model_1d([0.6, 0.6], [0, 1], [1, 1])
    with pytest.raises(ValidationError):
        model_1d([1.0], [0], [0.0])


# -- sampling ------------------------------------------------------------------------


def test_sampling_clt_bound():
    model = gmm.GmmModel(np.array([1.0]), np.array([[1.0, -2.0]]), np.array([[0.1, 0.1]]))
    count = 20000
    rows, labels = gmm.sample(model, count, seed=4)
    assert np.all(labels == 0)
    assert np.all(np.abs(rows.mean(axis=0) - model.means[0]) < 3 * math.sqrt(0.1) / math.sqrt(count))


def test_sampling_single_draw_and_determinism():
    model = model_1d([0.2, 0.8], [0, 5], [1, 1])
    rows, labels = gmm.sample(model, 1, seed=0)
    assert rows.shape == (1, 1) and 0 <= labels[0] < 2
    a, _ = gmm.sample(model, 100, seed=5)
    b, _ = gmm.sample(model, 100, seed=5)
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValidationError):
        gmm.sample(model, 0)


def test_augment_to_290():
    seed = as_z_space(generate_seed(default_spec(0)).panel)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", gmm.RatioWarning)
        model = gmm.fit(seed, gmm.GmmConfig(components=5))
    cohort = gmm.augment(seed, model, 275, seed=0)
    assert cohort.panel.shape == (290, 32)
    assert cohort.provenance.count("seed") == 15 and cohort.provenance.count("synthetic") == 275
    assert cohort.panel.subjects[:15] == seed.subjects
    assert len(set(cohort.panel.subjects)) == 290
    assert all(0 <= c < 5 for c in cohort.component)
