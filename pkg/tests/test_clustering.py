import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.cluster.hierarchy import linkage as scipy_linkage
from scipy.stats import ortho_group
from sklearn.metrics import adjusted_rand_score, silhouette_score as sk_silhouette

from biostate.clustering import (
    ClusterModel,
    LinkageTree,
    Method,
    adjusted_rand_index,
    cut_tree,
    kmeans,
    lloyd,
    render_dendrogram,
    select_k,
    silhouette_score,
    stability,
    tree_labels,
    ward_linkage,
)
from biostate.dataset import NormalizedPanel
from biostate.errors import KOutOfRange, SingleCluster, ValidationError
from oracles import best_two_partition, brute_silhouette, naive_ward, pair_count_ari

small_panels = arrays(
    np.float64,
    st.tuples(st.integers(2, 8), st.integers(1, 4)),
    elements=st.floats(-10, 10, allow_subnormal=False),
)


def blobs(rng, centers, per, sd=1.0):
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    return np.vstack([c + sd * rng.standard_normal((per, centers.shape[1])) for c in centers])


# -- Ward ----------------------------------------------------------------------


def test_first_merge_example():
    tree = ward_linkage(np.array([0.0, 1.0, 10.0]))
    first = tree.merges[0]
    assert (first.left, first.right) == (0, 1)
    assert first.height == pytest.approx(np.sqrt(2 * 0.5))


def test_identical_points_merge_at_zero():
    tree = ward_linkage(np.array([[2.0, 3.0], [2.0, 3.0]]))
    assert len(tree.merges) == 1 and tree.merges[0].height == 0.0 and tree.merges[0].size == 2


@given(small_panels)
def test_ward_matches_naive_oracle(x):
    got = ward_linkage(x).merges
    want = naive_ward(x)
    for m, (a, b, h, s) in zip(got, want):
        assert (m.left, m.right, m.size) == (a, b, s)
        assert abs(m.height - h) < 1e-9


def test_ward_matches_scipy(rng):
    for _ in range(30):
        x = rng.normal(size=(rng.integers(2, 30), rng.integers(1, 6)))
        ours = ward_linkage(x).as_array()
        theirs = scipy_linkage(x, method="ward")
        np.testing.assert_allclose(ours[:, 2], theirs[:, 2], atol=1e-9)
        np.testing.assert_array_equal(ours[:, 3], theirs[:, 3])


@given(arrays(np.float64, st.tuples(st.integers(2, 25), st.integers(1, 4)), elements=st.floats(-10, 10, allow_subnormal=False)))
def test_tree_invariants(x):
    tree = ward_linkage(x)
    n = len(x)
    assert len(tree.merges) == n - 1
    assert np.all(np.diff(tree.heights) >= -1e-9)
    children = [c for m in tree.merges for c in (m.left, m.right)]
    assert sorted(children) == list(range(2 * n - 2))
    assert tree.merges[-1].size == n


def test_ties_go_to_smallest_pair():
    # 0-1, 2-3 and 1-2 are all at distance 1: (0,1) must win, then (2,3)
    tree = ward_linkage(np.array([0.0, 1.0, 2.0, 3.0]))
    assert [(m.left, m.right) for m in tree.merges[:2]] == [(0, 1), (2, 3)]


@given(arrays(np.float64, st.tuples(st.integers(3, 12), st.integers(1, 3)), elements=st.floats(-10, 10, allow_subnormal=False)), st.randoms())
def test_cut_invariant_under_subject_reordering(x, random):
    # exact ties make the merge order depend on ids, so use distinct points
    if len({tuple(r) for r in np.round(x, 6)}) < len(x):
        return
    perm = list(range(len(x)))
    random.shuffle(perm)
    t1, t2 = ward_linkage(x), ward_linkage(x[perm])
    d = np.sort(np.abs(np.diff(np.sort(t1.heights))))
    if len(d) and d[0] < 1e-7:
        return  # near-tied costs can legitimately swap
    for k in range(1, len(x) + 1):
        a = tree_labels(t1, k)
        b = tree_labels(t2, k)
        assert adjusted_rand_index(a[perm], b) == 1.0


def test_cut_examples():
    x = np.array([0.0, 1.0, 10.0, 11.0])
    tree = ward_linkage(x)
    m2 = cut_tree(tree, 2, x)
    assert m2.assignments.tolist() == [0, 0, 1, 1]
    np.testing.assert_allclose(m2.centroids[:, 0], [0.5, 10.5])
    assert best_two_partition(x)[1].tolist() in ([0, 0, 1, 1], [1, 1, 0, 0])
    full = cut_tree(tree, 4, x)
    assert sorted(full.assignments.tolist()) == [0, 1, 2, 3]
    with pytest.raises(KOutOfRange):
        cut_tree(tree, 1, x)
    with pytest.raises(KOutOfRange):
        cut_tree(tree, 5, x)


@given(arrays(np.float64, st.tuples(st.integers(2, 15), st.integers(1, 3)), elements=st.floats(-10, 10, allow_subnormal=False)), st.data())
def test_cut_is_a_partition_with_exact_centroids(x, data):
    k = data.draw(st.integers(2, len(x)))
    model = cut_tree(ward_linkage(x), k, x)
    assert sorted(set(model.assignments.tolist())) == list(range(k))
    for r in range(k):
        np.testing.assert_allclose(model.centroids[r], x[model.assignments == r].mean(axis=0), atol=1e-9)


def test_linkage_text_round_trip(rng):
    tree = ward_linkage(rng.normal(size=(9, 2)))
    text = tree.to_text("biostate test")
    assert text.startswith("# biostate test\n")
    again = LinkageTree.from_text(text)
    assert again.merges == tree.merges


def test_invalid_tree_rejected():
    from biostate.clustering import Merge

    with pytest.raises(ValidationError):
        LinkageTree((Merge(0, 0, 1.0, 2),), 2)
    with pytest.raises(ValidationError):
        LinkageTree((Merge(0, 1, 1.0, 3),), 2)


def test_dendrogram_svg_is_deterministic(rng):
    tree = ward_linkage(NormalizedPanel.from_z(rng.normal(size=(7, 2))))
    a = render_dendrogram(tree, comment="c")
    assert a == render_dendrogram(tree, comment="c")
    assert a.startswith("<?xml") and "<!-- c -->" in a
    assert a.count("<line") >= 3 * 6
    assert "s006" in a


# -- K-Means -------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(6))
def test_kmeans_two_groups(seed):
    x = np.array([0.0, 1.0, 10.0, 11.0])
    model = kmeans(x, 2, seed)
    np.testing.assert_allclose(sorted(model.centroids[:, 0]), [0.5, 10.5])
    wcss, labels = best_two_partition(x)
    assert adjusted_rand_index(labels, model.assignments) == 1.0


def test_kmeans_k_range():
    with pytest.raises(KOutOfRange):
        kmeans(np.arange(5.0), 1)
    with pytest.raises(KOutOfRange):
        kmeans(np.arange(5.0), 6)


def test_duplicate_points_trigger_repair():
    x = np.zeros((6, 2))
    res = lloyd(x, 2, seed=0)
    assert res.repairs >= 1
    assert sorted(set(res.labels.tolist())) == [0, 1]
    model = kmeans(x, 3, seed=1)
    assert model.k == 3


@given(
    arrays(np.float64, st.tuples(st.integers(3, 25), st.integers(1, 4)), elements=st.floats(-10, 10, allow_subnormal=False)),
    st.data(),
)
def test_wcss_nonincreasing(x, data):
    k = data.draw(st.integers(2, len(x)))
    res = lloyd(x, k, data.draw(st.integers(0, 1000)))
    h = np.array(res.wcss_history)
    assert np.all(np.diff(h) <= 1e-9 * (1 + h[0]))


def test_kmeans_deterministic_given_seed(rng):
    x = rng.normal(size=(40, 3))
    a, b = kmeans(x, 4, 7), kmeans(x, 4, 7)
    assert np.array_equal(a.assignments, b.assignments) and np.array_equal(a.centroids, b.centroids)


# -- silhouette ------------------------------------------------------------------


def test_silhouette_hand_value():
    x = np.array([0.0, 1.0, 10.0, 11.0])
    score = silhouette_score(x, [0, 0, 1, 1])
    # a_i = 1, b_i in {10.5, 9.5, 9.5, 10.5}
    want = np.mean([1 - 1 / 10.5, 1 - 1 / 9.5, 1 - 1 / 9.5, 1 - 1 / 10.5])
    assert score == pytest.approx(want, abs=1e-12)
    assert round(score, 4) == 0.8997


def test_silhouette_interleaved_identical_points():
    x = np.zeros((6, 2))
    assert silhouette_score(x, [0, 1, 0, 1, 0, 1]) <= 0


def test_silhouette_single_cluster_rejected():
    with pytest.raises(SingleCluster):
        silhouette_score(np.arange(4.0), [0, 0, 0, 0])


@given(
    arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(1, 3)), elements=st.floats(-10, 10, allow_subnormal=False)),
    st.data(),
)
def test_silhouette_matches_oracle(x, data):
    labels = data.draw(st.lists(st.integers(0, 3), min_size=len(x), max_size=len(x)))
    if len(set(labels)) < 2:
        return
    assert abs(silhouette_score(x, labels) - brute_silhouette(x, labels)) < 1e-9


def test_silhouette_matches_sklearn(rng):
    for _ in range(10):
        x = rng.normal(size=(30, 3))
        labels = rng.integers(0, 4, 30)
        assert silhouette_score(x, labels) == pytest.approx(sk_silhouette(x, labels), abs=1e-9)


def test_silhouette_relabel_and_rotation_invariant(rng):
    x = rng.normal(size=(20, 4))
    labels = rng.integers(0, 3, 20)
    base = silhouette_score(x, labels)
    assert silhouette_score(x, (labels + 1) % 3) == pytest.approx(base, abs=1e-12)
    q = ortho_group.rvs(4, random_state=3)
    assert silhouette_score(x @ q, labels) == pytest.approx(base, abs=1e-9)


# -- ARI, selection, stability -------------------------------------------------


@given(st.integers(2, 20).flatmap(lambda n: st.tuples(st.lists(st.integers(0, 4), min_size=n, max_size=n), st.lists(st.integers(0, 4), min_size=n, max_size=n))))
def test_ari_matches_pair_count_oracle(ab):
    a, b = ab
    got = adjusted_rand_index(a, b)
    assert got == pytest.approx(pair_count_ari(a, b), abs=1e-12)
    assert -1 <= got <= 1
    if len(set(a)) > 1 or len(set(b)) > 1:
        assert got == pytest.approx(adjusted_rand_score(a, b), abs=1e-12)


def test_ari_permutation_invariant():
    a = [0, 0, 1, 1, 2, 2]
    assert adjusted_rand_index(a, [2, 2, 0, 0, 1, 1]) == 1.0


def test_select_k_two_blobs(rng):
    x = blobs(rng, [[0.0], [10.0]], 15)
    for method in Method:
        ranking = select_k(x, (2, 5), method)
        assert ranking[0][0] == 2
        assert [s for _, s in ranking] == sorted((s for _, s in ranking), reverse=True)


def test_select_k_degenerate_range(rng):
    x = rng.normal(size=(10, 2))
    assert len(select_k(x, (2, 2))) == 1
    with pytest.raises(KOutOfRange):
        select_k(x, (2, 11))


def test_stability_ward_is_exact(rng):
    x = rng.normal(size=(25, 3))
    report = stability(x, 3, Method.WARD, runs=4)
    assert report.mean_ari == 1.0 and report.runs == 4
    assert len(set(report.per_run_silhouette)) == 1


def test_stability_kmeans_separated_blobs(rng):
    x = blobs(rng, [[0.0, 0.0], [10.0, 10.0]], 20)
    report = stability(x, 2, "kmeans", runs=10)
    assert report.mean_ari == 1.0
    assert report.seeds == tuple(range(10))
    d = json.loads(report.to_json({"v": 1}))
    assert d["mean_ari"] == 1.0 and d["method"] == "kmeans"


def test_stability_needs_two_runs(rng):
    with pytest.raises(ValidationError):
        stability(rng.normal(size=(5, 2)), 2, runs=1)


def test_unknown_method():
    with pytest.raises(ValidationError):
        Method.parse("dbscan")


def test_cluster_model_json_round_trip(rng):
    x = rng.normal(size=(12, 2))
    model = cut_tree(ward_linkage(x), 3, x)
    again = ClusterModel.from_dict(json.loads(model.to_json()))
    assert np.array_equal(again.assignments, model.assignments)
    assert np.array_equal(again.centroids, model.centroids)
    assert again.silhouette == model.silhouette and again.method is Method.WARD


def test_cluster_model_rejects_empty_label():
    with pytest.raises(ValidationError):
        ClusterModel(3, [0, 0, 1], np.zeros((3, 1)), None, "ward")
