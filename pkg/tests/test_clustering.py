import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from colorvar.clustering import (ClusterAssignment, affinity_propagation, agglomerative_ward, cluster,
                                 dbscan, relabel)
from colorvar.model import EmbeddingMatrix

import oracles


def _blobs(rng, centers, per, spread):
    return np.concatenate([c + spread * rng.normal(size=(per, len(c))) for c in centers])


def test_ward_matches_naive_linkage_on_50_random_sets():
    rng = np.random.default_rng(7)
    for trial in range(50):
        n = int(rng.integers(2, 21))
        x = rng.normal(size=(n, int(rng.integers(1, 6))))
        heights = oracles.naive_ward_heights(x)
        # cut between merge heights so float ties cannot decide the answer
        cuts = sorted(set(heights))
        mids = [(a + b) / 2 for a, b in zip(cuts, cuts[1:])] or [cuts[0] * 2]
        for t in rng.choice(mids, size=min(3, len(mids)), replace=False):
            got = agglomerative_ward(x, float(t)).labels
            assert oracles.same_partition(got, oracles.naive_ward(x, float(t))), (trial, t)


def test_ward_frozen_example():
    x = np.array([[0, 0], [0, 1], [5, 0], [5, 1.5], [10, 10], [10.0, 12]])
    # merge heights 1, 1.5, 2, 7.08, 20.9
    assert agglomerative_ward(x, 2.5).labels == [0, 0, 1, 1, 2, 2]
    assert agglomerative_ward(x, 10.0).labels == [0, 0, 0, 0, 1, 1]
    assert agglomerative_ward(x, 1.2).labels == [0, 0, 1, 2, 3, 4]


def test_ward_threshold_limits():
    x = np.random.default_rng(0).normal(size=(12, 3))
    assert set(agglomerative_ward(x, 1e9).labels) == {0}
    assert agglomerative_ward(x, 1e-9).labels == list(range(12))


def test_ward_single_point_and_duplicates():
    assert agglomerative_ward(np.ones((1, 4)), 0.1).labels == [0]
    x = np.array([[0.0, 0]] * 3 + [[9.0, 9]] * 3)
    assert agglomerative_ward(x, 1.0).labels == [0, 0, 0, 1, 1, 1]


def test_ward_rejects_bad_input():
    with pytest.raises(ValueError):
        agglomerative_ward(np.zeros((0, 3)), 1.0)
    with pytest.raises(ValueError):
        agglomerative_ward(np.zeros((3, 3)), 0.0)


def test_dbscan_matches_naive_pass():
    rng = np.random.default_rng(3)
    for _ in range(30):
        x = rng.normal(size=(int(rng.integers(1, 25)), 2))
        eps = float(rng.uniform(0.1, 1.5))
        mp = int(rng.integers(1, 5))
        got = dbscan(x, eps, mp).labels
        ref = oracles.naive_dbscan(x, eps, mp)
        assert [g < 0 for g in got] == [r < 0 for r in ref]
        keep = [i for i, r in enumerate(ref) if r >= 0]
        # border points reachable from two clusters may go either way
        core_only = [i for i in keep if np.sum(np.linalg.norm(x - x[i], axis=1) <= eps) >= mp]
        assert oracles.same_partition([got[i] for i in core_only], [ref[i] for i in core_only])


def test_dbscan_two_blobs_and_edges():
    rng = np.random.default_rng(1)
    x = _blobs(rng, [np.zeros(2), np.full(2, 10.0)], 6, 0.1)
    assert dbscan(x, 1.0, 2).labels == [0] * 6 + [1] * 6
    assert dbscan(np.ones((5, 3)), 0.1, 5).labels == [0] * 5
    far = np.arange(5.0)[:, None] * 10
    assert dbscan(far, 1.0, 2).labels == [-1] * 5


def test_affinity_propagation_matches_exhaustive_exemplars():
    rng = np.random.default_rng(5)
    x = _blobs(rng, [np.array([0.0, 0]), np.array([6.0, 0]), np.array([0.0, 6])], 5, 0.4)
    a = affinity_propagation(x)
    assert a.converged
    ref = oracles.best_exemplar_partition(x, a.params["preference"])
    assert oracles.same_partition(a.labels, ref)
    assert a.n_clusters == 3


def test_affinity_propagation_degenerate_inputs():
    assert affinity_propagation(np.ones((1, 3))).labels == [0]
    assert affinity_propagation(np.ones((5, 3))).labels == [0] * 5
    with pytest.raises(ValueError):
        affinity_propagation(np.ones((3, 3)), damping=0.3)


def test_affinity_propagation_reports_non_convergence():
    rng = np.random.default_rng(0)
    a = affinity_propagation(rng.normal(size=(30, 2)), max_iter=2)
    assert a.converged is False
    assert len(a.labels) == 30


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 15), st.integers(0, 10_000), st.floats(0.3, 3.0))
def test_ward_and_dbscan_ignore_row_order(n, seed, t):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    perm = rng.permutation(n)
    for fn in (lambda m: agglomerative_ward(m, t), lambda m: dbscan(m, t / 2, 2)):
        base = fn(x).labels
        moved = fn(x[perm]).labels
        back = [None] * n
        for i, p in enumerate(perm):
            back[p] = moved[i]
        assert oracles.same_partition(base, back)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-1, 6), min_size=1, max_size=30))
def test_relabel_is_contiguous_first_appearance(labels):
    out = relabel(labels)
    seen = [x for x in out if x >= 0]
    assert sorted(set(seen)) == list(range(len(set(seen))))
    assert [x < 0 for x in out] == [x < 0 for x in labels]
    firsts = [seen[i] for i in range(len(seen)) if seen[i] not in seen[:i]]
    assert firsts == sorted(firsts)


def test_cluster_dispatch_and_jsonl_round_trip(tmp_path):
    emb = EmbeddingMatrix(["a", "b", "c"], np.array([[0.0, 0], [0, 0.1], [5, 5]]))
    a = cluster(emb, "agglomerative_ward", 1.0)
    assert a.ids == ["a", "b", "c"] and a.labels == [0, 0, 1]
    a.save_jsonl(tmp_path / "a.jsonl")
    b = ClusterAssignment.load_jsonl(tmp_path / "a.jsonl")
    assert (b.ids, b.labels) == (a.ids, a.labels)
    with pytest.raises(ValueError):
        cluster(emb, "kmeans", 3)
