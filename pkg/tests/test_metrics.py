import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from colorvar.clustering import ClusterAssignment
from colorvar.metrics import ari, cgacc, cscore, evaluate, fms, format_table

import oracles

partitions = st.integers(2, 15).flatmap(
    lambda n: st.tuples(st.lists(st.integers(0, 4), min_size=n, max_size=n),
                        st.lists(st.integers(0, 4), min_size=n, max_size=n)))


def test_ari_fms_match_pair_enumeration_on_200_random_partitions():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 16))
        t = rng.integers(0, rng.integers(1, n + 1), size=n).tolist()
        p = rng.integers(0, rng.integers(1, n + 1), size=n).tolist()
        worst = max(worst, abs(ari(t, p) - oracles.ari_pairs(t, p)), abs(fms(t, p) - oracles.fms_pairs(t, p)))
    assert worst < 1e-12


def test_frozen_pair_counting_cases():
    assert ari([1, 1, 2, 2], [0, 0, 0, 0]) == pytest.approx(0.0, abs=1e-15)
    assert fms([1, 1, 2, 2], [0, 0, 0, 0]) == pytest.approx(0.5773502691896258, abs=1e-15)
    t = [0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]
    p = [0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 0, 0]
    assert ari(t, p) == pytest.approx(0.16143497757847533, abs=1e-15)
    assert fms(t, p) == pytest.approx(0.32025630761017426, abs=1e-15)


@pytest.mark.parametrize("a,f,expected,tol", [(0.69, 0.71, 0.700, 0.001), (0.75, 0.76, 0.756, 0.002),
                                              (1.0, 1.0, 1.0, 0.0)])
def test_cscore_reference_pairs(a, f, expected, tol):
    assert abs(cscore(a, f) - expected) <= tol + 1e-12


def test_cscore_zero_and_invalid():
    assert cscore(0.0, 0.0) == 0.0
    with pytest.raises(ValueError):
        cscore(-0.1, 0.5)


def test_cgacc_counts_pure_multi_clusters():
    truth = ["a", "a", "b", "b", "c", "c", "d", "d", "e"]
    pred = [0, 0, 1, 1, 2, 2, 3, 3, 3]  # cluster 3 mixes d and e
    assert cgacc(truth, pred) == 0.75


def test_no_multi_clusters_gives_zero_and_flag():
    truth = {"x": "g", "y": "g", "z": "h"}
    rep = evaluate(truth, ClusterAssignment(["x", "y", "z"], [0, 1, 2], "test"))
    assert rep.cgacc == 0.0
    assert rep.groups_detected is False
    assert rep.fms == 0.0


def test_noise_points_count_as_singletons():
    truth = ["a", "a", "b", "b"]
    assert ari(truth, [-1, -1, 0, 0]) == ari(truth, [5, 6, 0, 0])
    assert cgacc(truth, [-1, -1, 0, 0]) == 1.0


def test_identical_partitions_score_one():
    p = [0, 0, 1, 1, 2]
    assert ari(p, p) == 1.0 and fms(p, p) == 1.0


def test_all_singletons_both_sides_is_identical():
    assert ari([0, 1, 2], [5, 6, 7]) == 1.0


@settings(max_examples=100, deadline=None)
@given(partitions, st.permutations(range(5)), st.permutations(range(5)))
def test_metrics_ignore_label_names(tp, perm_t, perm_p):
    t, p = tp
    t2 = [perm_t[x] for x in t]
    p2 = [perm_p[x] for x in p]
    assert ari(t, p) == pytest.approx(ari(t2, p2), abs=1e-12)
    assert fms(t, p) == pytest.approx(fms(t2, p2), abs=1e-12)
    assert cgacc(t, p) == cgacc(t2, p2)


@settings(max_examples=100, deadline=None)
@given(partitions)
def test_fms_is_geometric_mean_of_pair_precision_and_recall(tp):
    t, p = tp
    n_tp, n_fp, n_fn, _ = oracles.pair_counts(t, p)
    if n_tp + n_fp == 0 or n_tp + n_fn == 0:
        return
    precision, recall = n_tp / (n_tp + n_fp), n_tp / (n_tp + n_fn)
    assert fms(t, p) == pytest.approx(math.sqrt(precision * recall), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 1.0), st.floats(1e-6, 1.0))
def test_cscore_is_a_harmonic_mean(a, f):
    h = cscore(a, f)
    assert min(a, f) - 1e-12 <= h <= math.sqrt(a * f) + 1e-12 <= (a + f) / 2 + 2e-12


def test_evaluate_clamps_negative_ari_and_keeps_raw():
    truth = {str(i): g for i, g in enumerate("aabb")}
    rep = evaluate(truth, ClusterAssignment(list("0123"), [0, 1, 0, 1], "test"))
    assert rep.ari_raw < 0 and rep.ari == 0.0 and rep.cscore == 0.0


def test_evaluate_rejects_misaligned_ids():
    with pytest.raises(ValueError, match="no ground truth"):
        evaluate({"a": "1"}, ClusterAssignment(["a", "b"], [0, 0], "test"))
    with pytest.raises(ValueError):
        evaluate({"a": "1", "b": "1", "c": "2"}, ClusterAssignment(["a", "b"], [0, 0], "test"))


def test_report_json_is_stable():
    truth = {"a": "1", "b": "1"}
    rep = evaluate(truth, ClusterAssignment(["a", "b"], [0, 0], "test"))
    text = rep.to_json(seed=3)
    assert text == rep.to_json(seed=3)
    assert json.loads(text)["seed"] == 3


def test_format_table_layout():
    truth = {"a": "1", "b": "1", "c": "2"}
    rep = evaluate(truth, ClusterAssignment(["a", "b", "c"], [0, 0, 1], "test"))
    lines = format_table({"triplet": rep, "pbcnet": rep}, "Data 1").splitlines()
    assert lines[0].split() == ["Dataset", "Metric", "triplet", "pbcnet"]
    assert [ln.split()[-3] for ln in lines[2:]] == ["CGacc", "ARI", "FMS", "CScore"]
    assert lines[2].startswith("Data 1")
