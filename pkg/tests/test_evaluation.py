import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egad.evaluation import (
    AUPRC_RULE, BenchReport, aggregate_runs, auprc, average_precision, bench_inference,
    emit_report, kdd_protocol, pr_curve, prf1, read_report, render_bench, speedup,
    top_fraction_classify,
)


def brute_force_ap(scores, labels):
    """Recount precision and recall from scratch at every distinct threshold."""
    scores = list(map(float, scores))
    labels = list(map(bool, labels))
    positives = sum(labels)
    total, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        flagged = [y for s, y in zip(scores, labels) if s >= t]
        tp = sum(flagged)
        precision, recall = tp / len(flagged), tp / positives
        total += (recall - prev_recall) * precision
        prev_recall = recall
    return total


# ------------------------------------------------------------------ curves

def test_pr_curve_hand_example():
    curve = pr_curve([0.9, 0.8, 0.1], [1, 1, 0])
    assert curve.points() == [(1.0, 0.5), (1.0, 1.0)]
    np.testing.assert_array_equal(curve.thresholds, [0.9, 0.8])


def test_ties_cross_together():
    curve = pr_curve([0.5, 0.5, 0.2, 0.2], [1, 0, 1, 0])
    assert curve.points() == [(0.5, 0.5), (0.5, 1.0)]


def test_single_class_rejected():
    for labels in ([1, 1, 1], [0, 0, 0]):
        with pytest.raises(ValueError):
            pr_curve([0.1, 0.2, 0.3], labels)


def test_perfect_separation():
    rng = np.random.default_rng(0)
    labels = rng.random(50) < 0.3
    labels[:2] = [True, False]
    scores = labels + rng.random(50) * 0.5
    curve = pr_curve(scores, labels)
    assert np.all(curve.precision == 1.0)
    assert auprc(curve) == 1.0


def test_auprc_matches_brute_force_200_instances():
    rng = np.random.default_rng(123)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 65))
        labels = rng.permutation(np.arange(n) < rng.integers(1, n))
        # coarse grid so ties are common
        scores = rng.integers(0, max(2, n // 3), n) / 7.0 if rng.random() < 0.5 else rng.random(n)
        worst = max(worst, abs(average_precision(scores, labels) - brute_force_ap(scores, labels)))
    assert worst < 1e-12


def test_auprc_agrees_with_sklearn():
    metrics = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(5)
    for _ in range(50):
        n = int(rng.integers(5, 200))
        labels = rng.random(n) < 0.3
        labels[:2] = [True, False]
        scores = rng.integers(0, 10, n).astype(float)
        assert average_precision(scores, labels) == pytest.approx(
            metrics.average_precision_score(labels, scores), abs=1e-12)


def test_random_ranking_near_prevalence():
    rng = np.random.default_rng(7)
    n = 10_000
    for _ in range(10):
        prevalence = rng.uniform(0.05, 0.5)
        labels = rng.random(n) < prevalence
        got = average_precision(rng.random(n), labels)
        assert abs(got - labels.mean()) < 0.05


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 8), st.booleans()), min_size=2, max_size=40), st.randoms())
def test_curve_permutation_invariant(pairs, rnd):
    scores = np.array([p[0] for p in pairs], dtype=float)
    labels = np.array([p[1] for p in pairs])
    if labels.all() or not labels.any():
        return
    perm = list(range(len(pairs)))
    rnd.shuffle(perm)
    a, b = pr_curve(scores, labels), pr_curve(scores[perm], labels[perm])
    assert a.points() == b.points()
    assert np.all(np.diff(a.recall) >= 0)
    assert np.all((a.precision >= 0) & (a.precision <= 1))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=40), st.integers(-20, 20))
def test_positive_rescaling_keeps_auprc(scores, k):
    # powers of two rescale exactly, so ties survive
    scores = np.array(scores)
    labels = np.arange(len(scores)) % 3 == 0
    assert average_precision(scores * 2.0 ** k, labels) == average_precision(scores, labels)


# ----------------------------------------------------------- top fraction

def test_top_fraction_count():
    flags = top_fraction_classify(np.arange(10.0), 0.2)
    assert flags.sum() == 2 and flags[8] and flags[9]


def test_top_fraction_ties_stable():
    flags = top_fraction_classify(np.zeros(10), 0.3)
    np.testing.assert_array_equal(np.flatnonzero(flags), [0, 1, 2])


def test_top_fraction_errors():
    with pytest.raises(ValueError):
        top_fraction_classify([], 0.2)
    for q in (0.0, 1.0, -0.5):
        with pytest.raises(ValueError):
            top_fraction_classify([1.0, 2.0], q)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 500), st.floats(0.001, 0.999))
def test_top_fraction_exact_floor(n, q):
    flags = top_fraction_classify(np.random.default_rng(n).random(n), q)
    assert flags.sum() == math.floor(round(q * n, 9))


def test_top_fraction_monotone_transform():
    rng = np.random.default_rng(3)
    for _ in range(50):
        s = rng.normal(size=int(rng.integers(5, 300)))
        np.testing.assert_array_equal(top_fraction_classify(s), top_fraction_classify(np.exp(3 * s) + 1))


# --------------------------------------------------------------------- prf1

def test_prf1_examples():
    assert prf1([1, 0, 1], [1, 0, 1]) == (1.0, 1.0, 1.0)
    assert prf1([1, 1, 0, 0], [1, 0, 1, 0]) == (0.5, 0.5, 0.5)
    assert prf1([0, 0], [1, 0]) == (0.0, 0.0, 0.0)


def test_prf1_shape_mismatch():
    with pytest.raises(ValueError):
        prf1([1, 0], [1, 0, 1])


def test_kdd_protocol_keys():
    out = kdd_protocol(np.arange(10.0), np.arange(10) >= 8)
    assert out == {"precision": 1.0, "recall": 1.0, "f1": 1.0}


# ------------------------------------------------------------- aggregation

def test_aggregate_two_runs():
    rep = aggregate_runs([{"f1": 0.93}, {"f1": 0.95}], "kdd_sigma")
    assert rep.mean("f1") == pytest.approx(0.94, abs=1e-15)
    assert rep.std("f1") == pytest.approx(0.0141421356, abs=1e-9)
    assert rep.runs == 2 and rep.metrics["f1"] == [0.93, 0.95]


def test_aggregate_single_run_has_no_std(tmp_path):
    rep = aggregate_runs([{"auprc": 0.7}], "mnist")
    assert rep.std("auprc") is None
    emit_report(rep, tmp_path / "r.csv")
    row = read_report(tmp_path / "r.csv")[0]
    assert row == {"config": "mnist", "metric": "auprc", "mean": "0.7", "std": "", "n": "1"}


def test_aggregate_needs_runs():
    with pytest.raises(ValueError):
        aggregate_runs([])


def test_emit_byte_identical(tmp_path):
    reps = [aggregate_runs([{"precision": 0.9, "recall": 0.8, "f1": 0.85}] * 3, "kdd_fm", "abc")]
    a = emit_report(reps, tmp_path / "a.csv", meta={"dataset": "kdd"})
    b = emit_report(reps, tmp_path / "b.csv", meta={"dataset": "kdd"})
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes() and a == b
    assert f"# auprc_rule={AUPRC_RULE}" in a and "# fingerprint=abc" in a
    assert [r["metric"] for r in read_report(tmp_path / "a.csv")] == ["precision", "recall", "f1"]


def test_plot_data_ten_digits(tmp_path):
    reps = [aggregate_runs([{"auprc": 0.5 + d / 100}] * 3, f"d{d}", digit=d, variant="fm")
            for d in range(10)]
    text = emit_report(reps, tmp_path / "p", fmt="plot-data")
    rows = read_report(tmp_path / "p")
    assert len(rows) == 10 and list(rows[0]) == ["digit", "variant", "mean", "std", "n"]
    assert rows[3]["digit"] == "3" and rows[3]["std"] == "0"
    assert "digit,variant,mean,std,n" in text


def test_unknown_report_format(tmp_path):
    with pytest.raises(ValueError):
        emit_report(aggregate_runs([{"a": 1.0}]), tmp_path / "x", fmt="xml")


# ------------------------------------------------------------ benchmarking

def _busy(ms):
    def fn(_batch):
        end = time.perf_counter() + ms / 1000
        while time.perf_counter() < end:
            pass
    return fn


def test_bench_counts_and_warmup():
    calls = []
    rep = bench_inference(calls.append, list(range(110)), warmup=3, n_batches=100)
    assert calls == list(range(103))
    assert rep.n_batches == 100 and len(rep.times_ms) == 100


def test_bench_too_few_batches():
    with pytest.raises(ValueError, match="103"):
        bench_inference(lambda b: None, [0] * 50)


def test_bench_self_comparison_band():
    fn = _busy(1.0)
    data = [np.zeros((4, 2))] * 103
    a = bench_inference(fn, data)
    b = bench_inference(fn, data)
    assert 0.8 <= speedup(a, b) <= 1.25


def test_speedup_and_render():
    slow = BenchReport("kdd", "sigma", "anogan", 2578.0, [2578.0] * 100, 50, "test-hw")
    fast = BenchReport("kdd", "sigma", "bigan", 2.7, [2.7] * 100, 50, "test-hw")
    assert speedup(slow, fast) == pytest.approx(954.8, abs=0.1)
    text = render_bench([(slow, fast)])
    assert text.splitlines()[1] == "kdd,sigma,2578.000,2.700,954.8,50,100/100,test-hw"
