import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dpdnet.evaluation import (
    CountTally,
    MatchConfig,
    aggregate_by_condition,
    benchmark_fps,
    compute_metrics,
    confidence_interval,
    f1_from_rates,
    match_frame,
    report_csv,
    report_table,
)


# ----------------------------------------------------------------------------- oracles

def counting_oracle(tp, fp, fn):
    """Rates from explicit outcome lists, in exact rational arithmetic."""
    detections = ["hit"] * tp + ["false-alarm"] * fp
    people = ["found"] * tp + ["missed"] * fn
    n_det, n_gt = len(detections), len(people)
    hits, alarms, misses = detections.count("hit"), detections.count("false-alarm"), people.count("missed")
    pct = Fraction(100)
    out = {
        "precision": pct * Fraction(hits, n_det) if n_det else None,
        "recall": pct * Fraction(hits, n_gt) if n_gt else None,
        "fnr": pct * Fraction(misses, n_gt) if n_gt else None,
        "fpr": pct * Fraction(alarms, n_gt) if n_gt else None,
        "err": pct * Fraction(misses + alarms, n_gt) if n_gt else None,
    }
    if n_det and n_gt:
        p, r = out["precision"], out["recall"]
        out["f1"] = 2 * p * r / (p + r) if p + r else Fraction(0)
    else:
        out["f1"] = None
    return out


def assignment_oracle(det, gt, radius):
    """Maximum matching size over all one-to-one assignments within ``radius``."""
    best = 0
    n_d, n_g = len(det), len(gt)
    for k in range(min(n_d, n_g), 0, -1):
        for ds in itertools.permutations(range(n_d), k):
            for gs in itertools.combinations(range(n_g), k):
                if all(math.dist(det[d], gt[g]) <= radius for d, g in zip(ds, gs)):
                    return k
    return best


# ----------------------------------------------------------------------------- matching

def test_match_exact_far_and_closest():
    gt = [(10, 10), (50, 60)]
    assert match_frame(gt, gt) == CountTally(2, 0, 0)
    assert match_frame([(10, 40)], [(10, 10)]) == CountTally(0, 1, 1)
    t = match_frame([(10, 13), (10, 15)], [(10, 10)])
    assert t == CountTally(1, 1, 0)


def test_match_empty():
    assert match_frame(np.zeros((0, 3)), [(1, 1)]) == CountTally(0, 0, 1)
    assert match_frame([(1, 1, 0.9)], []) == CountTally(0, 1, 0)


points = st.lists(st.tuples(st.integers(0, 30), st.integers(0, 30)), max_size=4)


@given(points, points, st.randoms())
def test_match_against_assignment_oracle_and_order(det, gt, rnd):
    t = match_frame(det, gt, MatchConfig(8.0))
    assert t.tp + t.fp == len(det) and t.tp + t.fn == len(gt)
    # greedy nearest-first never beats the optimum
    assert t.tp <= assignment_oracle(det, gt, 8.0)
    d2, g2 = list(det), list(gt)
    rnd.shuffle(d2)
    rnd.shuffle(g2)
    assert match_frame(d2, g2, MatchConfig(8.0)) == t


@given(st.lists(st.tuples(st.integers(0, 200), st.integers(0, 200)), max_size=4, unique=True))
def test_match_is_optimal_for_separated_people(gt):
    """With people farther apart than twice the radius the greedy result is the optimum."""
    if any(math.dist(a, b) <= 24 for a, b in itertools.combinations(gt, 2)):
        return
    det = [(r + 3, c - 2) for r, c in gt] + [(500, 500)]
    t = match_frame(det, gt, MatchConfig(12.0))
    assert t.tp == assignment_oracle(det, gt, 12.0) == len(gt)


# ----------------------------------------------------------------------------- metrics

def test_metrics_match_counting_oracle_exhaustively():
    for tp, fp, fn in itertools.product(range(51), repeat=3):
        m = compute_metrics(CountTally(tp, fp, fn))
        o = counting_oracle(tp, fp, fn)
        for key in ("precision", "recall", "fnr", "fpr", "f1"):
            got, want = getattr(m, key), o[key]
            if want is None:
                assert got is None, (tp, fp, fn, key)
            else:
                assert got == float(want), (tp, fp, fn, key)
        if o["err"] is None:
            assert m.err is None
        else:
            assert m.err == m.fnr + m.fpr
            assert abs(Fraction(m.err) - o["err"]) <= Fraction(1, 10 ** 12)


def test_paper_f1_from_rates():
    assert abs(f1_from_rates(99.99, 99.75) - 99.87) <= 0.005


def test_perfect_and_hand_built():
    m = compute_metrics(CountTally(40, 0, 0))
    assert (m.precision, m.recall, m.f1, m.fnr, m.fpr, m.err) == (100, 100, 100, 0, 0, 0)
    m = compute_metrics(CountTally(99, 1, 1))
    assert (m.precision, m.recall, m.fnr, m.fpr, m.err) == (99.0, 99.0, 1.0, 1.0, 2.0)


def test_inconsistent_tally():
    with pytest.raises(ValueError):
        compute_metrics(CountTally(3, 0, 1), n_gt=5)


def test_confidence_interval():
    assert confidence_interval(0.0, 10) == 0.0 and confidence_interval(1.0, 10) == 0.0
    assert confidence_interval(0.5, 10000) == pytest.approx(0.0098, abs=5e-6)
    assert confidence_interval(0.3, 400) == pytest.approx(confidence_interval(0.3, 100) / 2)


@given(st.lists(st.tuples(st.sampled_from(["single", "two", "multi", "no-people"]),
                          st.integers(0, 9), st.integers(0, 9), st.integers(0, 9)), max_size=12))
def test_aggregation_and_err_identity(rows):
    tallies = [(c, CountTally(a, b, d)) for c, a, b, d in rows]
    groups = aggregate_by_condition(tallies)
    total = groups["Totals"]
    assert total == CountTally(sum(t.tp for _, t in tallies), sum(t.fp for _, t in tallies),
                               sum(t.fn for _, t in tallies))
    for line in report_csv(groups).splitlines()[1:]:
        cells = line.split(",")
        fnr, fpr, err = cells[8:11]
        if err != "NA":
            assert float(err) == float(fnr) + float(fpr)


def test_report_formats():
    groups = aggregate_by_condition([("single", CountTally(99, 1, 1)), ("two", CountTally(2, 0, 0))])
    csv_text = report_csv(groups)
    assert csv_text.splitlines()[0].startswith("condition,TP,FP,FN,Precision")
    assert [l.split(",")[0] for l in csv_text.splitlines()[1:]] == ["single", "two", "Totals"]
    table = report_table(groups)
    assert "F1" in table and "+-" in table and "Totals" in table
    assert "2.00 +-" in table.splitlines()[2]


# ----------------------------------------------------------------------------- timing

class FakeClock:
    def __init__(self, step):
        self.t, self.step, self.calls = 0.0, step, 0

    def __call__(self):
        self.calls += 1
        if self.calls % 2 == 0:
            self.t += self.step
        return self.t


def test_benchmark_stub_100fps_and_warmup():
    result = benchmark_fps(lambda f: None, list(range(12)), warmup=2, clock=FakeClock(0.01))
    assert result.timed_frames == 10
    assert result.mean_fps == pytest.approx(100, rel=0.1)
    assert result.min_fps <= result.mean_fps <= result.max_fps


def test_benchmark_real_sleep():
    import time
    result = benchmark_fps(lambda f: time.sleep(0.01), list(range(6)), warmup=1)
    assert result.timed_frames == 5
    assert 50 < result.mean_fps <= 101


def test_benchmark_validation():
    with pytest.raises(ValueError):
        benchmark_fps(lambda f: None, [1, 2], warmup=2)
