import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from yolopeds.head import BBox, Detection
from yolopeds.metrics import BenchReport, MatchResult, benchmark, compute_report, match

import oracles


def det(box, obj=0.9):
    return Detection(box, obj, 0.9, 0)


def test_match_single_exact():
    b = BBox(0.5, 0.5, 0.2, 0.2)
    r = match([det(b)], [b])
    assert (r.tp, r.fp, r.fn) == (1, 0, 0) and r.ious == pytest.approx((1.0,))


def test_match_one_gt_claimed_once():
    b = BBox(0.5, 0.5, 0.2, 0.2)
    r = match([det(b, 0.9), det(BBox(0.51, 0.5, 0.2, 0.2), 0.8)], [b])
    assert (r.tp, r.fp, r.fn) == (1, 1, 0)


def test_match_below_threshold_is_fp_and_fn():
    r = match([det(BBox(0.5, 0.5, 0.2, 0.2))], [BBox(0.6, 0.5, 0.2, 0.2)])  # IoU 1/3
    assert (r.tp, r.fp, r.fn) == (0, 1, 1)


def test_match_empty_inputs():
    assert match([], []) == MatchResult(0, 0, 0, ())
    assert match([], [BBox(0.5, 0.5, 0.1, 0.1)]).fn == 1




def test_match_equals_brute_force_reference():
    rng = np.random.default_rng(0)
    for _ in range(30):
        gts = [BBox(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.1, 0.3, 2)) for _ in range(4)]
        preds = []
        for _ in range(10):
            g = gts[int(rng.integers(4))]
            jitter = rng.normal(0, 0.03, 4)
            vals = np.clip(np.array(g.to_list()) + jitter, 0.01, 0.99)
            preds.append(det(BBox(*map(float, vals)), float(rng.uniform(0.5, 1))))
        tp, fp, fn, ious = oracles.brute_force_match(preds, gts)
        r = match(preds, gts)
        assert (r.tp, r.fp, r.fn) == (tp, fp, fn)
        assert r.ious == pytest.approx(ious)


def test_report_accuracy_and_miss_rate():
    rep = compute_report([MatchResult(9, 0, 1, (0.6,) * 9)])
    assert rep.accuracy == pytest.approx(0.9) and rep.miss_rate == pytest.approx(0.1)


def test_report_fppi():
    results = [MatchResult(0, 1, 0, ())] * 23 + [MatchResult(0, 0, 0, ())] * 77
    assert compute_report(results).fppi == pytest.approx(0.23)


def test_report_mean_iou():
    rep = compute_report([MatchResult(4, 0, 0, (0.5, 0.7, 0.7, 0.62))])
    assert rep.mean_iou == pytest.approx(0.63, abs=1e-12)


def test_report_undefined_ratios_are_none():
    rep = compute_report([MatchResult(0, 2, 0, ())])
    assert rep.accuracy is None and rep.miss_rate is None and rep.mean_iou is None
    assert rep.fppi == 2.0
    with pytest.raises(ValueError):
        compute_report([])


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=20))
@settings(max_examples=100, deadline=None)
def test_report_invariants(counts):
    results = [MatchResult(tp, fp, fn, (0.75,) * tp) for tp, fp, fn in counts]
    rep = compute_report(results)
    assert rep.to_dict() == compute_report(results[::-1]).to_dict()
    if rep.accuracy is not None:
        assert 0.0 <= rep.accuracy <= 1.0
        assert rep.accuracy + rep.miss_rate == pytest.approx(1.0)


def test_bench_fps_formula():
    assert BenchReport.from_latencies([0.05, 0.05]).fps == pytest.approx(20.0)
    assert BenchReport.from_latencies([0.03] * 10).fps == pytest.approx(33.3, abs=0.05)
    with pytest.raises(ValueError):
        BenchReport.from_latencies([0.05, 0.0])


def test_benchmark_skips_warmup_and_times_each_image():
    ticks = iter(np.arange(0, 100, 0.5))
    calls = []
    rep = benchmark(calls.append, ["a", "b", "c"], warmup=2, clock=lambda: next(ticks))
    assert calls == ["a", "b", "a", "b", "c"]
    assert len(rep.latencies) == 3 and rep.fps == pytest.approx(2.0)
    assert rep.latency_p50 == rep.latency_p95 == 0.5
