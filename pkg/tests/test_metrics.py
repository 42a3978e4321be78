import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgtrack import metrics
from cgtrack.metrics import SequenceRecord, aggregate, center_error, evaluate, evaluate_all, iou


def boxes(rng, n):
    xy = rng.uniform(0, 200, (n, 2))
    wh = rng.uniform(5, 60, (n, 2))
    return np.concatenate([xy, wh], axis=1)


def test_perfect_results(rng):
    gt = SequenceRecord("a", boxes(rng, 30))
    rep = evaluate(gt.boxes, gt)
    assert rep.precision_at_20 == 1.0
    assert rep.success_auc == pytest.approx(20 / 21, abs=1e-12)


def test_all_half_overlap_fixture():
    gt = np.array([[0.0, 0.0, 10.0, 10.0]] * 12)
    res = gt.copy()
    res[:, 0] += 10 / 3  # overlap 20/3 x 10 = 66.7, union 133.3 -> IoU 0.5
    rep = evaluate(res, SequenceRecord("h", gt))
    np.testing.assert_allclose(iou(res, gt), 0.5)
    assert rep.success_auc == pytest.approx(10 / 21, abs=1e-12)


def test_center_error_and_precision_threshold_inclusive():
    gt = np.array([[0.0, 0.0, 10.0, 10.0]] * 2)
    res = np.array([[20.0, 0.0, 10.0, 10.0], [20.5, 0.0, 10.0, 10.0]])
    assert center_error(res[0], gt[0]) == 20.0
    rep = evaluate(res, SequenceRecord("c", gt))
    assert rep.precision_at_20 == 0.5


def test_absent_frames_are_skipped():
    gt = np.array([[0, 0, 10, 10], [np.nan] * 4, [0, 0, 10, 10]], dtype=float)
    res = np.array([[0, 0, 10, 10], [500, 500, 1, 1], [0, 0, 10, 10]], dtype=float)
    rep = evaluate(res, SequenceRecord("n", gt))
    assert rep.n_frames == 2 and rep.precision_at_20 == 1.0


def test_length_mismatch_is_an_error(rng):
    with pytest.raises(ValueError):
        evaluate(boxes(rng, 3), SequenceRecord("x", boxes(rng, 4)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 40))
def test_curves_monotone(seed, n):
    rng = np.random.default_rng(seed)
    gt, res = boxes(rng, n), boxes(rng, n)
    res[: n // 2] = gt[: n // 2] + rng.normal(0, 3, (n // 2, 4))
    res[:, 2:] = np.abs(res[:, 2:]) + 1
    rep = evaluate(res, SequenceRecord("m", gt))
    assert np.all(np.diff(rep.precision_curve) >= 0)
    assert np.all(np.diff(rep.success_curve) <= 0)
    assert 0 <= rep.success_auc <= 20 / 21 + 1e-12


def test_pooled_vs_mean_aggregation(rng):
    recs = {"a": SequenceRecord("a", boxes(rng, 10), {"x"}), "b": SequenceRecord("b", boxes(rng, 30), {"x", "y"})}
    res = {"a": recs["a"].boxes, "b": boxes(rng, 30)}
    reps = {k: evaluate(res[k], recs[k]) for k in recs}
    pooled = aggregate(reps, recs)
    mean = aggregate(reps, recs, pooled=False)
    assert pooled.success_auc == pytest.approx((10 * reps["a"].success_auc + 30 * reps["b"].success_auc) / 40)
    assert mean.success_auc == pytest.approx((reps["a"].success_auc + reps["b"].success_auc) / 2)
    full = evaluate_all(res, recs)
    assert set(full.by_attribute) == {"x", "y"}
    assert full.by_attribute["y"].n_frames == 30


def test_box_and_attribute_files_round_trip(tmp_path):
    b = np.array([[1.5, 2.25, 10.0, 3.0], [np.nan] * 4])
    metrics.write_boxes(tmp_path / "r.txt", b)
    np.testing.assert_array_equal(metrics.read_boxes(tmp_path / "r.txt"), b)
    metrics.write_attributes(tmp_path / "a.txt", {"s1": {"occlusion", "static"}})
    assert metrics.read_attributes(tmp_path / "a.txt") == {"s1": frozenset({"occlusion", "static"})}


def test_report_csv(tmp_path, rng):
    gt = SequenceRecord("a", boxes(rng, 5), {"static"})
    rep = evaluate_all({"a": gt.boxes}, {"a": gt})
    metrics.write_report_csv(tmp_path / "r.csv", rep)
    text = (tmp_path / "r.csv").read_text()
    assert "summary,precision_at_20,1.000000" in text
    assert "static:success,0.50," in text
