import csv
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mccseg.evaluation import (
    REPORT_HEADER,
    EvalReport,
    NoDefinedClassError,
    confusion_counts,
    emit_report,
    evaluate_dataset,
    image_mean_iou,
    iou_per_class,
)
from mccseg.taxonomy import CANONICAL
from tests.oracles import iou_reference


def test_perfect_prediction_counts():
    gt = np.array([[1, 2], [3, 4]])
    c = confusion_counts(gt, gt, 5)
    assert c.fp.sum() == 0 and c.fn.sum() == 0
    assert c.tp.tolist() == [0, 1, 1, 1, 1]


def test_two_pixel_counts():
    c = confusion_counts(np.array([1, 2]), np.array([1, 1]), 5)
    assert (c.tp[1], c.fp[1], c.fn[1]) == (1, 0, 1)
    assert (c.tp[2], c.fp[2], c.fn[2]) == (0, 1, 0)


def test_unknown_gt_excluded():
    c = confusion_counts(np.array([1, 2, 3]), np.zeros(3, int), 5)
    assert c.tp.sum() == c.fp.sum() == c.fn.sum() == 0


def test_counts_shape_mismatch():
    with pytest.raises(ValueError):
        confusion_counts(np.zeros((2, 2)), np.zeros((2, 3)), 5)


def test_tp_plus_fn_is_known_pixel_count():
    rng = np.random.default_rng(0)
    gt = rng.integers(0, 5, (16, 16))
    c = confusion_counts(rng.integers(0, 5, (16, 16)), gt, 5)
    assert int(c.tp.sum() + c.fn.sum()) == int((gt != 0).sum())


def test_iou_values():
    c = confusion_counts(np.array([1, 2]), np.array([1, 1]), 5)
    ious = iou_per_class(c)
    assert ious[1] == 0.5
    assert ious[2] == 0.0
    assert math.isnan(ious[3])
    assert iou_per_class(confusion_counts(np.array([3]), np.array([3]), 5))[3] == 1.0


def test_image_mean():
    ious = np.array([np.nan, 0.8, np.nan, 0.6, np.nan])
    assert image_mean_iou(ious, 0) == pytest.approx(0.7)
    assert image_mean_iou(np.array([np.nan, 1.0, np.nan]), 0) == 1.0
    with pytest.raises(NoDefinedClassError):
        image_mean_iou(np.array([0.5, np.nan, np.nan]), 0)


def test_dataset_mean_of_image_means():
    gt = np.array([[1, 2]])
    preds = [("a", np.array([[1, 1]])), ("b", gt)]
    rep = evaluate_dataset(preds, [("a", gt), ("b", gt)], CANONICAL)
    # image a: urban 1/2, open_area 0 -> 0.25; image b: 1.0
    assert rep.miou == pytest.approx((0.25 + 1.0) / 2)
    assert rep.per_class[1] == pytest.approx(0.75) and rep.per_class[3] is None


def test_dataset_identical_is_one_and_excludes_unknown_only():
    gt = np.array([[1, 2], [3, 4]])
    rep = evaluate_dataset([("a", gt), ("u", np.ones((2, 2), int))],
                           [("a", gt), ("u", np.zeros((2, 2), int))], CANONICAL)
    assert rep.miou == 1.0
    assert rep.excluded == ["u"]


def test_dataset_missing_prediction():
    with pytest.raises(KeyError, match="missing"):
        evaluate_dataset([], [("a", np.ones((2, 2), int))], CANONICAL)


def test_dataset_mean_order_invariant():
    rng = np.random.default_rng(1)
    gts = [(str(i), rng.integers(1, 5, (6, 6))) for i in range(10)]
    preds = [(i, rng.integers(1, 5, (6, 6))) for i, _ in gts]
    a = evaluate_dataset(preds, gts, CANONICAL).miou
    b = evaluate_dataset(preds[::-1], gts[::-1], CANONICAL).miou
    assert a == pytest.approx(b, abs=1e-15)


def _impl_ious(pred, gt, c=5):
    return iou_per_class(confusion_counts(np.asarray(pred), np.asarray(gt), c))


def _check_against_oracle(pred, gt, c):
    ours = _impl_ious(pred, gt, c)
    for k in range(c):
        ref = iou_reference(list(pred), list(gt), k)
        if ref is None:
            assert math.isnan(ours[k])
        else:
            assert ours[k] == ref


def test_random_multiclass_oracle():
    rng = np.random.default_rng(7)
    for _ in range(200):
        pred, gt = rng.integers(0, 5, 64), rng.integers(0, 5, 64)
        _check_against_oracle(pred, gt, 5)


def test_binary_3x3_oracle_sample():
    patterns = [np.array(bits) for bits in itertools.product([1, 2], repeat=9)]
    rng = np.random.default_rng(0)
    for i, j in rng.integers(0, 512, (500, 2)):
        _check_against_oracle(patterns[i], patterns[j], 3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(1, 4)), min_size=1, max_size=40))
def test_iou_symmetry(pairs):
    pred = np.array([p for p, _ in pairs])
    gt = np.array([g for _, g in pairs])
    # swapping roles is only symmetric when neither map uses the ignored class
    pred = np.where(pred == 0, 1, pred)
    np.testing.assert_array_equal(_impl_ious(pred, gt), _impl_ious(gt, pred))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=40), st.data())
def test_fixing_a_pixel_never_lowers_iou(pairs, data):
    pred = np.array([p for p, _ in pairs])
    gt = np.array([g for _, g in pairs])
    wrong = np.flatnonzero(pred != gt)
    if len(wrong) == 0:
        return
    i = data.draw(st.sampled_from(list(wrong)))
    fixed = pred.copy()
    fixed[i] = gt[i]
    before, after = _impl_ious(pred, gt)[gt[i]], _impl_ious(fixed, gt)[gt[i]]
    assert after >= before


# -- CSV report --------------------------------------------------------------

def _report(miou, regime="mcc_semi", source="hwlc18", split="rural_test", per_class=None):
    per_class = per_class or [None, 0.6, 0.4, None, 0.8]
    return EvalReport([], miou, per_class, CANONICAL.names, 0,
                      {"regime": regime, "source": source, "split": split})


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def test_one_report_one_row(tmp_path):
    path = emit_report([_report(0.6)], tmp_path / "t.csv")
    rows = _rows(path)
    assert rows[0] == REPORT_HEADER
    assert rows[1] == ["hwlc18", "mcc_semi", "0.6000", "0.6000", "0.4000", "", "0.8000", ""]
    raw = path.read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")


def test_duplicate_key(tmp_path):
    with pytest.raises(ValueError, match="duplicate row key"):
        emit_report([_report(0.6), _report(0.7)], tmp_path / "t.csv")


def test_building_column_from_urban_split(tmp_path):
    urban = _report(0.9, split="urban_test", per_class=[None, 0.901, 0.5, 0.5, 0.5])
    rows = _rows(emit_report([_report(0.636), urban], tmp_path / "t.csv"))
    assert len(rows) == 2
    assert rows[1][2] == "0.6360" and rows[1][-1] == "0.9010"


def test_report_deterministic_and_roundtrip(tmp_path):
    reps = [_report(0.5, regime=r) for r in ("combined", "mcc_semi", "mcc_transfer")]
    a = emit_report(reps, tmp_path / "a.csv").read_bytes()
    b = emit_report(reps, tmp_path / "b.csv").read_bytes()
    assert a == b
    reps[0].save(tmp_path / "r.json")
    assert EvalReport.load(tmp_path / "r.json") == reps[0]
    with pytest.raises(ValueError):
        emit_report([], tmp_path / "c.csv")
