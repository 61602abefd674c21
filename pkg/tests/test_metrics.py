import csv
import math
from pathlib import Path

import numpy as np
import pytest

from waterlog.metrics import (
    ConfusionCounts,
    MetricReport,
    PRAccumulator,
    accumulate,
    break_even_point,
    compute_metrics,
    default_thresholds,
    dice_from_iou,
    pr_curve,
)

FIXTURES = Path(__file__).parent / "fixtures"


def published_rows():
    with open(FIXTURES / "published_metrics.tsv") as fh:
        return [
            {k: (v if k in ("dataset", "method") else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh, delimiter="\t")
        ]


def test_accumulate_all_ones():
    c = accumulate(np.ones((4, 4)), np.ones((4, 4)))
    assert (c.tp, c.fp, c.tn, c.fn) == (16, 0, 0, 0)


def test_accumulate_inverted():
    gt = np.zeros((3, 3), dtype=np.uint8)
    gt[0] = 1
    c = accumulate(1 - gt, gt)
    assert c.tp == 0 and c.tn == 0 and c.fp == 6 and c.fn == 3


def test_accumulate_loop_oracle(rng):
    pred = rng.integers(0, 2, (8, 8))
    gt = rng.integers(0, 2, (8, 8))
    tp = fp = tn = fn = 0
    for i in range(8):
        for j in range(8):
            p, g = pred[i, j], gt[i, j]
            tp += p and g
            fp += p and not g
            fn += (not p) and g
            tn += (not p) and (not g)
    assert accumulate(pred, gt) == ConfusionCounts(tp, fp, tn, fn)


def test_accumulate_shape_mismatch():
    with pytest.raises(ValueError):
        accumulate(np.zeros((2, 2)), np.zeros((2, 3)))


def test_accumulate_adds_to_existing():
    c = accumulate(np.ones(2), np.ones(2))
    c = accumulate(np.zeros(2), np.ones(2), c)
    assert c == ConfusionCounts(2, 0, 0, 2)


def test_compute_metrics_formulas():
    r = compute_metrics(ConfusionCounts(tp=30, fp=10, tn=50, fn=10))
    assert r.precision == pytest.approx(0.75)
    assert r.recall == pytest.approx(0.75)
    assert r.specificity == pytest.approx(50 / 60)
    assert r.iou == pytest.approx(30 / 50)
    assert r.dice == pytest.approx(60 / 80)
    assert r.g_mean == pytest.approx(math.sqrt(0.75 * 50 / 60))


def test_zero_denominator_convention():
    r = compute_metrics(ConfusionCounts(tp=0, fp=0, tn=25, fn=0))
    assert r.precision == r.recall == r.iou == r.dice == 1.0
    assert r.specificity == 1.0


def test_zero_denominator_with_errors():
    # no predicted positives but missed water: precision undefined, reported 1.0; recall 0
    r = compute_metrics(ConfusionCounts(tp=0, fp=0, tn=5, fn=3))
    assert r.precision == 1.0 and r.recall == 0.0 and r.iou == 0.0


def test_identities_hold_exactly(rng):
    for _ in range(50):
        tp, fp, tn, fn = (int(v) for v in rng.integers(0, 1000, 4))
        r = compute_metrics(ConfusionCounts(tp, fp, tn, fn))
        if tp + fp + fn > 0:
            assert abs(r.dice - dice_from_iou(r.iou)) < 1e-12
        assert abs(r.g_mean - math.sqrt(r.recall * r.specificity)) < 1e-12
        for name in ("precision", "recall", "specificity", "dice", "iou", "g_mean"):
            assert 0.0 <= getattr(r, name) <= 1.0


def test_g_mean_and_dice_published_row():
    # headline row of the published comparison table
    assert math.sqrt(0.9473 * 0.9827) == pytest.approx(0.9648, abs=5e-4)
    assert dice_from_iou(0.8732) == pytest.approx(0.9323, abs=5e-4)


def test_published_table_identities():
    rows = published_rows()
    assert len(rows) == 21
    for row in rows:
        assert abs(dice_from_iou(row["iou"]) - row["dice"]) < 1e-3, row
        assert abs(math.sqrt(row["recall"] * row["specificity"]) - row["g_mean"]) < 1e-3, row


def test_report_json_roundtrip():
    r = compute_metrics(ConfusionCounts(3, 1, 5, 2))
    back = MetricReport.from_dict(__import__("json").loads(r.to_json()))
    assert back == r


def test_permutation_invariance(rng):
    preds = [rng.integers(0, 2, (5, 5)) for _ in range(6)]
    gts = [rng.integers(0, 2, (5, 5)) for _ in range(6)]
    a = ConfusionCounts()
    for p, g in zip(preds, gts):
        a = accumulate(p, g, a)
    b = ConfusionCounts()
    for i in rng.permutation(6):
        b = accumulate(preds[i], gts[i], b)
    assert compute_metrics(a) == compute_metrics(b)


# ------------------------------------------------------------- PR curves


def test_default_thresholds():
    t = default_thresholds(3)
    assert t.tolist() == [0.25, 0.5, 0.75]
    with pytest.raises(ValueError):
        default_thresholds(0)


def test_perfect_predictor_curve():
    gt = np.array([[1, 0], [0, 1]], dtype=np.uint8)
    curve = pr_curve([gt.astype(float)], [gt], n_thresholds=9)
    for _, p, r in curve.points:
        assert p == 1.0 and r == 1.0
    assert curve.break_even[1] == 1.0


def test_constant_half_two_pixels():
    # one water pixel, one background pixel, both predicted 0.5
    probs = np.array([0.5, 0.5])
    gt = np.array([1, 0])
    curve = pr_curve([probs], [gt], n_thresholds=3)  # thresholds 0.25, 0.5, 0.75
    recalls = [r for _, _, r in curve.points]
    precisions = [p for _, p, _ in curve.points]
    assert recalls == [1.0, 1.0, 0.0]  # >= convention: 0.5 counts as positive at t=0.5
    assert precisions == [0.5, 0.5, 1.0]


def test_four_pixel_brute_force():
    probs = np.array([0.1, 0.4, 0.6, 0.9])
    gt = np.array([0, 1, 0, 1])
    n = 19
    curve = pr_curve([probs], [gt], n_thresholds=n)
    for k, (t, p, r) in enumerate(curve.points, start=1):
        assert t == pytest.approx(k / (n + 1))
        pred = [int(x >= t) for x in probs]
        tp = sum(a and b for a, b in zip(pred, gt))
        fp = sum(a and not b for a, b in zip(pred, gt))
        fn = sum((not a) and b for a, b in zip(pred, gt))
        assert p == (tp / (tp + fp) if tp + fp else 1.0)
        assert r == (tp / (tp + fn) if tp + fn else 1.0)


def test_recall_non_increasing(rng):
    probs = [rng.random((6, 6)) for _ in range(3)]
    gts = [(rng.random((6, 6)) < 0.4).astype(np.uint8) for _ in range(3)]
    curve = pr_curve(probs, gts)
    r = [x[2] for x in curve.points]
    assert all(a >= b for a, b in zip(r, r[1:]))


def test_break_even_interpolates():
    pts = [(0.2, 0.4, 0.8), (0.4, 0.8, 0.6)]
    t, v = break_even_point(pts)
    # d goes from -0.4 to +0.2: crossing at a = 2/3
    assert t == pytest.approx(0.2 + (2 / 3) * 0.2)
    assert v == pytest.approx(0.4 + (2 / 3) * 0.4)


def test_break_even_without_crossing():
    t, v = break_even_point([(0.3, 0.9, 0.5), (0.6, 0.95, 0.4)])
    assert (t, v) == (0.3, pytest.approx(0.7))


def test_pr_accumulator_merge_equals_single(rng):
    probs = [rng.random((4, 4)) for _ in range(4)]
    gts = [rng.integers(0, 2, (4, 4)) for _ in range(4)]
    t = default_thresholds(9)
    whole = PRAccumulator(t)
    for p, g in zip(probs, gts):
        whole.add(p, g)
    a, b = PRAccumulator(t), PRAccumulator(t)
    a.add(probs[0], gts[0]).add(probs[1], gts[1])
    b.add(probs[2], gts[2]).add(probs[3], gts[3])
    merged = b.merge(a)
    assert merged.curve() == whole.curve()
    with pytest.raises(ValueError):
        a.merge(PRAccumulator(default_thresholds(3)))


def test_pr_curve_errors():
    with pytest.raises(ValueError):
        pr_curve([], [])
    with pytest.raises(ValueError):
        PRAccumulator(default_thresholds(3)).curve()


def test_pr_csv(tmp_path):
    gt = np.array([1, 0, 1, 0])
    curve = pr_curve([np.array([0.9, 0.2, 0.6, 0.4])], [gt], n_thresholds=4)
    curve.to_csv(tmp_path / "pr.csv")
    rows = list(csv.DictReader(open(tmp_path / "pr.csv")))
    assert len(rows) == 5 and rows[-1]["kind"] == "bep"
