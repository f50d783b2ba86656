"""Segmentation metric values, the brute-force oracle, and report formats."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from seunet_trans.metrics import (
    ConfusionCounts,
    confusion_counts,
    dataset_metrics,
    format_report_table,
    image_metrics,
    per_image_tsv,
    report_keyvalues,
)
from seunet_trans.tensor import ShapeError


def test_confusion_perfect_match():
    gt = np.zeros((4, 4))
    gt.flat[:5] = 1
    c = confusion_counts(gt, gt)
    assert (c.tp, c.fp, c.fn, c.tn) == (5, 0, 0, 11)


def test_confusion_partial_overlap():
    gt = np.zeros((4, 4))
    pred = np.zeros((4, 4))
    gt.flat[0:4] = 1
    pred.flat[2:6] = 1  # overlap pixels 2, 3
    c = confusion_counts(pred, gt)
    assert (c.tp, c.fp, c.fn, c.tn) == (2, 2, 2, 10)


def test_confusion_both_empty():
    zeros = np.zeros((3, 3))
    c = confusion_counts(zeros, zeros)
    assert (c.tp, c.fp, c.fn, c.tn) == (0, 0, 0, 9)


def test_confusion_validates_inputs():
    with pytest.raises(ShapeError):
        confusion_counts(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError, match="only 0 and 1"):
        confusion_counts(np.full((2, 2), 0.5), np.zeros((2, 2)))


def test_confusion_counts_partition_the_image():
    rng = np.random.default_rng(0)
    pred = (rng.random((8, 8)) > 0.4).astype(int)
    gt = (rng.random((8, 8)) > 0.6).astype(int)
    c = confusion_counts(pred, gt)
    assert c.total == 64


def test_image_metrics_hand_case():
    m = image_metrics(ConfusionCounts(tp=2, fp=2, fn=2, tn=10))
    assert_allclose(m.iou, 1.0 / 3.0)
    assert_allclose(m.dice, 0.5)
    assert_allclose(m.precision, 0.5)
    assert_allclose(m.recall, 0.5)


def test_image_metrics_perfect_match_all_ones():
    m = image_metrics(ConfusionCounts(tp=9, fp=0, fn=0, tn=7))
    assert (m.dice, m.iou, m.precision, m.recall) == (1.0, 1.0, 1.0, 1.0)


def test_image_metrics_empty_vs_empty_convention():
    m = image_metrics(ConfusionCounts(tp=0, fp=0, fn=0, tn=16))
    assert (m.dice, m.iou, m.precision, m.recall) == (1.0, 1.0, 1.0, 1.0)


def test_dataset_metrics_averages_per_image():
    gt1 = np.ones((1, 2, 2))
    pred1 = np.ones((1, 2, 2))  # DC 1.0
    gt2 = np.zeros((1, 2, 2))
    gt2[0, 0, :] = 1
    pred2 = np.zeros((1, 2, 2))
    pred2[0, :, 0] = 1  # TP=1, FP=1, FN=1: DC 0.5
    report = dataset_metrics([pred1, pred2], [gt1, gt2])
    assert_allclose(report.mdc, 0.75)
    assert report.image_count == 2


def test_dataset_metrics_single_image_equals_image_metrics():
    rng = np.random.default_rng(1)
    pred = rng.random((1, 8, 8))
    gt = (rng.random((1, 8, 8)) > 0.5).astype(float)
    report = dataset_metrics([pred], [gt])
    m = image_metrics(confusion_counts((pred >= 0.5).astype(int), gt))
    assert report.mdc == m.dice and report.miou == m.iou


def test_threshold_boundary_counts_positive():
    pred = np.full((1, 2, 2), 0.5)
    gt = np.ones((1, 2, 2))
    report = dataset_metrics([pred], [gt])
    assert report.mdc == 1.0


def test_dataset_metrics_rejects_empty_and_out_of_range():
    with pytest.raises(ValueError, match="at least one"):
        dataset_metrics([], [])
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        dataset_metrics([np.full((2, 2), 1.5)], [np.ones((2, 2))])


def test_metrics_match_brute_force_oracle_on_100_random_pairs():
    rng = np.random.default_rng(7)
    for _ in range(100):
        pred = (rng.random((16, 16)) > rng.uniform(0.2, 0.8)).astype(int)
        gt = (rng.random((16, 16)) > rng.uniform(0.2, 0.8)).astype(int)
        tp = fp = fn = tn = 0
        for i in range(16):
            for j in range(16):
                if pred[i, j] == 1 and gt[i, j] == 1:
                    tp += 1
                elif pred[i, j] == 1:
                    fp += 1
                elif gt[i, j] == 1:
                    fn += 1
                else:
                    tn += 1
        c = confusion_counts(pred, gt)
        assert (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, tn)
        m = image_metrics(c)
        assert m.dice == (2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 1.0)
        assert m.iou == (tp / (tp + fp + fn) if tp + fp + fn else 1.0)
        assert m.precision == (tp / (tp + fp) if tp + fp else 1.0)
        assert m.recall == (tp / (tp + fn) if tp + fn else 1.0)


def test_dice_iou_relation():
    rng = np.random.default_rng(9)
    for _ in range(50):
        pred = (rng.random((12, 12)) > 0.5).astype(int)
        gt = (rng.random((12, 12)) > 0.5).astype(int)
        m = image_metrics(confusion_counts(pred, gt))
        assert_allclose(m.dice, 2.0 * m.iou / (1.0 + m.iou), rtol=1e-12)


def test_metrics_invariant_to_joint_permutation():
    rng = np.random.default_rng(11)
    pred = (rng.random((10, 10)) > 0.5).astype(int)
    gt = (rng.random((10, 10)) > 0.5).astype(int)
    perm = rng.permutation(100)
    m1 = image_metrics(confusion_counts(pred, gt))
    m2 = image_metrics(confusion_counts(pred.reshape(-1)[perm], gt.reshape(-1)[perm]))
    assert m1 == m2


def test_report_formats():
    rng = np.random.default_rng(13)
    preds = [rng.random((1, 4, 4)) for _ in range(3)]
    gts = [(rng.random((1, 4, 4)) > 0.5).astype(float) for _ in range(3)]
    report = dataset_metrics(preds, gts)
    table = format_report_table(report)
    assert "mean" in table and table.count("\n") >= 6
    kv = report_keyvalues(report)
    assert kv.startswith("images=3\n") and "mDC=" in kv and "mRec=" in kv
    tsv = per_image_tsv(report)
    assert tsv.splitlines()[0].startswith("image\tdice")
    assert len(tsv.splitlines()) == 4
