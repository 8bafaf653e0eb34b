import numpy as np
import pytest

from segxal.core import IGNORE, LabelMask, ProbMap, Sample
from segxal.metrics import EmptyEvalSetError, MetricsReport, compute_metrics, confusion_counts, iou_from_confusion

from conftest import flat_image, mask_of


def brute_force_iou(pred: np.ndarray, gt: np.ndarray, c: int) -> float:
    """Independent per-pixel loop for one class."""
    tp = fp = fn = 0
    for i in range(gt.shape[0]):
        for j in range(gt.shape[1]):
            if gt[i, j] == IGNORE:
                continue
            p, g = pred[i, j] == c, gt[i, j] == c
            tp += p and g
            fp += p and not g
            fn += g and not p
    return tp / (tp + fp + fn)


class FixedModel:
    """predict_probs stub returning stored one-hot maps per sample id."""

    def __init__(self, outputs: dict, num_classes: int):
        self.outputs = outputs
        self.num_classes = num_classes

    def predict_probs(self, image):
        labels = self.outputs[image.id]
        probs = np.full((self.num_classes,) + labels.shape, 1e-9)
        for c in range(self.num_classes):
            probs[c][labels == c] = 1.0
        return ProbMap(probs / probs.sum(axis=0, keepdims=True))


def sample_with_gt(sid, gt, num_classes=2):
    return Sample(image=flat_image(16, 16, image_id=sid), gt=mask_of(gt, num_classes))


class TestComputeMetrics:
    def test_perfect_prediction_gives_unit_iou(self, rng):
        gt = rng.integers(0, 3, (16, 16))
        model = FixedModel({"a": gt}, num_classes=3)
        report = compute_metrics(model, [sample_with_gt("a", gt, 3)])
        assert report.miou == 1.0
        assert all(v == 1.0 for v in report.per_class_iou.values())
        assert report.dice_stats["mean"] == 1.0

    def test_disjoint_class_has_zero_iou(self):
        gt = np.zeros((16, 16), dtype=int)
        gt[:8] = 1
        pred = np.zeros((16, 16), dtype=int)
        pred[8:] = 1  # class 1 predicted exactly where it is absent
        model = FixedModel({"a": pred}, num_classes=2)
        report = compute_metrics(model, [sample_with_gt("a", gt)])
        assert report.per_class_iou[1] == 0.0

    def test_hand_constructed_confusion_counts(self):
        # 4x4 two-class case: class 1 with TP=6, FP=2, FN=2 -> IoU = 6/10
        gt = np.zeros((4, 4), dtype=int)
        pred = np.zeros((4, 4), dtype=int)
        gt.flat[:8] = 1
        pred.flat[:6] = 1  # 6 true positives, misses 2
        pred.flat[8:10] = 1  # 2 false positives
        model = FixedModel({"a": pred}, num_classes=2)
        report = compute_metrics(model, [sample_with_gt("a", gt)])
        assert report.per_class_iou[1] == pytest.approx(0.6)
        assert report.per_class_iou[1] == pytest.approx(brute_force_iou(pred, gt, 1))

    def test_aggregation_over_samples_not_averaging(self):
        # confusion counts must be pooled before the ratio, not averaged
        gt1 = np.zeros((2, 2), dtype=int); gt1[0, 0] = 1
        gt2 = np.ones((2, 2), dtype=int)
        pred1 = np.zeros((2, 2), dtype=int)
        pred2 = np.ones((2, 2), dtype=int)
        model = FixedModel({"a": pred1, "b": pred2}, num_classes=2)
        report = compute_metrics(model, [sample_with_gt("a", gt1), sample_with_gt("b", gt2)])
        cm = confusion_counts(pred1, gt1, 2) + confusion_counts(pred2, gt2, 2)
        assert report.per_class_iou == iou_from_confusion(cm)

    def test_ignore_pixels_excluded(self):
        gt = np.zeros((4, 4), dtype=int)
        gt[0] = IGNORE
        pred = np.zeros((4, 4), dtype=int)
        pred[0] = 1  # wrong only where ignored
        model = FixedModel({"a": pred}, num_classes=2)
        report = compute_metrics(model, [sample_with_gt("a", gt)])
        assert report.miou == 1.0

    def test_miou_is_mean_over_present_classes(self):
        gt = np.zeros((4, 4), dtype=int)
        gt[0, :2] = 1
        pred = np.zeros((4, 4), dtype=int)  # class 1 never predicted
        model = FixedModel({"a": pred}, num_classes=3)
        report = compute_metrics(model, [sample_with_gt("a", gt, 3)])
        assert set(report.per_class_iou) == {0, 1}  # class 2 absent from gt
        assert report.miou == pytest.approx(np.mean(list(report.per_class_iou.values())))

    def test_empty_eval_set_rejected(self):
        with pytest.raises(EmptyEvalSetError):
            compute_metrics(FixedModel({}, 2), [])

    def test_eval_without_gt_rejected(self):
        s = Sample(image=flat_image(16, 16, image_id="x"))
        with pytest.raises(EmptyEvalSetError):
            compute_metrics(FixedModel({}, 2), [s])

    def test_report_dict_roundtrip(self):
        report = MetricsReport(per_class_iou={0: 1.0, 3: 0.5}, miou=0.75,
                               dice_stats={"mean": 0.8, "min": 0.7, "max": 0.9},
                               samples_labeled=12, wall_time=1.5)
        again = MetricsReport.from_dict(report.to_dict())
        assert again.per_class_iou == report.per_class_iou
        assert again.miou == report.miou
