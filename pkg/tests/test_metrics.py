import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from h2onet.indices import IGNORE
from h2onet.metrics import ConfusionMatrix, accumulate, fw_iou, mean_iou, pixel_accuracy, report


def test_hand_computed_matrix():
    cm = ConfusionMatrix(counts=[[3, 1], [2, 4]])
    assert abs(pixel_accuracy(cm) - 0.7) <= 1e-9
    # IoU_0 = 3/6, IoU_1 = 4/7
    assert abs(mean_iou(cm) - (0.5 + 4 / 7) / 2) <= 1e-9
    assert abs(mean_iou(cm) - 0.5357142857142857) <= 1e-9
    assert abs(fw_iou(cm) - (4 * 0.5 + 6 * 4 / 7) / 10) <= 1e-9
    assert abs(fw_iou(cm) - 0.5428571428571428) <= 1e-9


def test_perfect_prediction():
    truth = np.array([[0, 1], [1, 0]])
    assert report(accumulate(ConfusionMatrix(), truth, truth)) == {"PA": 1.0, "mIoU": 1.0, "FW-IoU": 1.0}


def test_all_wrong():
    truth = np.array([[0, 1], [1, 0]])
    assert report(accumulate(ConfusionMatrix(), 1 - truth, truth)) == {"PA": 0.0, "mIoU": 0.0, "FW-IoU": 0.0}


def test_single_class_scene_skips_empty_union():
    truth = np.zeros((3, 3), dtype=int)
    r = report(accumulate(ConfusionMatrix(), truth, truth))
    assert r == {"PA": 1.0, "mIoU": 1.0, "FW-IoU": 1.0}


def test_four_pixel_case():
    truth = np.array([1, 1, 0, 0])
    pred = np.array([1, 0, 0, 0])
    cm = accumulate(ConfusionMatrix(), pred, truth)
    assert cm.counts.tolist() == [[2, 0], [1, 1]]
    assert pixel_accuracy(cm) == 0.75
    assert mean_iou(cm) == pytest.approx((2 / 3 + 1 / 2) / 2, abs=1e-12)
    assert fw_iou(cm) == pytest.approx((2 * 2 / 3 + 2 * 1 / 2) / 4, abs=1e-12)


def test_ignore_pixels_are_skipped():
    truth = np.array([1, IGNORE, 0])
    cm = accumulate(ConfusionMatrix(), np.array([1, 0, 0]), truth)
    assert cm.total == 2


def test_empty_matrix_is_nan():
    assert np.isnan(pixel_accuracy(ConfusionMatrix()))
    assert np.isnan(mean_iou(ConfusionMatrix()))
    assert np.isnan(fw_iou(ConfusionMatrix()))


def test_bad_inputs():
    with pytest.raises(ValueError):
        accumulate(ConfusionMatrix(), np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        accumulate(ConfusionMatrix(), np.array([2]), np.array([0]))
    with pytest.raises(ValueError):
        ConfusionMatrix(counts=[[1, -1], [0, 0]])


labels = st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=200)


@given(labels, st.randoms())
@settings(max_examples=60, deadline=None)
def test_metric_properties(pairs, rnd):
    pred = np.array([p for p, _ in pairs])
    truth = np.array([t for _, t in pairs])
    r = report(accumulate(ConfusionMatrix(), pred, truth))
    for v in r.values():
        assert 0.0 <= v <= 1.0
    perm = list(range(len(pairs)))
    rnd.shuffle(perm)
    assert report(accumulate(ConfusionMatrix(), pred[perm], truth[perm])) == r
    # accumulation over halves equals one pass
    k = len(pairs) // 2
    halves = accumulate(ConfusionMatrix(), pred[:k], truth[:k]) + accumulate(ConfusionMatrix(), pred[k:], truth[k:])
    assert report(halves) == r


@given(st.integers(0, 50), st.integers(0, 50), st.integers(1, 50))
@settings(max_examples=40, deadline=None)
def test_balanced_classes_fw_equals_miou(a, b, n):
    # equal class totals make frequency weighting uniform
    cm = ConfusionMatrix(counts=[[n, a], [b, n + a - b]] if n + a - b >= 0 else [[n + b - a, a], [b, n]])
    assert cm.totals[0] == cm.totals[1]
    assert fw_iou(cm) == pytest.approx(mean_iou(cm), abs=1e-12)
