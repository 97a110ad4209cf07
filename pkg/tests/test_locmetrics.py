import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.metrics import average_precision_score, roc_auc_score

from agx.locmetrics import (BBox, EvalConfig, LocalizationReport, auprc, auroc, cam_to_boxes,
                            connected_components, iou, match_and_score, quantile_threshold,
                            regions_to_boxes, upsample_bilinear)
from oracles import auroc_pairs, flood_fill_boxes, pixel_iou, quantile_sorted


# -- thresholding ----------------------------------------------------------------

def test_quantile_on_1_to_16():
    cam = np.arange(1, 17, dtype=float).reshape(4, 4)
    assert quantile_sorted(cam, 0.95) == pytest.approx(15.25)
    mask = quantile_threshold(cam, 0.95)
    assert mask.sum() == 1 and mask[3, 3]


def test_constant_map_gives_empty_mask():
    assert not quantile_threshold(np.full((5, 5), 0.3), 0.95).any()


def test_tiny_q_keeps_everything_above_minimum():
    cam = np.random.default_rng(1).random((6, 6))
    np.testing.assert_array_equal(quantile_threshold(cam, 1e-9), cam > cam.min())


@given(arrays(np.float64, (7, 7), elements=st.floats(-5, 5)), st.floats(0.01, 0.98), st.floats(0.0, 0.2))
def test_raising_q_never_grows_mask(cam, q, dq):
    q2 = min(q + dq, 0.99)
    assert not (quantile_threshold(cam, q2) & ~quantile_threshold(cam, q)).any()


@given(arrays(np.float64, (8, 8), elements=st.floats(-5, 5)), st.sampled_from([0.5, 3.0, 1e3]))
def test_positive_scaling_changes_nothing(cam, c):
    cfg = EvalConfig()
    np.testing.assert_array_equal(quantile_threshold(cam, 0.9), quantile_threshold(cam * c, 0.9))
    assert cam_to_boxes(cam, cfg) == cam_to_boxes(cam * c, cfg)


# -- components and boxes --------------------------------------------------------

def test_diagonal_pixels_and_connectivity():
    mask = np.array([[1, 0], [0, 1]], bool)
    assert len(connected_components(mask, 8)) == 1
    assert len(connected_components(mask, 4)) == 2


def test_empty_mask_has_no_regions():
    assert connected_components(np.zeros((4, 4), bool)) == []


def test_single_pixel_box():
    # pixel at x=2, y=3
    assert regions_to_boxes([np.array([[3, 2]])])[0].as_list() == [2, 3, 3, 4]


def test_l_shape_hull():
    region = np.array([[1, 0], [2, 0], [3, 0], [3, 1], [3, 2]])
    assert regions_to_boxes([region])[0].as_list() == [0, 1, 3, 4]


@pytest.mark.parametrize("connectivity", [4, 8])
def test_random_masks_match_flood_fill(connectivity):
    rng = np.random.default_rng(42)
    for _ in range(50):
        mask = rng.random((16, 16)) < rng.uniform(0.1, 0.6)
        regions = connected_components(mask, connectivity)
        got = [tuple(b.as_list()) for b in regions_to_boxes(regions)]
        assert got == flood_fill_boxes(mask, connectivity)


@given(arrays(bool, (9, 9)), st.sampled_from([4, 8]))
def test_regions_partition_the_mask(mask, connectivity):
    regions = connected_components(mask, connectivity)
    painted = np.zeros(mask.shape, int)
    for r in regions:
        painted[r[:, 0], r[:, 1]] += 1
    np.testing.assert_array_equal(painted, mask.astype(int))


def test_boxes_from_random_cams_match_oracle_pipeline():
    rng = np.random.default_rng(7)
    cfg = EvalConfig()
    for _ in range(50):
        cam = rng.normal(size=(12, 12))
        mask = cam > quantile_sorted(cam, cfg.quantile)
        assert [tuple(b.as_list()) for b in cam_to_boxes(cam, cfg)] == flood_fill_boxes(mask)


def test_upsampling_keeps_constant_and_shape():
    up = upsample_bilinear(np.full((3, 3), 2.5), (12, 12))
    assert up.shape == (12, 12)
    np.testing.assert_allclose(up, 2.5)


def test_upsampling_preserves_order_of_a_single_peak():
    cam = np.zeros((4, 4))
    cam[1, 2] = 1.0
    up = upsample_bilinear(cam, (16, 16))
    r, c = np.unravel_index(np.argmax(up), up.shape)
    assert 4 <= r < 8 and 8 <= c < 12


# -- IoU and matching ------------------------------------------------------------

def test_iou_hand_cases():
    a = BBox(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(5, 5, 7, 7)) == 0.0
    assert abs(iou(a, BBox(1, 0, 3, 2)) - 1 / 3) < 1e-12


def test_degenerate_box_rejected():
    with pytest.raises(ValueError):
        BBox(2, 0, 2, 5)


box_st = st.tuples(st.integers(0, 30), st.integers(0, 30), st.integers(1, 20), st.integers(1, 20)).map(
    lambda t: BBox(t[0], t[1], t[0] + t[2], t[1] + t[3]))


@given(box_st, box_st)
def test_iou_symmetric_bounded_and_matches_pixels(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0
    assert iou(a, a) == 1.0
    assert v == pytest.approx(pixel_iou(a.as_list(), b.as_list()), abs=1e-12)


def test_match_example_two_gt_three_pred():
    gt = [BBox(0, 0, 10, 10), BBox(30, 30, 40, 40)]
    # IoU with the first GT: 40 / 100 = 0.4
    pred = [BBox(0, 0, 10, 4), BBox(60, 60, 62, 62), BBox(50, 0, 55, 5)]
    assert iou(pred[0], gt[0]) == pytest.approx(0.4)
    r = match_and_score(pred, gt, 0.25)
    assert (r.recall, r.precision, r.true_positives) == (0.5, pytest.approx(1 / 3), 1)


def test_exact_prediction_is_perfect_at_any_threshold():
    gt = [BBox(3, 3, 9, 9)]
    for T in (0.1, 0.5, 0.99):
        r = match_and_score(gt, gt, T)
        assert r.recall == 1.0 and r.precision == 1.0


def test_empty_prediction_and_empty_gt():
    r = match_and_score([], [BBox(0, 0, 2, 2)], 0.5)
    assert r.recall == 0.0 and r.precision is None
    assert match_and_score([BBox(0, 0, 2, 2)], [], 0.5).recall is None
    with pytest.raises(ValueError):
        match_and_score([], [], 0.0)


@given(st.lists(box_st, max_size=5), st.lists(box_st, max_size=5), st.sampled_from([0.1, 0.25, 0.5]))
def test_match_bounds(pred, gt, T):
    r = match_and_score(pred, gt, T)
    assert r.true_positives <= len(pred)
    assert r.gt_covered <= len(gt)
    for v in (r.recall, r.precision):
        assert v is None or 0.0 <= v <= 1.0


def test_report_pools_counts_and_image_recall():
    rep = LocalizationReport()
    rep.add("opacity", 0.1, match_and_score([BBox(0, 0, 4, 4)], [BBox(0, 0, 4, 4), BBox(8, 8, 9, 9)], 0.1))
    rep.add("opacity", 0.1, match_and_score([], [BBox(0, 0, 4, 4)], 0.1))
    s = rep.summary()["opacity"]["0.1"]
    assert s["n_gt"] == 3 and s["gt_covered"] == 1
    assert s["recall"] == pytest.approx(1 / 3)
    assert s["image_recall"] == 0.5
    assert rep.recall("opacity", 0.1) == pytest.approx(1 / 3)


def test_eval_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(quantile=1.0)
    with pytest.raises(ValueError):
        EvalConfig(connectivity=6)
    with pytest.raises(ValueError):
        EvalConfig(iou_thresholds=(0.0,))


# -- ranking metrics -------------------------------------------------------------

def test_perfect_and_inverted_scores():
    y = np.array([0, 0, 1, 1])
    s = np.array([0.1, 0.2, 0.8, 0.9])
    assert auroc(s, y) == 1.0 and auprc(s, y) == 1.0
    assert auroc(-s, y) == 0.0


def test_single_class_rejected():
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        auprc([0.1, 0.2], [0, 0])


def test_random_scores_near_half():
    rng = np.random.default_rng(3)
    y = np.r_[np.ones(5000), np.zeros(5000)].astype(bool)
    s = rng.random(10_000)
    assert abs(auroc(s, y) - 0.5) <= 0.02
    assert abs(auprc(s, y) - 0.5) <= 0.02


@given(st.lists(st.tuples(st.integers(0, 6).map(lambda v: v / 6), st.booleans()), min_size=2, max_size=40))
def test_metrics_match_reference_implementations(pairs):
    s = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    if y.all() or not y.any():
        return
    assert auroc(s, y) == pytest.approx(roc_auc_score(y, s), abs=1e-12)
    assert auroc(s, y) == pytest.approx(auroc_pairs(s, y), abs=1e-12)
    assert auprc(s, y) == pytest.approx(average_precision_score(y, s), abs=1e-12)
