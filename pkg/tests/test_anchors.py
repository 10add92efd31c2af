import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rrcdet.anchors import (
    AnchorSpec,
    Anchors,
    decode,
    encode,
    generate_anchors,
    iou,
    iou_matrix,
    match,
    regressor_bin,
)
from rrcdet.autograd import ContractError


def anchors_from_boxes(boxes, scales=None, regressors=5):
    """Wrap explicit boxes as a one-level anchor set for matching tests."""
    boxes = np.asarray(boxes, dtype=np.float64)
    spec = AnchorSpec(grid_shapes=((1, 1),),
                      scales=scales or (0.5,),
                      aspect_ratios=tuple(range(1, len(boxes) + 1)),
                      regressors=regressors)
    return Anchors(spec=spec, per_level=[boxes], boxes=boxes,
                   level_of=np.zeros(len(boxes), dtype=np.intp))


class TestGenerate:
    def test_single_cell_single_ratio(self):
        spec = AnchorSpec(grid_shapes=((1, 1),), scales=(0.5,),
                          aspect_ratios=(1.0,))
        anchors = generate_anchors(spec)
        np.testing.assert_allclose(anchors.boxes,
                                   [[0.25, 0.25, 0.75, 0.75]])

    def test_five_level_scale_interpolation(self):
        spec = AnchorSpec.linear([(32, 32), (16, 16), (8, 8), (4, 4), (2, 2)])
        np.testing.assert_allclose(spec.scales,
                                   (0.066, 0.262, 0.458, 0.654, 0.85))

    def test_scale_endpoints(self):
        spec = AnchorSpec.linear([(8, 8), (4, 4)])
        assert spec.scales[0] == pytest.approx(0.066)
        assert spec.scales[-1] == pytest.approx(0.85)

    def test_count_and_order(self):
        spec = AnchorSpec(grid_shapes=((2, 3),), scales=(0.2,),
                          aspect_ratios=(1.0, 2.0))
        anchors = generate_anchors(spec)
        assert len(anchors) == 2 * 3 * 2
        # first two rows: both ratios of cell (0, 0)
        c0 = anchors.boxes[0]
        c1 = anchors.boxes[1]
        assert (c0[0] + c0[2]) / 2 == pytest.approx((c1[0] + c1[2]) / 2)
        # next pair moves one cell to the right
        c2 = anchors.boxes[2]
        assert (c2[0] + c2[2]) / 2 > (c0[0] + c0[2]) / 2

    def test_clipping_keeps_boxes_valid(self):
        spec = AnchorSpec(grid_shapes=((4, 4),), scales=(0.9,),
                          aspect_ratios=(1.0, 3.0, 1 / 3.0))
        anchors = generate_anchors(spec)
        assert np.all(anchors.boxes >= 0) and np.all(anchors.boxes <= 1)
        assert np.all(anchors.boxes[:, 2] > anchors.boxes[:, 0])
        assert np.all(anchors.boxes[:, 3] > anchors.boxes[:, 1])


class TestIoU:
    def test_identical(self):
        assert iou([0.1, 0.1, 0.4, 0.5], [0.1, 0.1, 0.4, 0.5]) == 1.0

    def test_disjoint(self):
        assert iou([0, 0, 0.2, 0.2], [0.5, 0.5, 0.9, 0.9]) == 0.0

    def test_half_overlap(self):
        assert iou([0, 0, 1, 1], [0.5, 0, 1, 1]) == pytest.approx(0.5)

    @given(st.lists(st.floats(0.0, 1.0), min_size=8, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_symmetry_and_self(self, vals):
        def to_box(v):
            x0, x1 = sorted(v[:2])
            y0, y1 = sorted(v[2:])
            return [x0, y0, x1 + 0.01, y1 + 0.01]
        a, b = to_box(vals[:4]), to_box(vals[4:])
        assert iou(a, b) == pytest.approx(iou(b, a))
        assert iou(a, a) == pytest.approx(1.0)


class TestEncodeDecode:
    def test_identity(self):
        box = np.array([0.2, 0.3, 0.6, 0.7])
        np.testing.assert_allclose(encode(box, box), np.zeros(4), atol=1e-15)

    def test_double_width(self):
        anchor = np.array([0.4, 0.4, 0.6, 0.6])
        gt = np.array([0.3, 0.4, 0.7, 0.6])
        np.testing.assert_allclose(encode(gt, anchor),
                                   [0, 0, np.log(2), 0], atol=1e-12)

    @given(st.lists(st.floats(0.05, 0.95), min_size=8, max_size=8))
    @settings(max_examples=100, deadline=None)
    def test_round_trip(self, vals):
        def to_box(v):
            x0, x1 = sorted(v[:2])
            y0, y1 = sorted(v[2:])
            return np.array([x0, y0, x1 + 0.02, y1 + 0.02])
        gt, anchor = to_box(vals[:4]), to_box(vals[4:])
        np.testing.assert_allclose(decode(encode(gt, anchor), anchor), gt,
                                   atol=1e-12)

    def test_degenerate_gt_rejected(self):
        with pytest.raises(ContractError):
            encode(np.array([0.5, 0.5, 0.5, 0.7]),
                   np.array([0.2, 0.2, 0.6, 0.6]))


class TestRegressorBin:
    def test_single_regressor(self):
        spec = AnchorSpec.linear([(4, 4), (2, 2)], regressors=1)
        gt = np.array([0.1, 0.1, 0.4, 0.4])
        assert regressor_bin(gt, spec, 0) == 0
        assert regressor_bin(gt, spec, 1) == 0

    def test_midpoint_lands_in_middle_bin(self):
        spec = AnchorSpec.linear([(8, 8), (4, 4), (2, 2)], regressors=5)
        s = spec.scales[1]
        gt = np.array([0.5 - s / 2, 0.5 - s / 2, 0.5 + s / 2, 0.5 + s / 2])
        assert regressor_bin(gt, spec, 1) == 2

    def test_bins_partition_interval(self):
        spec = AnchorSpec.linear([(32, 32), (16, 16), (8, 8), (4, 4), (2, 2)],
                                 regressors=5)
        lo, hi = spec.scale_interval(1)
        assert lo > 0
        seen = []
        for sigma in np.linspace(lo + 1e-9, hi - 1e-9, 50):
            gt = np.array([0.5 - sigma / 2, 0.5 - sigma / 2,
                           0.5 + sigma / 2, 0.5 + sigma / 2])
            seen.append(regressor_bin(gt, spec, 1))
        assert sorted(set(seen)) == [0, 1, 2, 3, 4]
        assert seen == sorted(seen)

    def test_out_of_interval_clamps(self):
        spec = AnchorSpec.linear([(8, 8), (4, 4)], regressors=5)
        tiny = np.array([0.49, 0.49, 0.51, 0.51])
        huge = np.array([0.0, 0.0, 1.0, 1.0])
        assert regressor_bin(tiny, spec, 1) == 0
        assert regressor_bin(huge, spec, 0) == 4


class TestMatch:
    def test_exact_anchor_match(self):
        anchors = anchors_from_boxes([[0.1, 0.1, 0.3, 0.3],
                                      [0.6, 0.6, 0.9, 0.9],
                                      [0.0, 0.0, 1.0, 1.0]])
        result = match(anchors, [[0.1, 0.1, 0.3, 0.3]])
        assert result.anchor_gt[0] == 0
        assert result.anchor_gt[1] == -1
        assert result.anchor_gt[2] == -1
        np.testing.assert_allclose(result.offsets[0], np.zeros(4), atol=1e-12)

    def test_empty_groundtruth_all_background(self):
        anchors = anchors_from_boxes([[0.1, 0.1, 0.3, 0.3]])
        result = match(anchors, [])
        assert result.n_positives == 0

    def test_contested_anchor_goes_to_higher_iou_gt(self):
        # one anchor is initially best for both groundtruths; the greedy
        # order resolves by descending IoU and the loser falls back
        boxes = np.array([
            [0.00, 0.00, 0.40, 0.40],   # contested, good for both
            [0.05, 0.05, 0.60, 0.60],   # second-best for gt B
            [0.70, 0.70, 0.90, 0.90],   # far away
            [0.00, 0.60, 0.20, 0.90],   # far away
        ])
        gt_a = [0.00, 0.00, 0.38, 0.38]   # IoU with anchor0 very high
        gt_b = [0.02, 0.02, 0.42, 0.42]   # best anchor also anchor0
        anchors = anchors_from_boxes(boxes)
        ious = iou_matrix(boxes, np.array([gt_a, gt_b]))
        assert ious[0, 0] > ious[0, 1]          # fixture sanity
        assert ious[:, 1].argmax() == 0
        result = match(anchors, [gt_a, gt_b], threshold=0.99)

        # brute-force oracle: claim pairs in global descending-IoU order
        expect = np.full(4, -1)
        pairs = sorted(((ious[a, g], a, g) for a in range(4) for g in range(2)),
                       reverse=True)
        gts_done, anchors_done = set(), set()
        for overlap, a, g in pairs:
            if g in gts_done or a in anchors_done:
                continue
            expect[a] = g
            gts_done.add(g)
            anchors_done.add(a)
        np.testing.assert_array_equal(result.anchor_gt, expect)
        assert result.anchor_gt[0] == 0 and result.anchor_gt[1] == 1

    def test_every_groundtruth_matched(self):
        rng = np.random.default_rng(0)
        spec = AnchorSpec.linear([(6, 6), (3, 3)], regressors=3)
        anchors = generate_anchors(spec)
        for _ in range(20):
            gts = []
            for _ in range(rng.integers(1, 5)):
                cx, cy = rng.uniform(0.2, 0.8, 2)
                w, h = rng.uniform(0.05, 0.3, 2)
                gts.append([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])
            result = match(anchors, gts)
            matched = set(result.anchor_gt[result.anchor_gt >= 0])
            assert matched == set(range(len(gts)))

    def test_threshold_monotonicity(self):
        rng = np.random.default_rng(1)
        spec = AnchorSpec.linear([(6, 6), (3, 3)])
        anchors = generate_anchors(spec)
        for _ in range(10):
            cx, cy = rng.uniform(0.3, 0.7, 2)
            w, h = rng.uniform(0.1, 0.4, 2)
            gts = [[cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2]]
            counts = [match(anchors, gts, threshold=t).n_positives
                      for t in (0.3, 0.5, 0.7, 0.9)]
            assert counts == sorted(counts, reverse=True)

    def test_bins_follow_groundtruth_scale(self):
        spec = AnchorSpec.linear([(6, 6), (3, 3)], regressors=5)
        anchors = generate_anchors(spec)
        gt = [0.4, 0.4, 0.4 + 0.262, 0.4 + 0.262]
        result = match(anchors, [gt])
        for a in result.positive_indices:
            expected = regressor_bin(np.asarray(gt), spec,
                                     int(anchors.level_of[a]))
            assert result.bins[a] == expected
