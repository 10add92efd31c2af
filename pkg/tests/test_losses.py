import numpy as np
import pytest

from rrcdet import autograd as ag
from rrcdet.autograd import Tensor
from rrcdet.anchors import MatchResult
from rrcdet.losses import (
    attach_labels,
    classification_loss,
    flatten_offsets,
    flatten_scores,
    mined_negative_indices,
    regression_loss,
    total_loss,
)
from rrcdet.rolling import HeadOutput


def make_match(n_anchors, positives, regressors=2, labels=None):
    """positives: dict anchor_index -> (gt_index, bin, offsets)."""
    anchor_gt = np.full(n_anchors, -1, dtype=np.intp)
    bins = np.full(n_anchors, -1, dtype=np.intp)
    offsets = np.zeros((n_anchors, 4))
    for a, (g, r, off) in positives.items():
        anchor_gt[a] = g
        bins[a] = r
        offsets[a] = off
    result = MatchResult(anchor_gt=anchor_gt, bins=bins, offsets=offsets)
    n_gts = max((g for g, _, _ in positives.values()), default=-1) + 1
    return attach_labels(result, labels if labels is not None
                         else np.ones(n_gts, dtype=np.intp))


class TestSmoothL1Shape:
    def test_continuity_at_joint(self):
        eps = 1e-8
        below = ag.smooth_l1(Tensor([1.0 - eps])).data[0]
        above = ag.smooth_l1(Tensor([1.0 + eps])).data[0]
        assert abs(below - 0.5) < 1e-7 and abs(above - 0.5) < 1e-7
        # slopes from both branches approach 1
        x = Tensor([1.0 - 1e-4, 1.0 + 1e-4], requires_grad=True)
        ag.sum_all(ag.smooth_l1(x)).backward()
        np.testing.assert_allclose(x.grad, [1.0 - 1e-4, 1.0], atol=1e-3)


class TestClassification:
    def test_uniform_binary_scores_give_ln2(self):
        # one anchor, one positive, num_classes = 1, no negatives available
        scores = Tensor(np.zeros((1, 2)))
        match = make_match(1, {0: (0, 0, np.zeros(4))})
        loss = classification_loss(scores, match)
        assert float(loss.data) == pytest.approx(np.log(2))

    def test_confident_correct_scores_vanish(self):
        scores = np.full((8, 2), 0.0)
        scores[:, 0] = 40.0          # confident background everywhere
        scores[3, :] = (-40.0, 40.0)  # except the positive anchor
        match = make_match(8, {3: (0, 0, np.zeros(4))})
        loss = classification_loss(Tensor(scores), match)
        assert float(loss.data) < 1e-8

    def test_mining_selects_three_to_one(self):
        rng = np.random.default_rng(0)
        n = 52
        scores = Tensor(rng.standard_normal((n, 3)), requires_grad=True)
        match = make_match(
            n, {0: (0, 0, np.zeros(4)), 1: (1, 0, np.zeros(4))},
            labels=np.array([1, 2]))
        loss = classification_loss(scores, match)
        loss.backward()
        touched = np.flatnonzero(np.abs(scores.grad).sum(axis=1) > 0)
        assert len(touched) == 2 + 6  # 2 positives + 3:1 mined negatives

    def test_mined_negatives_are_hardest(self):
        bg = np.array([0.1, 5.0, 0.2, 4.0, 3.0])
        pos_mask = np.array([True, False, False, False, False])
        picked = mined_negative_indices(bg, pos_mask, n_positives=1, ratio=3)
        assert set(picked) == {1, 3, 4}

    def test_zero_positives_contribute_zero(self):
        scores = Tensor(np.random.default_rng(1).standard_normal((6, 2)))
        match = make_match(6, {})
        loss = classification_loss(scores, match)
        assert float(loss.data) == 0.0


class TestRegression:
    def test_zero_residual_zero_loss(self):
        offsets = Tensor(np.zeros((4 * 2, 4)))
        match = make_match(4, {1: (0, 1, np.zeros(4))})
        assert float(regression_loss(offsets, match).data) == 0.0

    def test_quadratic_and_linear_branches(self):
        # residual 0.5 in one coordinate -> 0.125; residual 2 -> 1.5
        offsets = np.zeros((2 * 1, 4))
        offsets[0, 0] = 0.5
        match = make_match(2, {0: (0, 0, np.zeros(4))}, regressors=1)
        loss = regression_loss(Tensor(offsets), match)
        assert float(loss.data) == pytest.approx(0.125)
        offsets[0, 0] = 2.0
        loss = regression_loss(Tensor(offsets), match)
        assert float(loss.data) == pytest.approx(1.5)

    def test_only_selected_bin_receives_gradient(self):
        n_anchors, regressors = 3, 4
        offsets = Tensor(np.random.default_rng(2).standard_normal(
            (n_anchors * regressors, 4)), requires_grad=True)
        match = make_match(n_anchors, {1: (0, 2, np.full(4, 0.3))},
                           regressors=regressors)
        regression_loss(offsets, match).backward()
        touched = np.flatnonzero(np.abs(offsets.grad).sum(axis=1) > 0)
        assert list(touched) == [1 * regressors + 2]

    def test_normalized_by_positive_count(self):
        offsets = np.zeros((4, 4))
        offsets[0, 0] = offsets[2, 0] = 2.0
        match_two = make_match(
            4, {0: (0, 0, np.zeros(4)), 2: (1, 0, np.zeros(4))}, regressors=1)
        loss = regression_loss(Tensor(offsets), match_two)
        assert float(loss.data) == pytest.approx(1.5)  # (1.5 + 1.5) / 2


class TestTotalLoss:
    def make_output(self, seed, n=1, h=2, w=2, a=1, classes=1, r=2):
        rng = np.random.default_rng(seed)
        cls = Tensor(rng.standard_normal((n, a * (classes + 1), h, w)))
        reg = Tensor(rng.standard_normal((n, a * r * 4, h, w)))
        return HeadOutput(t=1, cls_maps=[cls], reg_maps=[reg],
                          anchors_per_cell=a, num_classes=classes,
                          regressors=r)

    def test_single_output_equals_its_loss(self):
        out = self.make_output(3)
        match = make_match(4, {0: (0, 1, np.full(4, 0.2))})
        tensor, report = total_loss([out], match)
        assert report.total == pytest.approx(float(tensor.data))
        assert len(report.per_output) == 1

    def test_duplicated_output_doubles_contribution(self):
        out = self.make_output(4)
        match = make_match(4, {0: (0, 1, np.full(4, 0.2))})
        single, _ = total_loss([out], match)
        double, report = total_loss([out, self.make_output(4)], match)
        assert float(double.data) == pytest.approx(2 * float(single.data))
        assert report.per_output[0] == pytest.approx(report.per_output[1])

    def test_report_totals_are_consistent(self):
        outs = [self.make_output(s) for s in (5, 6, 7)]
        match = make_match(4, {2: (0, 0, np.full(4, -0.4))})
        tensor, report = total_loss(outs, match)
        assert report.total == pytest.approx(float(tensor.data))
        assert report.total == pytest.approx(
            sum(c + r for c, r in zip(report.per_output_cls,
                                      report.per_output_reg)))

    def test_zero_positive_image_flagged(self):
        out = self.make_output(8, n=2)
        matches = [make_match(4, {0: (0, 0, np.zeros(4))}), make_match(4, {})]
        _, report = total_loss([out], matches)
        assert report.images_without_positives == 1

    def test_gradient_flows_to_every_output(self):
        rng = np.random.default_rng(9)
        outs = []
        tensors = []
        for s in range(3):
            cls = Tensor(rng.standard_normal((1, 2, 2, 2)), requires_grad=True)
            reg = Tensor(rng.standard_normal((1, 8, 2, 2)), requires_grad=True)
            tensors.extend([cls, reg])
            outs.append(HeadOutput(t=s + 1, cls_maps=[cls], reg_maps=[reg],
                                   anchors_per_cell=1, num_classes=1,
                                   regressors=2))
        match = make_match(4, {0: (0, 1, np.full(4, 0.5))})
        tensor, _ = total_loss(outs, match)
        tensor.backward()
        for t in tensors:
            assert np.abs(t.grad).max() > 0

    def test_anchor_reorder_invariance(self):
        rng = np.random.default_rng(10)
        n_anchors, r = 6, 3
        scores = rng.standard_normal((n_anchors, 2))
        offsets = rng.standard_normal((n_anchors * r, 4))
        match = make_match(n_anchors, {1: (0, 2, np.full(4, 0.1)),
                                       4: (1, 0, np.full(4, -0.2))},
                           regressors=r)
        base_cls = float(classification_loss(Tensor(scores), match).data)
        base_reg = float(regression_loss(Tensor(offsets), match).data)

        perm = rng.permutation(n_anchors)
        scores_p = scores[perm]
        offsets_p = offsets.reshape(n_anchors, r, 4)[perm].reshape(-1, 4)
        match_p = MatchResult(anchor_gt=match.anchor_gt[perm],
                              bins=match.bins[perm],
                              offsets=match.offsets[perm],
                              anchor_labels=match.anchor_labels[perm])
        assert float(classification_loss(Tensor(scores_p), match_p).data) == \
            pytest.approx(base_cls)
        assert float(regression_loss(Tensor(offsets_p), match_p).data) == \
            pytest.approx(base_reg)


class TestFlatten:
    def test_score_rows_follow_anchor_order(self):
        # channel (a*K + c) at cell (i, j) must land at row (i*w + j)*A + a
        n, a, k, h, w = 1, 2, 3, 2, 2
        data = np.zeros((n, a * k, h, w))
        for ch in range(a * k):
            for i in range(h):
                for j in range(w):
                    data[0, ch, i, j] = ch + 10 * (i * w + j)
        out = HeadOutput(t=1, cls_maps=[Tensor(data)], reg_maps=[],
                         anchors_per_cell=a, num_classes=k - 1, regressors=1)
        rows = flatten_scores(out).data
        for cell in range(h * w):
            for ai in range(a):
                for c in range(k):
                    assert rows[cell * a + ai, c] == ai * k + c + 10 * cell

    def test_offset_rows_follow_bin_order(self):
        n, a, r, h, w = 1, 1, 2, 1, 2
        data = np.zeros((n, a * r * 4, h, w))
        for ch in range(a * r * 4):
            data[0, ch, 0, :] = [ch, 100 + ch]
        out = HeadOutput(t=1, cls_maps=[], reg_maps=[Tensor(data)],
                         anchors_per_cell=a, num_classes=1, regressors=r)
        rows = flatten_offsets(out).data
        np.testing.assert_array_equal(rows[0], [0, 1, 2, 3])       # cell 0 bin 0
        np.testing.assert_array_equal(rows[1], [4, 5, 6, 7])       # cell 0 bin 1
        np.testing.assert_array_equal(rows[2], [100, 101, 102, 103])
