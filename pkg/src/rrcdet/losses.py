"""Per-iteration detection losses.

Classification is softmax cross-entropy over matched positives plus hard
negatives mined at 3:1 (highest background loss first), regression is
smooth L1 on the matched regressor bin of each positive anchor. Both are
normalized by the image's positive count, averaged over the batch, and the
per-output losses sum with equal weight into the training loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rrcdet import autograd as ag
from rrcdet.autograd import ContractError, Tensor
from rrcdet.anchors import MatchResult
from rrcdet.rolling import HeadOutput


@dataclass
class LossReport:
    """Per-output loss breakdown for one forward pass."""
    per_output: list[float] = field(default_factory=list)
    per_output_cls: list[float] = field(default_factory=list)
    per_output_reg: list[float] = field(default_factory=list)
    images_without_positives: int = 0

    @property
    def total(self) -> float:
        return float(sum(self.per_output))


def attach_labels(result: MatchResult, gt_labels) -> MatchResult:
    """Record per-anchor class ids (0 = background) on a match result."""
    gt_labels = np.asarray(gt_labels, dtype=np.intp)
    labels = np.zeros(len(result.anchor_gt), dtype=np.intp)
    pos = result.positive_indices
    labels[pos] = gt_labels[result.anchor_gt[pos]]
    result.anchor_labels = labels
    return result


def _as_match_list(match) -> list[MatchResult]:
    return list(match) if isinstance(match, (list, tuple)) else [match]


def mined_negative_indices(background_loss: np.ndarray, positive_mask: np.ndarray,
                           n_positives: int, ratio: int = 3) -> np.ndarray:
    """Pick up to ratio * n_positives background anchors, hardest first."""
    candidates = np.flatnonzero(~positive_mask)
    if len(candidates) == 0 or n_positives == 0:
        return np.empty(0, dtype=np.intp)
    take = min(ratio * n_positives, len(candidates))
    order = np.argsort(-background_loss[candidates], kind="stable")
    return candidates[order[:take]]


def classification_loss(scores: Tensor, match, neg_ratio: int = 3) -> Tensor:
    """Cross-entropy over positives plus mined hard negatives.

    ``scores`` covers all anchors of all levels for one output, shape
    (n_images * anchors_per_image, num_classes + 1). Images with zero
    positives contribute zero.
    """
    matches = _as_match_list(match)
    n_images = len(matches)
    if scores.shape[0] % n_images:
        raise ContractError(
            f"{scores.shape[0]} score rows do not split over {n_images} images")
    per_image = scores.shape[0] // n_images

    log_probs = ag.log_softmax_rows(scores)
    bg_loss = -log_probs.data[:, 0]

    rows, cols, weights = [], [], []
    for i, m in enumerate(matches):
        if getattr(m, "anchor_labels", None) is None:
            raise ContractError("match result lacks class labels; call "
                                "attach_labels first")
        pos = m.positive_indices
        n_pos = len(pos)
        if n_pos == 0:
            continue
        base = i * per_image
        positive_mask = m.anchor_gt >= 0
        neg = mined_negative_indices(bg_loss[base:base + per_image],
                                     positive_mask, n_pos, neg_ratio)
        rows.extend(base + pos)
        cols.extend(m.anchor_labels[pos])
        rows.extend(base + neg)
        cols.extend(np.zeros(len(neg), dtype=np.intp))
        weights.extend([1.0 / (n_pos * n_images)] * (n_pos + len(neg)))

    if not rows:
        return Tensor(0.0)
    picked = ag.gather_elements(log_probs, np.asarray(rows), np.asarray(cols))
    return ag.scale(ag.sum_all(ag.mul(picked, np.asarray(weights))), -1.0)


def regression_loss(offsets: Tensor, match) -> Tensor:
    """Smooth L1 between predicted and encoded offsets on selected bins.

    ``offsets`` has shape (n_images * anchors_per_image * regressors, 4);
    only the regressor bin matched to each positive anchor's groundtruth
    scale receives gradient.
    """
    matches = _as_match_list(match)
    n_images = len(matches)
    n_anchor_rows = offsets.shape[0]
    if n_anchor_rows % n_images:
        raise ContractError(
            f"{n_anchor_rows} offset rows do not split over {n_images} images")
    rows_per_image = n_anchor_rows // n_images

    flat_rows, targets, weights = [], [], []
    for i, m in enumerate(matches):
        pos = m.positive_indices
        n_pos = len(pos)
        if n_pos == 0:
            continue
        regressors = rows_per_image // len(m.anchor_gt)
        base = i * rows_per_image
        flat_rows.extend(base + pos * regressors + m.bins[pos])
        targets.append(m.offsets[pos])
        weights.extend([1.0 / (n_pos * n_images)] * n_pos)

    if not flat_rows:
        return Tensor(0.0)
    predicted = ag.select_rows(offsets, np.asarray(flat_rows))
    residual = ag.sub(predicted, np.concatenate(targets, axis=0))
    per_coord = ag.smooth_l1(residual)
    weighted = ag.mul(per_coord, np.asarray(weights)[:, None])
    return ag.sum_all(weighted)


def flatten_scores(output: HeadOutput) -> Tensor:
    """Stack per-level class maps into (n_images * total_anchors, K) rows in
    anchor order (level, cell row-major, aspect ratio)."""
    a = output.anchors_per_cell
    k = output.num_classes + 1
    parts = []
    for m in output.cls_maps:
        n, _, h, w = m.shape
        t = ag.reshape(m, (n, a, k, h, w))
        t = ag.transpose(t, (0, 3, 4, 1, 2))
        parts.append(ag.reshape(t, (n, h * w * a, k)))
    return ag.reshape(ag.concat(parts, axis=1), (-1, k))


def flatten_offsets(output: HeadOutput) -> Tensor:
    """Stack per-level offset maps into (n_images * total_anchors * R, 4)."""
    a = output.anchors_per_cell
    r = output.regressors
    parts = []
    for m in output.reg_maps:
        n, _, h, w = m.shape
        t = ag.reshape(m, (n, a, r, 4, h, w))
        t = ag.transpose(t, (0, 4, 5, 1, 2, 3))
        parts.append(ag.reshape(t, (n, h * w * a * r, 4)))
    return ag.reshape(ag.concat(parts, axis=1), (-1, 4))


def output_loss(output: HeadOutput, match, neg_ratio: int = 3):
    """(classification, regression) loss tensors for one output."""
    cls = classification_loss(flatten_scores(output), match, neg_ratio)
    reg = regression_loss(flatten_offsets(output), match)
    return cls, reg


def total_loss(outputs: list[HeadOutput], match,
               neg_ratio: int = 3) -> tuple[Tensor, LossReport]:
    """Unweighted sum of per-output (classification + regression) losses."""
    matches = _as_match_list(match)
    report = LossReport(
        images_without_positives=sum(1 for m in matches if m.n_positives == 0))
    terms = []
    for output in outputs:
        cls, reg = output_loss(output, matches, neg_ratio)
        report.per_output_cls.append(float(cls.data))
        report.per_output_reg.append(float(reg.data))
        report.per_output.append(float(cls.data) + float(reg.data))
        terms.append(ag.add(cls, reg))
    total = terms[0]
    for term in terms[1:]:
        total = ag.add(total, term)
    return total, report
