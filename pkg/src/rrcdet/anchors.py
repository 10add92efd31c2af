"""Default boxes, groundtruth matching, offset coding and scale binning.

Boxes are numpy arrays (..., 4) of (x_min, y_min, x_max, y_max) in
normalized image coordinates. Every function here is pure.

Each pyramid level owns one anchor scale; scales run linearly from the
smallest to the largest configured endpoint. A level's target-scale
interval (centered on its own scale, one inter-level spacing wide) is cut
into R equal sub-intervals, and a groundtruth box is routed to the
regressor of the sub-interval containing sqrt(w*h).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rrcdet.autograd import ContractError


@dataclass(frozen=True)
class AnchorSpec:
    """Per-level anchor layout: grid extents, scales, aspect ratios."""
    grid_shapes: tuple[tuple[int, int], ...]
    scales: tuple[float, ...]
    aspect_ratios: tuple[float, ...] = (1.0, 2.0, 0.5)
    regressors: int = 5

    def __post_init__(self):
        if len(self.scales) != len(self.grid_shapes):
            raise ContractError("one scale per pyramid level required")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ContractError("anchor scales must strictly increase")
        if any(s <= 0 or s > 1 for s in self.scales):
            raise ContractError("anchor scales must lie in (0, 1]")
        if self.regressors < 1:
            raise ContractError("regressor count must be positive")

    @classmethod
    def linear(cls, grid_shapes, scale_min: float = 0.066,
               scale_max: float = 0.85, aspect_ratios=(1.0, 2.0, 0.5),
               regressors: int = 5) -> "AnchorSpec":
        """Scales linearly interpolated between the two endpoints."""
        n = len(grid_shapes)
        if n == 1:
            scales = (scale_min,)
        else:
            step = (scale_max - scale_min) / (n - 1)
            scales = tuple(scale_min + k * step for k in range(n))
        return cls(grid_shapes=tuple(tuple(g) for g in grid_shapes),
                   scales=scales, aspect_ratios=tuple(aspect_ratios),
                   regressors=regressors)

    @property
    def anchors_per_cell(self) -> int:
        return len(self.aspect_ratios)

    def scale_interval(self, level: int) -> tuple[float, float]:
        """Target-scale interval served by a level, centered on its scale.

        The lower bound is clamped at zero; box scales are non-negative, so
        bins below zero would never receive a target.
        """
        s = self.scales[level]
        if len(self.scales) > 1:
            half = (self.scales[-1] - self.scales[0]) / (len(self.scales) - 1) / 2
        else:
            half = s / 2
        return max(s - half, 0.0), s + half


@dataclass
class Anchors:
    """Generated anchors: per-level arrays plus flattened views."""
    spec: AnchorSpec
    per_level: list[np.ndarray]          # (H*W*A, 4) each
    boxes: np.ndarray                    # (total, 4)
    level_of: np.ndarray                 # (total,) level index per anchor

    def __len__(self):
        return len(self.boxes)


def generate_anchors(spec: AnchorSpec) -> Anchors:
    """One anchor per (cell, aspect ratio), cell-centered, clipped to [0,1].

    Flattening order is (cell row-major, then aspect ratio) within a level,
    levels concatenated in order; detection heads emit channels in the same
    order.
    """
    per_level = []
    level_of = []
    for k, (gh, gw) in enumerate(spec.grid_shapes):
        s = spec.scales[k]
        cy, cx = np.meshgrid((np.arange(gh) + 0.5) / gh,
                             (np.arange(gw) + 0.5) / gw, indexing="ij")
        boxes = np.empty((gh, gw, spec.anchors_per_cell, 4))
        for a, ar in enumerate(spec.aspect_ratios):
            w = s * np.sqrt(ar)
            h = s / np.sqrt(ar)
            boxes[:, :, a, 0] = cx - w / 2
            boxes[:, :, a, 1] = cy - h / 2
            boxes[:, :, a, 2] = cx + w / 2
            boxes[:, :, a, 3] = cy + h / 2
        boxes = boxes.reshape(-1, 4).clip(0.0, 1.0)
        per_level.append(boxes)
        level_of.append(np.full(len(boxes), k, dtype=np.intp))
    return Anchors(spec=spec, per_level=per_level,
                   boxes=np.concatenate(per_level, axis=0),
                   level_of=np.concatenate(level_of))


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return ((boxes[..., 2] - boxes[..., 0]).clip(min=0.0) *
            (boxes[..., 3] - boxes[..., 1]).clip(min=0.0))


def iou(a, b) -> float:
    """Intersection over union of two boxes."""
    return float(iou_matrix(np.asarray(a).reshape(1, 4),
                            np.asarray(b).reshape(1, 4))[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clip(min=0.0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def encode(gt: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Offsets (dcx/w_a, dcy/h_a, ln(w_g/w_a), ln(h_g/h_a))."""
    gt = np.asarray(gt, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    gw = gt[..., 2] - gt[..., 0]
    gh = gt[..., 3] - gt[..., 1]
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise ContractError("groundtruth boxes must have positive extent")
    aw = anchor[..., 2] - anchor[..., 0]
    ah = anchor[..., 3] - anchor[..., 1]
    out = np.empty(np.broadcast(gt, anchor).shape[:-1] + (4,))
    out[..., 0] = ((gt[..., 0] + gt[..., 2]) - (anchor[..., 0] + anchor[..., 2])) / (2 * aw)
    out[..., 1] = ((gt[..., 1] + gt[..., 3]) - (anchor[..., 1] + anchor[..., 3])) / (2 * ah)
    out[..., 2] = np.log(gw / aw)
    out[..., 3] = np.log(gh / ah)
    return out


def decode(offsets: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Exact inverse of encode."""
    offsets = np.asarray(offsets, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    aw = anchor[..., 2] - anchor[..., 0]
    ah = anchor[..., 3] - anchor[..., 1]
    acx = (anchor[..., 0] + anchor[..., 2]) / 2
    acy = (anchor[..., 1] + anchor[..., 3]) / 2
    cx = offsets[..., 0] * aw + acx
    cy = offsets[..., 1] * ah + acy
    w = np.exp(offsets[..., 2]) * aw
    h = np.exp(offsets[..., 3]) * ah
    out = np.empty(np.broadcast(offsets, anchor).shape[:-1] + (4,))
    out[..., 0] = cx - w / 2
    out[..., 1] = cy - h / 2
    out[..., 2] = cx + w / 2
    out[..., 3] = cy + h / 2
    return out


def regressor_bin(gt, spec: AnchorSpec, level: int) -> int:
    """Sub-interval index of sqrt(w*h) within the level's scale interval."""
    gt = np.asarray(gt, dtype=np.float64)
    sigma = float(np.sqrt((gt[2] - gt[0]) * (gt[3] - gt[1])))
    lo, hi = spec.scale_interval(level)
    r = int(np.floor((sigma - lo) / (hi - lo) * spec.regressors))
    return min(max(r, 0), spec.regressors - 1)


@dataclass
class MatchResult:
    """Per-anchor assignment for one image.

    ``anchor_gt`` holds the matched groundtruth index or -1 for background;
    matched anchors also carry the regressor bin for their groundtruth's
    scale and the encoded offset target.
    """
    anchor_gt: np.ndarray        # (A,) intp, -1 = background
    bins: np.ndarray             # (A,) intp, -1 where background
    offsets: np.ndarray          # (A, 4), zeros where background
    anchor_labels: np.ndarray | None = None   # (A,) class ids, 0 = background

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.anchor_gt >= 0)

    @property
    def n_positives(self) -> int:
        return int((self.anchor_gt >= 0).sum())


def match(anchors: Anchors, groundtruth, threshold: float = 0.5) -> MatchResult:
    """Bipartite-then-threshold matching.

    Every groundtruth first claims its best-IoU anchor (greedy over pairs by
    descending IoU), then every remaining anchor with IoU >= threshold is
    assigned to its best groundtruth. Everything else is background.
    """
    n_anchors = len(anchors.boxes)
    assignment = np.full(n_anchors, -1, dtype=np.intp)
    gt_boxes = np.asarray(groundtruth, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes) == 0:
        return MatchResult(anchor_gt=assignment,
                           bins=np.full(n_anchors, -1, dtype=np.intp),
                           offsets=np.zeros((n_anchors, 4)))

    ious = iou_matrix(anchors.boxes, gt_boxes)
    work = ious.copy()
    for _ in range(min(len(gt_boxes), n_anchors)):
        a, g = np.unravel_index(np.argmax(work), work.shape)
        if work[a, g] < 0:
            break
        assignment[a] = g
        work[a, :] = -1.0   # anchor consumed
        work[:, g] = -1.0   # groundtruth satisfied

    free = assignment < 0
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n_anchors), best_gt]
    take = free & (best_iou >= threshold)
    assignment[take] = best_gt[take]

    bins = np.full(n_anchors, -1, dtype=np.intp)
    offsets = np.zeros((n_anchors, 4))
    pos = np.flatnonzero(assignment >= 0)
    if len(pos):
        matched = gt_boxes[assignment[pos]]
        offsets[pos] = encode(matched, anchors.boxes[pos])
        spec = anchors.spec
        intervals = np.array([spec.scale_interval(k)
                              for k in range(len(spec.scales))])
        lo = intervals[anchors.level_of[pos], 0]
        hi = intervals[anchors.level_of[pos], 1]
        sigma = np.sqrt((matched[:, 2] - matched[:, 0])
                        * (matched[:, 3] - matched[:, 1]))
        raw = np.floor((sigma - lo) / (hi - lo) * spec.regressors)
        bins[pos] = raw.clip(0, spec.regressors - 1).astype(np.intp)
    return MatchResult(anchor_gt=assignment, bins=bins, offsets=offsets)
