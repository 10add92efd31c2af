"""Decoding head outputs into scored boxes, NMS, and output fusion.

At inference each anchor decodes only the regressor bin matching its own
scale position within its level's target interval; the other bins exist to
keep each regressor on a narrow training range. Fusion across rolling
iterations is union-then-NMS over the selected output indices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rrcdet import autograd as ag
from rrcdet.autograd import ContractError
from rrcdet.anchors import Anchors, decode, iou_matrix, regressor_bin
from rrcdet.rolling import HeadOutput


@dataclass
class Detection:
    """One scored, class-labeled box from one output index."""
    box: np.ndarray
    class_id: int
    score: float
    source: int


def _scores_array(output: HeadOutput) -> np.ndarray:
    """(N, total_anchors, K) class scores in anchor order."""
    a = output.anchors_per_cell
    k = output.num_classes + 1
    parts = []
    for m in output.cls_maps:
        n, _, h, w = m.shape
        t = m.data.reshape(n, a, k, h, w).transpose(0, 3, 4, 1, 2)
        parts.append(t.reshape(n, h * w * a, k))
    return np.concatenate(parts, axis=1)


def _offsets_array(output: HeadOutput) -> np.ndarray:
    """(N, total_anchors, R, 4) box offsets in anchor order."""
    a = output.anchors_per_cell
    r = output.regressors
    parts = []
    for m in output.reg_maps:
        n, _, h, w = m.shape
        t = m.data.reshape(n, a, r, 4, h, w).transpose(0, 4, 5, 1, 2, 3)
        parts.append(t.reshape(n, h * w * a, r, 4))
    return np.concatenate(parts, axis=1)


def _softmax(rows: np.ndarray) -> np.ndarray:
    e = np.exp(rows - rows.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def anchor_inference_bins(anchors: Anchors) -> np.ndarray:
    """The regressor bin each anchor decodes at inference (own-scale bin)."""
    return np.array([regressor_bin(anchors.boxes[i], anchors.spec,
                                   int(anchors.level_of[i]))
                     for i in range(len(anchors))], dtype=np.intp)


def decode_output(output: HeadOutput, anchors: Anchors,
                  score_threshold: float, image: int = 0) -> list[Detection]:
    """Scored boxes from one head output for one image of the batch."""
    probs = _softmax(_scores_array(output)[image])
    offsets = _offsets_array(output)[image]
    bins = anchor_inference_bins(anchors)
    chosen = offsets[np.arange(len(anchors)), bins]
    boxes = decode(chosen, anchors.boxes).clip(0.0, 1.0)
    detections = []
    for class_id in range(1, output.num_classes + 1):
        keep = np.flatnonzero(probs[:, class_id] >= score_threshold)
        for idx in keep:
            box = boxes[idx]
            if box[2] <= box[0] or box[3] <= box[1]:
                continue
            detections.append(Detection(box=box.copy(), class_id=class_id,
                                        score=float(probs[idx, class_id]),
                                        source=output.t))
    return detections


def _sort_key(det: Detection):
    return (-det.score, det.box[0], det.box[1], det.box[2], det.box[3],
            det.source)


def nms(detections: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class suppression of overlaps at IoU >= threshold.

    Ties break stably by (score descending, box lexicographic).
    """
    kept = []
    for class_id in sorted({d.class_id for d in detections}):
        group = sorted((d for d in detections if d.class_id == class_id),
                       key=_sort_key)
        boxes = np.array([d.box for d in group]).reshape(-1, 4)
        alive = np.ones(len(group), dtype=bool)
        for i in range(len(group)):
            if not alive[i]:
                continue
            kept.append(group[i])
            if not alive[i + 1:].any():
                continue
            overlaps = iou_matrix(boxes[i:i + 1], boxes[i + 1:])[0]
            alive[i + 1:] &= overlaps < iou_threshold
    return kept


def fuse(outputs: list[HeadOutput], select, anchors: Anchors,
         score_threshold: float, nms_threshold: float,
         image: int = 0) -> list[Detection]:
    """Union of the selected output indices (1-based), one NMS over it."""
    select = set(select)
    if not select:
        raise ContractError("fuse needs a non-empty output selection")
    available = {o.t for o in outputs}
    if not select <= available:
        raise ContractError(
            f"selected outputs {sorted(select)} not all available "
            f"(model has {sorted(available)})")
    pool = []
    for output in outputs:
        if output.t in select:
            pool.extend(decode_output(output, anchors, score_threshold, image))
    return nms(pool, nms_threshold)
