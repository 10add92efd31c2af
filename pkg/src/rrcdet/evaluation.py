"""KITTI-style label ingestion and average-precision evaluation.

Labels follow the KITTI text layout: one object per line, 15 whitespace
separated fields (class, truncation, occlusion, alpha, 4 box coordinates in
pixels, 7 unused 3-D fields). Detection result files append a 16th score
field and fill the unused fields with -1/-1000 placeholders.

AP uses greedy score-ordered matching at a fixed IoU threshold. "DontCare"
regions are neither hit nor miss: detections landing on them are dropped
from the count, and they never enter the recall denominator. The default
integration samples the precision envelope at 40 equally spaced recall
points; an exact-envelope mode integrates the full curve for oracle
comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rrcdet.anchors import iou_matrix
from rrcdet.inference import Detection


class LabelParseError(ValueError):
    """A label line does not follow the 15-field layout."""


@dataclass
class GroundTruthRecord:
    class_name: str
    box: np.ndarray           # pixels, (x_min, y_min, x_max, y_max)
    truncation: float = 0.0
    occlusion: int = 0        # 0 visible .. 2 largely occluded, 3 unknown
    ignore: bool = False


@dataclass
class PRCurve:
    """Recall/precision points in detection order plus the AP scalar."""
    points: list[tuple[float, float]]
    ap: float | None
    iou_threshold: float


# difficulty filters: (min box height px, max occlusion, max truncation)
DIFFICULTY_LEVELS = {
    "easy": (40.0, 0, 0.15),
    "moderate": (25.0, 1, 0.30),
    "hard": (25.0, 2, 0.50),
}


def parse_labels(text: str) -> list[GroundTruthRecord]:
    """Parse a KITTI label file body into records."""
    records = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) < 15:
            raise LabelParseError(
                f"line {line_no}: expected >= 15 fields, got {len(fields)}")
        try:
            truncation = float(fields[1])
            occlusion = int(float(fields[2]))
            box = np.array([float(fields[4]), float(fields[5]),
                            float(fields[6]), float(fields[7])])
        except ValueError as exc:
            raise LabelParseError(f"line {line_no}: {exc}") from None
        name = fields[0]
        ignore = name == "DontCare"
        if occlusion < 0:
            occlusion = 3
        if occlusion > 3:
            raise LabelParseError(
                f"line {line_no}: occlusion {occlusion} outside 0..3")
        if box[2] <= box[0] or box[3] <= box[1]:
            raise LabelParseError(f"line {line_no}: degenerate box {box}")
        records.append(GroundTruthRecord(class_name=name, box=box,
                                         truncation=truncation,
                                         occlusion=occlusion, ignore=ignore))
    return records


def format_detection_line(class_name: str, box, score: float) -> str:
    """One result-file line: 15 KITTI fields plus the score."""
    x0, y0, x1, y1 = box
    return (f"{class_name} -1 -1 -10 {x0:.2f} {y0:.2f} {x1:.2f} {y1:.2f} "
            f"-1 -1 -1 -1000 -1000 -1000 -10 {score:.6f}")


def parse_detections(text: str):
    """Read a result file back into (class_name, box, score) triples."""
    out = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) < 16:
            raise LabelParseError(
                f"line {line_no}: result lines need 16 fields, got "
                f"{len(fields)}")
        box = np.array([float(fields[4]), float(fields[5]),
                        float(fields[6]), float(fields[7])])
        out.append((fields[0], box, float(fields[15])))
    return out


def difficulty_level(record: GroundTruthRecord) -> str | None:
    """Easiest difficulty the record qualifies for, or None."""
    height = record.box[3] - record.box[1]
    for name in ("easy", "moderate", "hard"):
        min_h, max_occ, max_trunc = DIFFICULTY_LEVELS[name]
        if (height >= min_h and record.occlusion <= max_occ
                and record.truncation <= max_trunc):
            return name
    return None


def filter_for_difficulty(records, level: str) -> list[GroundTruthRecord]:
    """Mark records not qualifying for ``level`` as ignore regions."""
    min_h, max_occ, max_trunc = DIFFICULTY_LEVELS[level]
    out = []
    for r in records:
        qualifies = (not r.ignore
                     and r.box[3] - r.box[1] >= min_h
                     and r.occlusion <= max_occ
                     and r.truncation <= max_trunc)
        out.append(GroundTruthRecord(class_name=r.class_name,
                                     box=r.box.copy(),
                                     truncation=r.truncation,
                                     occlusion=r.occlusion,
                                     ignore=r.ignore or not qualifies))
    return out


def _per_image(items):
    if items and not isinstance(items[0], (list, tuple)):
        return [list(items)]
    return [list(group) for group in items] or [[]]


def average_precision(dets, gts, iou_threshold: float,
                      mode: str = "kitti40") -> PRCurve:
    """AP for one class over one or more images.

    ``dets`` and ``gts`` are per-image lists (or bare lists for a single
    image). All records are treated as the same class; ignore records act
    as don't-care regions.
    """
    det_images = _per_image(dets)
    gt_images = _per_image(gts)
    if len(det_images) != len(gt_images):
        raise ValueError(
            f"{len(det_images)} detection images vs {len(gt_images)} "
            f"groundtruth images")

    n_gt = sum(1 for image in gt_images for g in image if not g.ignore)
    if n_gt == 0:
        return PRCurve(points=[], ap=None, iou_threshold=iou_threshold)

    order = []
    for img, image in enumerate(det_images):
        for det in image:
            order.append((img, det))
    order.sort(key=lambda pair: (-pair[1].score, pair[0], pair[1].box[0],
                                 pair[1].box[1], pair[1].box[2],
                                 pair[1].box[3]))

    matched = [np.zeros(len(image), dtype=bool) for image in gt_images]
    tp = fp = 0
    points = []
    for img, det in order:
        gts_here = gt_images[img]
        best_idx, best_iou = -1, 0.0
        best_ignored = False
        if gts_here:
            overlaps = iou_matrix(det.box.reshape(1, 4),
                                  np.array([g.box for g in gts_here]))[0]
            for gi, g in enumerate(gts_here):
                if overlaps[gi] < iou_threshold:
                    continue
                if g.ignore:
                    best_ignored = True
                    continue
                if not matched[img][gi] and overlaps[gi] > best_iou:
                    best_idx, best_iou = gi, overlaps[gi]
        if best_idx >= 0:
            matched[img][best_idx] = True
            tp += 1
        elif best_ignored:
            continue   # landed on a don't-care region: not counted
        else:
            fp += 1
        points.append((tp / n_gt, tp / (tp + fp)))

    return PRCurve(points=points, ap=_integrate(points, mode),
                   iou_threshold=iou_threshold)


def _integrate(points, mode: str) -> float:
    if mode == "exact":
        ap = 0.0
        prev_recall = 0.0
        recalls = [r for r, _ in points]
        for r, _ in points:
            if r <= prev_recall:
                continue
            envelope = max(p for rr, p in points if rr >= r)
            ap += (r - prev_recall) * envelope
            prev_recall = r
        return ap
    if mode == "kitti40":
        total = 0.0
        for i in range(1, 41):
            target = i / 40.0
            cands = [p for r, p in points if r >= target - 1e-12]
            total += max(cands) if cands else 0.0
        return total / 40.0
    raise ValueError(f"unknown AP mode {mode!r}")


@dataclass
class SweepTable:
    """AP per class per IoU threshold, plus the cross-class mean."""
    thresholds: list[float]
    rows: dict[str, list[float | None]]

    def mean_row(self) -> list[float | None]:
        out = []
        for col in range(len(self.thresholds)):
            vals = [row[col] for row in self.rows.values()
                    if row[col] is not None]
            out.append(sum(vals) / len(vals) if vals else None)
        return out

    def to_text(self) -> str:
        def fmt(v):
            return "   --  " if v is None else f"{100 * v:6.2f}%"
        width = max([len(name) for name in self.rows] + [4])
        header = " ".join(f"{t:>7.2f}" for t in self.thresholds)
        lines = [f"{'AP':<{width}} {header}"]
        for name, row in sorted(self.rows.items()):
            lines.append(f"{name:<{width}} " + " ".join(fmt(v) for v in row))
        lines.append(f"{'mAP':<{width}} "
                     + " ".join(fmt(v) for v in self.mean_row()))
        return "\n".join(lines)

    def to_csv(self) -> str:
        lines = ["class," + ",".join(str(t) for t in self.thresholds)]
        for name, row in sorted(self.rows.items()):
            cells = ["" if v is None else f"{v:.6f}" for v in row]
            lines.append(name + "," + ",".join(cells))
        cells = ["" if v is None else f"{v:.6f}" for v in self.mean_row()]
        lines.append("mean," + ",".join(cells))
        return "\n".join(lines)


def map_sweep(dets, gts, thresholds, class_names, mode: str = "kitti40",
              pr_curves: dict | None = None) -> SweepTable:
    """AP per class for each IoU threshold.

    ``dets``/``gts`` are per-image lists; detections carry integer class
    ids indexing ``class_names`` (id 1 is class_names[0]). Ignore records
    apply to every class.
    """
    det_images = _per_image(dets)
    gt_images = _per_image(gts)
    rows = {}
    for class_id, name in enumerate(class_names, start=1):
        class_dets = [[d for d in image if d.class_id == class_id]
                      for image in det_images]
        class_gts = [[g for g in image if g.ignore or g.class_name == name]
                     for image in gt_images]
        row = []
        for thr in thresholds:
            curve = average_precision(class_dets, class_gts, thr, mode=mode)
            row.append(curve.ap)
            if pr_curves is not None:
                pr_curves[(name, thr)] = curve
        rows[name] = row
    return SweepTable(thresholds=list(thresholds), rows=rows)
