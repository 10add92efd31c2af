"""Synthetic scene generation, augmentation, splits, and file I/O.

Scenes are textured backgrounds with filled rectangles and ellipses (one
shape family per class), rendered back-to-front so later objects occlude
earlier ones. Boxes are derived from each shape's own rendered mask, so
they are pixel-tight by construction. Generation is a pure function of
(spec, index).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from matplotlib.colors import hsv_to_rgb as _hsv_to_rgb
from matplotlib.colors import rgb_to_hsv as _rgb_to_hsv

from rrcdet.anchors import iou_matrix
from rrcdet.autograd import ContractError

# class id i+1 uses palette color i; rectangles for even ids, ellipses odd
DEFAULT_PALETTE = ((0.80, 0.25, 0.20), (0.20, 0.35, 0.80), (0.25, 0.70, 0.30))


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    height: int = 96
    width: int = 96
    min_objects: int = 1
    max_objects: int = 4
    min_scale: float = 0.10
    max_scale: float = 0.50
    max_overlap: float = 0.50
    classes: tuple[str, ...] = ("block", "disc")

    def __post_init__(self):
        if not 0 < self.min_scale <= self.max_scale < 1:
            raise ContractError("object scale range must lie inside (0, 1)")
        if self.min_objects < 0 or self.max_objects < self.min_objects:
            raise ContractError("invalid object count range")
        if not self.classes:
            raise ContractError("at least one class required")


@dataclass
class Sample:
    image: np.ndarray                  # (3, H, W) floats in [0, 1]
    boxes: np.ndarray                  # (K, 4) normalized corners
    labels: np.ndarray                 # (K,) class ids, 1-based
    occluded_fraction: np.ndarray = field(
        default_factory=lambda: np.zeros(0))


def _rng_for(spec: SceneSpec, index: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([spec.seed & 0xFFFFFFFF, index])))


def _background(rng, h, w):
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w),
                         indexing="ij")
    base = rng.uniform(0.25, 0.55, size=3)
    slope = rng.uniform(-0.15, 0.15, size=2)
    freq = rng.uniform(2.0, 6.0, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    ripple = 0.04 * np.sin(2 * np.pi * (freq[0] * xx + freq[1] * yy) + phase)
    img = np.empty((3, h, w))
    for c in range(3):
        img[c] = base[c] + slope[0] * xx + slope[1] * yy + ripple
    img += rng.normal(0.0, 0.015, size=(3, h, w))
    return img.clip(0.0, 1.0)


def synth_scene(spec: SceneSpec, index: int) -> Sample:
    """Deterministic scene for (spec.seed, index)."""
    rng = _rng_for(spec, index)
    h, w = spec.height, spec.width
    image = _background(rng, h, w)
    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))

    yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    masks, boxes, labels = [], [], []
    for _ in range(n_objects):
        class_id = int(rng.integers(1, len(spec.classes) + 1))
        for attempt in range(30):
            bw = rng.uniform(spec.min_scale, spec.max_scale) * w
            bh = float(np.clip(bw / w * np.exp(rng.uniform(-0.4, 0.4)),
                               spec.min_scale, spec.max_scale)) * h
            bw = max(bw, 3.0)
            bh = max(bh, 3.0)
            cx = rng.uniform(bw / 2, w - bw / 2)
            cy = rng.uniform(bh / 2, h - bh / 2)
            if class_id % 2 == 1:
                mask = ((np.abs(xx - cx) <= bw / 2)
                        & (np.abs(yy - cy) <= bh / 2))
            else:
                mask = (((xx - cx) / (bw / 2)) ** 2
                        + ((yy - cy) / (bh / 2)) ** 2) <= 1.0
            if not mask.any():
                continue
            cols = np.flatnonzero(mask.any(axis=0))
            rows = np.flatnonzero(mask.any(axis=1))
            box = np.array([cols[0] / w, rows[0] / h,
                            (cols[-1] + 1) / w, (rows[-1] + 1) / h])
            if boxes:
                overlap = iou_matrix(box.reshape(1, 4), np.array(boxes))[0]
                if overlap.max() > spec.max_overlap and attempt < 29:
                    continue
            masks.append(mask)
            boxes.append(box)
            labels.append(class_id)
            break

    shading = 0.85 + 0.15 * (xx / w + yy / h) / 2
    for mask, class_id in zip(masks, labels):
        color = np.array(DEFAULT_PALETTE[(class_id - 1) % len(DEFAULT_PALETTE)])
        color = (color + rng.uniform(-0.08, 0.08, size=3)).clip(0.05, 0.95)
        for c in range(3):
            channel = image[c]
            channel[mask] = color[c] * shading[mask]
    image += _rng_for(spec, index ^ 0x5F5F).normal(0.0, 0.01, size=image.shape)
    image = image.clip(0.0, 1.0)

    occluded = np.zeros(len(masks))
    covered = np.zeros((h, w), dtype=bool)
    for i in range(len(masks) - 1, -1, -1):
        own = masks[i]
        visible = own & ~covered
        occluded[i] = 1.0 - visible.sum() / own.sum()
        covered |= own
    return Sample(image=image,
                  boxes=np.array(boxes).reshape(-1, 4),
                  labels=np.array(labels, dtype=np.intp),
                  occluded_fraction=occluded)


# ---------------------------------------------------------------------------
# color space
# ---------------------------------------------------------------------------

def rgb_to_hsv(image: np.ndarray) -> np.ndarray:
    """(3, H, W) RGB in [0,1] -> HSV, same layout."""
    return _rgb_to_hsv(np.moveaxis(image, 0, -1)).transpose(2, 0, 1)


def hsv_to_rgb(image: np.ndarray) -> np.ndarray:
    return _hsv_to_rgb(np.moveaxis(image, 0, -1)).transpose(2, 0, 1)


def hsv_jitter(image: np.ndarray, factor: float,
               rng: np.random.Generator) -> np.ndarray:
    """Scale saturation and exposure by independent draws from
    [1/factor, factor] in HSV space."""
    if factor < 1.0:
        raise ContractError("hsv_jitter factor must be >= 1")
    hsv = rgb_to_hsv(image)
    hsv[1] = (hsv[1] * rng.uniform(1.0 / factor, factor)).clip(0.0, 1.0)
    hsv[2] = (hsv[2] * rng.uniform(1.0 / factor, factor)).clip(0.0, 1.0)
    return hsv_to_rgb(hsv)


# ---------------------------------------------------------------------------
# geometric augmentation
# ---------------------------------------------------------------------------

def hflip(sample: Sample) -> Sample:
    """Mirror image and boxes around the vertical axis."""
    boxes = sample.boxes.copy()
    if len(boxes):
        boxes = boxes[:, [2, 1, 0, 3]]
        boxes[:, 0] = 1.0 - boxes[:, 0]
        boxes[:, 2] = 1.0 - boxes[:, 2]
    return Sample(image=sample.image[:, :, ::-1].copy(), boxes=boxes,
                  labels=sample.labels.copy(),
                  occluded_fraction=sample.occluded_fraction.copy())


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    _, h, w = image.shape
    ys = ((np.arange(out_h) + 0.5) * h / out_h - 0.5).clip(0, h - 1)
    xs = ((np.arange(out_w) + 0.5) * w / out_w - 0.5).clip(0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    a = image[:, y0][:, :, x0]
    b = image[:, y0][:, :, x1]
    c = image[:, y1][:, :, x0]
    d = image[:, y1][:, :, x1]
    return (a * (1 - wy) * (1 - wx) + b * (1 - wy) * wx
            + c * wy * (1 - wx) + d * wy * wx)


def crop_sample(sample: Sample, rect) -> Sample:
    """Crop a normalized rect, resize back to the original extent, keep
    boxes whose center lies inside, clip and remap them."""
    _, h, w = sample.image.shape
    x0 = int(round(rect[0] * w))
    y0 = int(round(rect[1] * h))
    x1 = int(round(rect[2] * w))
    y1 = int(round(rect[3] * h))
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, w), min(y1, h)
    if x1 - x0 < 2 or y1 - y0 < 2:
        raise ContractError(f"crop rect {rect} collapses the image")
    if (x0, y0, x1, y1) == (0, 0, w, h):
        patch = sample.image.copy()
    else:
        patch = resize_bilinear(sample.image[:, y0:y1, x0:x1], h, w)
    rx0, ry0, rx1, ry1 = x0 / w, y0 / h, x1 / w, y1 / h

    boxes, labels, occ = [], [], []
    for i, box in enumerate(sample.boxes):
        cx = (box[0] + box[2]) / 2
        cy = (box[1] + box[3]) / 2
        if not (rx0 <= cx < rx1 and ry0 <= cy < ry1):
            continue
        clipped = np.array([max(box[0], rx0), max(box[1], ry0),
                            min(box[2], rx1), min(box[3], ry1)])
        remapped = np.array([(clipped[0] - rx0) / (rx1 - rx0),
                             (clipped[1] - ry0) / (ry1 - ry0),
                             (clipped[2] - rx0) / (rx1 - rx0),
                             (clipped[3] - ry0) / (ry1 - ry0)])
        boxes.append(remapped)
        labels.append(sample.labels[i])
        occ.append(sample.occluded_fraction[i]
                   if len(sample.occluded_fraction) else 0.0)
    return Sample(image=patch, boxes=np.array(boxes).reshape(-1, 4),
                  labels=np.array(labels, dtype=np.intp),
                  occluded_fraction=np.array(occ))


def ssd_augment(sample: Sample, rng: np.random.Generator,
                min_visible_iou: float = 0.45, flip_prob: float = 0.5,
                crop_prob: float = 0.7, max_tries: int = 50) -> Sample:
    """Random horizontal flip then a constrained random crop.

    A candidate crop is accepted when it retains at least one box center
    and every retained box keeps IoU >= min_visible_iou with its uncropped
    self. After max_tries failures the flipped-but-uncropped sample is
    returned.
    """
    out = hflip(sample) if rng.random() < flip_prob else sample
    if len(out.boxes) == 0 or rng.random() >= crop_prob:
        return out
    for _ in range(max_tries):
        cw = rng.uniform(0.5, 1.0)
        ch = float(np.clip(cw * np.exp(rng.uniform(-0.2, 0.2)), 0.5, 1.0))
        cx0 = rng.uniform(0.0, 1.0 - cw)
        cy0 = rng.uniform(0.0, 1.0 - ch)
        rect = (cx0, cy0, cx0 + cw, cy0 + ch)
        cropped = crop_sample(out, rect)
        if len(cropped.boxes) == 0:
            continue
        # visible fraction of each retained box, against its original self
        ok = True
        for box in cropped.boxes:
            bw = box[2] - box[0]
            bh = box[3] - box[1]
            if bw <= 0 or bh <= 0:
                ok = False
                break
        if not ok:
            continue
        kept_centers = 0
        for i, box in enumerate(out.boxes):
            cxc = (box[0] + box[2]) / 2
            cyc = (box[1] + box[3]) / 2
            if rect[0] <= cxc < rect[2] and rect[1] <= cyc < rect[3]:
                kept_centers += 1
                clipped = np.array([max(box[0], rect[0]), max(box[1], rect[1]),
                                    min(box[2], rect[2]), min(box[3], rect[3])])
                if iou_matrix(clipped.reshape(1, 4),
                              box.reshape(1, 4))[0, 0] < min_visible_iou:
                    ok = False
                    break
        if ok and kept_centers:
            return cropped
    return out


def split(n: int, val_fraction: float, seed: int):
    """Disjoint, exhaustive, deterministic (train, validation) index sets."""
    if not 0 < val_fraction < 1:
        raise ContractError("val_fraction must lie in (0, 1)")
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_ppm(path: str, image: np.ndarray) -> None:
    """Binary PPM (P6), 8-bit, from a (3, H, W) float image in [0, 1]."""
    _, h, w = image.shape
    quantized = np.round(image.clip(0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantized.transpose(1, 2, 0).tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Read a binary PPM into a (3, H, W) float image in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def _occlusion_code(fraction: float) -> int:
    if fraction < 0.01:
        return 0
    if fraction < 0.4:
        return 1
    return 2


def kitti_label_lines(sample: Sample, class_names) -> list[str]:
    """Groundtruth in KITTI label format (pixel coordinates)."""
    _, h, w = sample.image.shape
    lines = []
    for i, box in enumerate(sample.boxes):
        name = class_names[sample.labels[i] - 1]
        occ = _occlusion_code(float(sample.occluded_fraction[i])
                              if len(sample.occluded_fraction) else 0.0)
        x0, y0, x1, y1 = box[0] * w, box[1] * h, box[2] * w, box[3] * h
        lines.append(f"{name} 0.00 {occ} -10 {x0:.2f} {y0:.2f} {x1:.2f} "
                     f"{y1:.2f} -1 -1 -1 -1000 -1000 -1000 -10")
    return lines


def export_corpus(spec: SceneSpec, indices, out_dir: str) -> None:
    """Write scenes as PPM images plus KITTI label files."""
    image_dir = os.path.join(out_dir, "images")
    label_dir = os.path.join(out_dir, "labels")
    os.makedirs(image_dir, exist_ok=True)
    os.makedirs(label_dir, exist_ok=True)
    for index in indices:
        sample = synth_scene(spec, int(index))
        stem = f"{int(index):06d}"
        write_ppm(os.path.join(image_dir, stem + ".ppm"), sample.image)
        with open(os.path.join(label_dir, stem + ".txt"), "w") as fh:
            fh.write("\n".join(kitti_label_lines(sample, spec.classes)))
            fh.write("\n")
