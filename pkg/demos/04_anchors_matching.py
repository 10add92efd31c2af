"""Anchors, matching, offset coding, and scale binning."""

import numpy as np

from rrcdet.anchors import (
    AnchorSpec,
    decode,
    encode,
    generate_anchors,
    iou,
    match,
    regressor_bin,
)

spec = AnchorSpec.linear([(16, 16), (8, 8), (4, 4), (2, 2)], regressors=5)
anchors = generate_anchors(spec)
print(f"{len(anchors)} anchors over {len(spec.grid_shapes)} levels, "
      f"scales {tuple(round(s, 3) for s in spec.scales)}")

gt = np.array([0.30, 0.35, 0.55, 0.60])
result = match(anchors, [gt])
pos = result.positive_indices
print(f"groundtruth {gt} matched {len(pos)} anchor(s)")
best = pos[np.argmax([iou(anchors.boxes[a], gt) for a in pos])]
print(f"best anchor {np.round(anchors.boxes[best], 3)} "
      f"iou {iou(anchors.boxes[best], gt):.3f} "
      f"level {anchors.level_of[best]} bin {result.bins[best]}")

offsets = encode(gt, anchors.boxes[best])
roundtrip = decode(offsets, anchors.boxes[best])
print(f"encoded offsets {np.round(offsets, 4)}; "
      f"decode error {np.abs(roundtrip - gt).max():.2e}")

sigma = float(np.sqrt((gt[2] - gt[0]) * (gt[3] - gt[1])))
level = int(anchors.level_of[best])
lo, hi = spec.scale_interval(level)
print(f"scale sigma {sigma:.3f} inside level-{level} interval "
      f"({lo:.3f}, {hi:.3f}) -> regressor bin "
      f"{regressor_bin(gt, spec, level)} of {spec.regressors}")
