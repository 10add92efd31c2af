"""Feature-pyramid backbones at two scales.

Shows the tap-shape arithmetic for a road-scene-sized input (1272x375,
where the familiar 159x47 / 80x24 / 40x12 / 20x6 ladder appears) and runs a
desk-sized backbone forward to confirm the predicted shapes.
"""

import numpy as np

from rrcdet.autograd import Tensor
from rrcdet.backbone import (
    BackboneConfig,
    StageConfig,
    build_backbone,
    desk_config,
    forward_pyramid,
)

road = BackboneConfig(
    stages=tuple(StageConfig(1, 4, True) for _ in range(7)),
    taps=(2, 3, 4, 5, 6),
    common_channels=8,
    in_channels=3, in_height=375, in_width=1272)
print("road-scene config, input 3x375x1272:")
for pos, (h, w) in enumerate(road.tap_shapes()):
    print(f"  level {pos}: {w}x{h}")
print("  op depth per level:", road.tap_depths())

desk = desk_config()
print("\ndesk config, input 3x96x96:")
print("  predicted taps:", desk.tap_shapes())

backbone = build_backbone(desk, seed=7)
image = Tensor(np.random.default_rng(1).random((1, 3, 96, 96)))
pyramid = forward_pyramid(backbone, image)
print("  actual taps:  ", [tuple(s) for s in pyramid.shapes])
print("  channels per level:", [l.shape[1] for l in pyramid.levels])
