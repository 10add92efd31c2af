"""Configurable feed-forward backbone emitting a multi-scale feature pyramid.

A backbone is a stack of stages, each a run of same-size 3x3 convolutions
(ReLU after every conv) optionally followed by a 2x2 stride-2 max pool with
ceil semantics. Selected stages ("taps") emit pyramid levels; every tap is
adapted to a common channel width before use so that downstream feature
aggregation sees a uniform channel count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from rrcdet import autograd as ag
from rrcdet.autograd import DimensionError, ParamStore, Tensor


class ConfigError(ValueError):
    """A structural configuration is invalid."""


@dataclass(frozen=True)
class StageConfig:
    convs: int
    width: int
    pool: bool


@dataclass(frozen=True)
class BackboneConfig:
    stages: tuple[StageConfig, ...]
    taps: tuple[int, ...]          # stage indices that emit pyramid levels
    common_channels: int = 256
    in_channels: int = 3
    in_height: int = 96
    in_width: int = 96

    def __post_init__(self):
        if len(self.taps) < 2:
            raise ConfigError("a pyramid needs at least 2 taps")
        if list(self.taps) != sorted(set(self.taps)):
            raise ConfigError("taps must be strictly increasing stage indices")
        if self.taps[-1] >= len(self.stages):
            raise ConfigError(f"tap {self.taps[-1]} beyond last stage")
        if self.common_channels < 1:
            raise ConfigError("common_channels must be positive")
        for idx in self.taps:
            if self.stages[idx].convs < 1:
                raise ConfigError(
                    f"stage {idx} is tapped but has no convolution")
        for idx, stage in enumerate(self.stages):
            if stage.convs < 0 or stage.width < 1:
                raise ConfigError(f"stage {idx} has invalid conv count/width")
        shapes = self.tap_shapes()
        for (h0, w0), (h1, w1) in zip(shapes, shapes[1:]):
            if h1 >= h0 or w1 >= w0:
                raise ConfigError(
                    f"tap extents must strictly decrease, got {shapes}")
        if min(h for h, _ in shapes + [(self.in_height, self.in_width)]) < 1:
            raise ConfigError("a stage pools the feature map away entirely")

    def stage_shapes(self) -> list[tuple[int, int]]:
        """Spatial extent after each stage (convs preserve size, pools ceil-halve)."""
        h, w = self.in_height, self.in_width
        out = []
        for stage in self.stages:
            if stage.pool:
                h, w = math.ceil(h / 2), math.ceil(w / 2)
            out.append((h, w))
        return out

    def tap_shapes(self) -> list[tuple[int, int]]:
        shapes = self.stage_shapes()
        return [shapes[i] for i in self.taps]

    def tap_depths(self) -> list[int]:
        """Op depth (convs + pools + channel adapter) feeding each tap."""
        depth = 0
        by_stage = []
        for stage in self.stages:
            depth += stage.convs + (1 if stage.pool else 0)
            by_stage.append(depth)
        return [by_stage[i] + 1 for i in self.taps]


@dataclass
class FeaturePyramid:
    """Ordered per-scale feature maps, level 0 at the highest resolution."""
    levels: list[Tensor]
    shapes: list[tuple[int, int]]
    depths: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.levels)


def _fan_in_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    # ReLU-gain uniform: variance 2/fan_in keeps activations from decaying
    # through deep conv stacks
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Backbone:
    def __init__(self, config: BackboneConfig, store: ParamStore, prefix: str = "backbone"):
        self.config = config
        self.store = store
        self.prefix = prefix
        self._stage_params: list[list[tuple[Tensor, Tensor]]] = []
        self._adapters: list[tuple[Tensor, Tensor, int]] = []

    def register(self, rng: np.random.Generator) -> None:
        cfg = self.config
        cin = cfg.in_channels
        widths_at_tap = {}
        for s, stage in enumerate(cfg.stages):
            convs = []
            for c in range(stage.convs):
                w = self.store.register(
                    f"{self.prefix}.stage{s}.conv{c}.weight",
                    _fan_in_uniform(rng, (stage.width, cin, 3, 3)))
                b = self.store.register(
                    f"{self.prefix}.stage{s}.conv{c}.bias", np.zeros(stage.width))
                convs.append((w, b))
                cin = stage.width
            self._stage_params.append(convs)
            widths_at_tap[s] = cin
        for pos, s in enumerate(cfg.taps):
            # 3x3 adapters on the two shallowest taps, 1x1 above
            ksize = 3 if pos < 2 else 1
            w = self.store.register(
                f"{self.prefix}.adapt{pos}.weight",
                _fan_in_uniform(rng, (cfg.common_channels, widths_at_tap[s],
                                      ksize, ksize)))
            b = self.store.register(
                f"{self.prefix}.adapt{pos}.bias", np.zeros(cfg.common_channels))
            self._adapters.append((w, b, ksize))

    def forward(self, image: Tensor) -> FeaturePyramid:
        cfg = self.config
        if image.data.ndim != 4 or image.shape[1:] != (
                cfg.in_channels, cfg.in_height, cfg.in_width):
            raise DimensionError(
                f"backbone expects (N, {cfg.in_channels}, {cfg.in_height}, "
                f"{cfg.in_width}) input, got {image.shape}")
        x = image
        raw_taps = {}
        for s, stage in enumerate(cfg.stages):
            for w, b in self._stage_params[s]:
                x = ag.relu(ag.conv2d(x, w, b, stride=1, pad=1))
            if stage.pool:
                x = _ceil_maxpool(x)
            if s in cfg.taps:
                raw_taps[s] = x
        levels = []
        for pos, s in enumerate(cfg.taps):
            w, b, ksize = self._adapters[pos]
            pad = 1 if ksize == 3 else 0
            levels.append(ag.relu(ag.conv2d(raw_taps[s], w, b, stride=1, pad=pad)))
        return FeaturePyramid(levels=levels,
                              shapes=[t.shape[2:] for t in levels],
                              depths=cfg.tap_depths())


def _ceil_maxpool(x: Tensor) -> Tensor:
    """2x2 stride-2 max pool, padding odd extents so the output ceil-halves."""
    h, w = x.shape[2], x.shape[3]
    if h % 2 or w % 2:
        x = ag.pad2d(x, (0, h % 2, 0, w % 2), value=-np.inf)
    return ag.maxpool2d(x, k=2, stride=2)


def build_backbone(config: BackboneConfig, seed: int = 0,
                   store: ParamStore | None = None,
                   prefix: str = "backbone",
                   rng: np.random.Generator | None = None) -> Backbone:
    """Deterministically initialize a backbone from (config, seed)."""
    depths = config.tap_depths()
    assert all(a < b for a, b in zip(depths, depths[1:])), \
        "tap op-depth must strictly increase with level index"
    backbone = Backbone(config, store if store is not None else ParamStore(),
                        prefix)
    backbone.register(rng if rng is not None else
                      np.random.Generator(np.random.PCG64(seed)))
    return backbone


def forward_pyramid(backbone: Backbone, image: Tensor) -> FeaturePyramid:
    return backbone.forward(image)


def desk_config(**overrides) -> BackboneConfig:
    """Small CPU-friendly backbone: 96x96 input, taps at 24/12/6/3."""
    defaults = dict(
        stages=(StageConfig(2, 32, True), StageConfig(2, 64, True),
                StageConfig(2, 96, True), StageConfig(2, 128, True),
                StageConfig(2, 128, True)),
        taps=(1, 2, 3, 4),
        common_channels=64,
        in_channels=3, in_height=96, in_width=96,
    )
    defaults.update(overrides)
    return BackboneConfig(**defaults)
