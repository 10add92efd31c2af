"""Recurrent rolling feature aggregation over a feature pyramid.

One roll lets every pyramid level exchange features with its immediate
neighbors: the coarser neighbor contributes through a 1x1 conv + ReLU +
stride-2 deconv (downward path), the finer neighbor through a 1x1 conv +
ReLU + 2x2 max pool (upward path). The level concatenates itself with the
aggregated neighbor features and a 1x1 reduction conv restores the common
channel width, so the state shape is invariant and the same weights can be
applied again. All weights, including the per-level detection heads, are
shared across iterations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from rrcdet import autograd as ag
from rrcdet.autograd import ContractError, ParamStore, Tensor
from rrcdet.backbone import ConfigError, FeaturePyramid, _fan_in_uniform


def default_agg_channels(common_channels: int) -> int:
    """Aggregation width, scaled from the reference 19-of-256 ratio."""
    return max(1, math.ceil(common_channels * 19 / 256))


@dataclass
class PyramidState:
    """Per-iteration pyramid: iteration index t >= 1 plus one map per level."""
    t: int
    levels: list[Tensor]

    def shapes(self):
        return [level.shape for level in self.levels]


@dataclass
class HeadOutput:
    """Per-level class-score and box-offset maps for one iteration."""
    t: int
    cls_maps: list[Tensor]
    reg_maps: list[Tensor]
    anchors_per_cell: int
    num_classes: int
    regressors: int


class RollingCell:
    """Shared aggregation weights: one down/up path per adjacent level pair
    and one channel-reduction conv per level."""

    def __init__(self, level_shapes, channels: int, agg_channels: int | None,
                 store: ParamStore, prefix: str = "cell"):
        self.level_shapes = [tuple(s) for s in level_shapes]
        self.channels = channels
        self.agg_channels = agg_channels or default_agg_channels(channels)
        self.store = store
        self.prefix = prefix
        for (h0, w0), (h1, w1) in zip(self.level_shapes, self.level_shapes[1:]):
            if h1 != math.ceil(h0 / 2) or w1 != math.ceil(w0 / 2):
                raise ConfigError(
                    f"adjacent levels must ceil-halve, got {(h0, w0)} -> "
                    f"{(h1, w1)}")
        self.down = []   # pair k: level k+1 feeds level k
        self.up = []     # pair k: level k feeds level k+1
        self.reduce = []

    def register(self, rng: np.random.Generator) -> None:
        c, ca = self.channels, self.agg_channels
        n_levels = len(self.level_shapes)
        for k in range(n_levels - 1):
            w = self.store.register(f"{self.prefix}.down{k}.conv.weight",
                                    _fan_in_uniform(rng, (ca, c, 1, 1)))
            b = self.store.register(f"{self.prefix}.down{k}.conv.bias",
                                    np.zeros(ca))
            d = self.store.register(f"{self.prefix}.down{k}.deconv.weight",
                                    _fan_in_uniform(rng, (ca, ca, 2, 2)))
            self.down.append((w, b, d))
            uw = self.store.register(f"{self.prefix}.up{k}.conv.weight",
                                     _fan_in_uniform(rng, (ca, c, 1, 1)))
            ub = self.store.register(f"{self.prefix}.up{k}.conv.bias",
                                     np.zeros(ca))
            self.up.append((uw, ub))
        for p in range(n_levels):
            neighbors = (p > 0) + (p < n_levels - 1)
            cin = c + ca * neighbors
            w = self.store.register(f"{self.prefix}.reduce{p}.weight",
                                    _fan_in_uniform(rng, (c, cin, 1, 1)))
            b = self.store.register(f"{self.prefix}.reduce{p}.bias",
                                    np.zeros(c))
            self.reduce.append((w, b))

    def downward(self, level_idx: int, source: Tensor) -> Tensor:
        """Aggregate level ``level_idx`` down to level ``level_idx - 1``."""
        w, b, d = self.down[level_idx - 1]
        y = ag.relu(ag.conv2d(source, w, b, stride=1, pad=0))
        y = ag.deconv2d(y, d, stride=2, pad=0)
        th, tw = self.level_shapes[level_idx - 1]
        dh, dw = y.shape[2] - th, y.shape[3] - tw
        if dh or dw:
            y = ag.crop2d(y, dh // 2, dw // 2, th, tw)
        return y

    def upward(self, level_idx: int, source: Tensor) -> Tensor:
        """Aggregate level ``level_idx`` up to level ``level_idx + 1``."""
        w, b = self.up[level_idx]
        y = ag.relu(ag.conv2d(source, w, b, stride=1, pad=0))
        y = ag.maxpool2d(y, k=2, stride=2)
        th, tw = self.level_shapes[level_idx + 1]
        if y.shape[2] != th or y.shape[3] != tw:
            y = ag.pad2d(y, (0, th - y.shape[2], 0, tw - y.shape[3]))
        return y


def roll(cell: RollingCell, state: PyramidState) -> PyramidState:
    """One aggregation step; every level mixes with its direct neighbors."""
    n_levels = len(state.levels)
    if [s[2:] for s in state.shapes()] != cell.level_shapes:
        raise ContractError(
            f"state shapes {state.shapes()} drifted from cell construction "
            f"shapes {cell.level_shapes}")
    new_levels = []
    for p in range(n_levels):
        parts = [state.levels[p]]
        if p + 1 < n_levels:
            parts.append(cell.downward(p + 1, state.levels[p + 1]))
        if p > 0:
            parts.append(cell.upward(p - 1, state.levels[p - 1]))
        merged = ag.concat_channels(parts)
        w, b = cell.reduce[p]
        out = ag.relu(ag.conv2d(merged, w, b, stride=1, pad=0))
        if out.shape != state.levels[p].shape:
            raise ContractError(
                f"roll changed level {p} shape: {state.levels[p].shape} -> "
                f"{out.shape}")
        new_levels.append(out)
    return PyramidState(t=state.t + 1, levels=new_levels)


class DetectionHeads:
    """Per-level 1x1 classification and box-regression convolutions, shared
    across rolling iterations."""

    def __init__(self, n_levels: int, channels: int, anchors_per_cell: int,
                 num_classes: int, regressors: int, store: ParamStore,
                 prefix: str = "head"):
        self.n_levels = n_levels
        self.channels = channels
        self.anchors_per_cell = anchors_per_cell
        self.num_classes = num_classes
        self.regressors = regressors
        self.store = store
        self.prefix = prefix
        self.cls = []
        self.reg = []

    @property
    def cls_channels(self) -> int:
        return self.anchors_per_cell * (self.num_classes + 1)

    @property
    def reg_channels(self) -> int:
        return self.anchors_per_cell * self.regressors * 4

    def register(self, rng: np.random.Generator, weight_scale: float = 1.0,
                 background_odds: float = 0.0) -> None:
        """Register head parameters.

        ``weight_scale`` shrinks the random init (small heads keep early
        training stable); ``background_odds`` > 0 biases the background
        logit so the initial scores sit at that prior odds ratio instead of
        uniform, which avoids the violent prior-fitting phase at the start
        of training.
        """
        k = self.num_classes + 1
        cls_bias = np.zeros(self.cls_channels)
        if background_odds > 0:
            prior = np.log(background_odds * (k - 1))
            for a in range(self.anchors_per_cell):
                cls_bias[a * k] = prior
        for p in range(self.n_levels):
            cw = self.store.register(
                f"{self.prefix}.level{p}.cls.weight",
                weight_scale * _fan_in_uniform(
                    rng, (self.cls_channels, self.channels, 1, 1)))
            cb = self.store.register(
                f"{self.prefix}.level{p}.cls.bias", cls_bias.copy())
            rw = self.store.register(
                f"{self.prefix}.level{p}.reg.weight",
                weight_scale * _fan_in_uniform(
                    rng, (self.reg_channels, self.channels, 1, 1)))
            rb = self.store.register(
                f"{self.prefix}.level{p}.reg.bias", np.zeros(self.reg_channels))
            self.cls.append((cw, cb))
            self.reg.append((rw, rb))


def apply_heads(heads: DetectionHeads, state: PyramidState) -> HeadOutput:
    if len(state.levels) != heads.n_levels:
        raise ContractError(
            f"heads built for {heads.n_levels} levels, state has "
            f"{len(state.levels)}")
    cls_maps, reg_maps = [], []
    for p, level in enumerate(state.levels):
        cw, cb = heads.cls[p]
        rw, rb = heads.reg[p]
        cls_maps.append(ag.conv2d(level, cw, cb, stride=1, pad=0))
        reg_maps.append(ag.conv2d(level, rw, rb, stride=1, pad=0))
    return HeadOutput(t=state.t, cls_maps=cls_maps, reg_maps=reg_maps,
                      anchors_per_cell=heads.anchors_per_cell,
                      num_classes=heads.num_classes,
                      regressors=heads.regressors)


def unroll(cell: RollingCell, heads: DetectionHeads, pyramid: FeaturePyramid,
           iterations: int) -> list[HeadOutput]:
    """Apply heads to the raw pyramid and after each of T rolls: T+1 outputs."""
    if iterations < 1:
        raise ContractError("unroll needs at least one iteration")
    state = PyramidState(t=1, levels=list(pyramid.levels))
    outputs = [apply_heads(heads, state)]
    for _ in range(iterations):
        state = roll(cell, state)
        outputs.append(apply_heads(heads, state))
    return outputs


def build_cell(level_shapes, channels: int, store: ParamStore, seed: int = 0,
               agg_channels: int | None = None, prefix: str = "cell",
               rng: np.random.Generator | None = None) -> RollingCell:
    cell = RollingCell(level_shapes, channels, agg_channels, store, prefix)
    cell.register(rng if rng is not None else
                  np.random.Generator(np.random.PCG64(seed)))
    return cell


def build_heads(n_levels: int, channels: int, anchors_per_cell: int,
                num_classes: int, regressors: int, store: ParamStore,
                seed: int = 0, prefix: str = "head",
                rng: np.random.Generator | None = None,
                weight_scale: float = 1.0,
                background_odds: float = 0.0) -> DetectionHeads:
    heads = DetectionHeads(n_levels, channels, anchors_per_cell, num_classes,
                           regressors, store, prefix)
    heads.register(rng if rng is not None else
                   np.random.Generator(np.random.PCG64(seed)),
                   weight_scale=weight_scale, background_odds=background_odds)
    return heads
