"""Detector assembly: backbone + rolling cell + heads + anchors."""

from __future__ import annotations

import numpy as np

from rrcdet import autograd as ag
from rrcdet.anchors import Anchors, generate_anchors
from rrcdet.autograd import ParamStore, Tensor
from rrcdet.backbone import Backbone, build_backbone
from rrcdet.config import RunConfig
from rrcdet.rolling import (
    DetectionHeads,
    RollingCell,
    build_cell,
    build_heads,
    unroll,
)


class Detector:
    def __init__(self, config: RunConfig, store: ParamStore,
                 backbone: Backbone, cell: RollingCell, heads: DetectionHeads,
                 anchors: Anchors):
        self.config = config
        self.store = store
        self.backbone = backbone
        self.cell = cell
        self.heads = heads
        self.anchors = anchors
        self.iterations = config["model.iterations"]

    def forward(self, images) -> list:
        """T+1 head outputs for a batch; records the tape for training.

        Pixel inputs in [0, 1] are shifted to zero mean before the first
        convolution; all-positive inputs destabilize deep ReLU stacks when
        training from scratch.
        """
        if isinstance(images, Tensor):
            images = images.data
        images = Tensor(np.asarray(images) - 0.5)
        pyramid = self.backbone.forward(images)
        return unroll(self.cell, self.heads, pyramid, self.iterations)

    def predict(self, images) -> list:
        """Forward without tape recording; for evaluation and inference."""
        with ag.no_grad():
            return self.forward(images)

    def n_parameters(self) -> int:
        return self.store.n_values()


def build_detector(config: RunConfig, store: ParamStore | None = None) -> Detector:
    """Deterministic construction from (config, train.seed).

    All components draw their initial weights from one stream in a fixed
    registration order, so the parameter set is a pure function of the
    config.
    """
    store = store if store is not None else ParamStore()
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([config["train.seed"] & 0xFFFFFFFF, 0xD0])))
    backbone_cfg = config.backbone_config()
    backbone = build_backbone(backbone_cfg, store=store, rng=rng)
    tap_shapes = backbone_cfg.tap_shapes()
    agg = config["model.agg_channels"] or None
    cell = build_cell(tap_shapes, backbone_cfg.common_channels, store=store,
                      agg_channels=agg, rng=rng)
    spec = config.anchor_spec()
    heads = build_heads(len(tap_shapes), backbone_cfg.common_channels,
                        anchors_per_cell=spec.anchors_per_cell,
                        num_classes=len(config["data.classes"]),
                        regressors=spec.regressors, store=store, rng=rng,
                        weight_scale=0.1,
                        background_odds=config["train.neg_ratio"])
    return Detector(config=config, store=store, backbone=backbone, cell=cell,
                    heads=heads, anchors=generate_anchors(spec))
