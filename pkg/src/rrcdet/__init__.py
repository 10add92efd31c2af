"""Single-stage detector with recurrent rolling feature aggregation."""

from rrcdet.anchors import (
    AnchorSpec,
    Anchors,
    MatchResult,
    decode,
    encode,
    generate_anchors,
    iou,
    match,
    regressor_bin,
)
from rrcdet.autograd import (
    ContractError,
    DimensionError,
    ParamStore,
    Tensor,
    backward,
    no_grad,
    sgd_momentum_step,
)
from rrcdet.backbone import (
    BackboneConfig,
    ConfigError,
    FeaturePyramid,
    StageConfig,
    build_backbone,
    forward_pyramid,
)
from rrcdet.config import RunConfig, load_config, parse_config
from rrcdet.data import SceneSpec, Sample, hsv_jitter, split, ssd_augment, synth_scene
from rrcdet.evaluation import (
    GroundTruthRecord,
    PRCurve,
    average_precision,
    map_sweep,
    parse_labels,
)
from rrcdet.inference import Detection, decode_output, fuse, nms
from rrcdet.losses import LossReport, classification_loss, regression_loss, total_loss
from rrcdet.model import Detector, build_detector
from rrcdet.rolling import (
    DetectionHeads,
    HeadOutput,
    PyramidState,
    RollingCell,
    apply_heads,
    build_cell,
    build_heads,
    roll,
    unroll,
)

__all__ = [
    "AnchorSpec", "Anchors", "MatchResult", "decode", "encode",
    "generate_anchors", "iou", "match", "regressor_bin",
    "ContractError", "DimensionError", "ParamStore", "Tensor", "backward",
    "no_grad", "sgd_momentum_step",
    "BackboneConfig", "ConfigError", "FeaturePyramid", "StageConfig",
    "build_backbone", "forward_pyramid",
    "RunConfig", "load_config", "parse_config",
    "SceneSpec", "Sample", "hsv_jitter", "split", "ssd_augment", "synth_scene",
    "GroundTruthRecord", "PRCurve", "average_precision", "map_sweep",
    "parse_labels",
    "Detection", "decode_output", "fuse", "nms",
    "LossReport", "classification_loss", "regression_loss", "total_loss",
    "Detector", "build_detector",
    "DetectionHeads", "HeadOutput", "PyramidState", "RollingCell",
    "apply_heads", "build_cell", "build_heads", "roll", "unroll",
]
