"""Run configuration: flat key=value text with dotted section prefixes.

Unknown keys are errors. Defaults follow the reference training recipe
(lr 0.0005, momentum 0.9, weight decay 0.0005, lr divided by 10 every
40000 steps, 5 rolling iterations, 5 regressors, anchor scales 0.066 to
0.85, NMS fusion over outputs 3-5); the desk profile shipped in configs/
overrides the capacity and schedule to CPU scale.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

from rrcdet.anchors import AnchorSpec
from rrcdet.backbone import BackboneConfig, ConfigError, StageConfig
from rrcdet.data import SceneSpec

_STAGE_RE = re.compile(r"^(\d+)x(\d+)(p?)$")


def _parse_stages(text: str):
    stages = []
    for part in text.split(","):
        m = _STAGE_RE.match(part.strip())
        if not m:
            raise ConfigError(
                f"bad stage {part!r} (want CONVSxWIDTH or CONVSxWIDTHp)")
        stages.append(StageConfig(convs=int(m.group(1)), width=int(m.group(2)),
                                  pool=bool(m.group(3))))
    return tuple(stages)


def _stages_text(stages) -> str:
    return ",".join(f"{s.convs}x{s.width}{'p' if s.pool else ''}"
                    for s in stages)


def _parse_int_list(text: str):
    return tuple(int(v) for v in str(text).split(",") if str(v).strip())


def _parse_float_list(text: str):
    return tuple(float(v) for v in str(text).split(",") if str(v).strip())


def _parse_str_list(text: str):
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


def _parse_bool(text: str):
    if str(text).lower() in ("1", "true", "yes"):
        return True
    if str(text).lower() in ("0", "false", "no"):
        return False
    raise ConfigError(f"bad boolean {text!r}")


# key -> (parser, default); the single source of truth for the schema
SCHEMA = {
    "backbone.stages": (_parse_stages,
                        _parse_stages("2x32p,2x64p,2x96p,2x128p,2x128p")),
    "backbone.taps": (_parse_int_list, (1, 2, 3, 4)),
    "model.common_channels": (int, 64),
    "model.agg_channels": (int, 0),            # 0 = scale from 19/256 ratio
    "model.iterations": (int, 5),
    "model.regressors": (int, 5),
    "model.aspect_ratios": (_parse_float_list, (1.0, 2.0, 0.5)),
    "anchors.scale_min": (float, 0.066),
    "anchors.scale_max": (float, 0.85),
    "anchors.match_threshold": (float, 0.5),
    "data.image_size": (int, 96),
    "data.classes": (_parse_str_list, ("block", "disc")),
    "data.seed": (int, 0),
    "data.train_scenes": (int, 2000),
    "data.val_scenes": (int, 500),
    "data.min_objects": (int, 1),
    "data.max_objects": (int, 4),
    "data.min_scale": (float, 0.10),
    "data.max_scale": (float, 0.50),
    "data.max_overlap": (float, 0.50),
    "augment.enabled": (_parse_bool, True),
    "augment.hsv_factor": (float, 1.3),
    "augment.flip_prob": (float, 0.5),
    "augment.crop_prob": (float, 0.7),
    "augment.min_visible_iou": (float, 0.45),
    "optimizer.lr": (float, 0.0005),
    "optimizer.momentum": (float, 0.9),
    "optimizer.weight_decay": (float, 0.0005),
    "optimizer.lr_decay_every": (int, 40000),
    "optimizer.lr_decay_factor": (float, 0.1),
    "train.steps": (int, 3000),
    "train.batch_size": (int, 8),
    "train.seed": (int, 0),
    "train.checkpoint_every": (int, 1000),
    "train.neg_ratio": (int, 3),
    "fusion.select": (_parse_int_list, (3, 4, 5)),
    "fusion.score_threshold": (float, 0.01),
    "fusion.demo_score_threshold": (float, 0.3),
    "fusion.nms_threshold": (float, 0.45),
    "eval.thresholds": (_parse_float_list, (0.6, 0.65, 0.7, 0.75, 0.8)),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = {key: default for key, (_, default) in SCHEMA.items()}
        merged.update(self.values)
        self.values = merged
        self.validate()

    def __getitem__(self, key: str):
        return self.values[key]

    def validate(self) -> None:
        unknown = set(self.values) - set(SCHEMA)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if self["model.iterations"] < 1:
            raise ConfigError("model.iterations must be >= 1")
        if self["model.regressors"] < 1:
            raise ConfigError("model.regressors must be >= 1")
        if self["optimizer.lr"] <= 0:
            raise ConfigError("optimizer.lr must be positive")
        n_outputs = self["model.iterations"] + 1
        select = set(self["fusion.select"])
        if not select or not select <= set(range(1, n_outputs + 1)):
            raise ConfigError(
                f"fusion.select {sorted(select)} must be a non-empty subset "
                f"of 1..{n_outputs}")
        self.backbone_config()   # structural validation

    # -- derived structures -------------------------------------------------

    def backbone_config(self) -> BackboneConfig:
        size = self["data.image_size"]
        return BackboneConfig(stages=self["backbone.stages"],
                              taps=self["backbone.taps"],
                              common_channels=self["model.common_channels"],
                              in_channels=3, in_height=size, in_width=size)

    def anchor_spec(self) -> AnchorSpec:
        return AnchorSpec.linear(self.backbone_config().tap_shapes(),
                                 scale_min=self["anchors.scale_min"],
                                 scale_max=self["anchors.scale_max"],
                                 aspect_ratios=self["model.aspect_ratios"],
                                 regressors=self["model.regressors"])

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(seed=self["data.seed"],
                         height=self["data.image_size"],
                         width=self["data.image_size"],
                         min_objects=self["data.min_objects"],
                         max_objects=self["data.max_objects"],
                         min_scale=self["data.min_scale"],
                         max_scale=self["data.max_scale"],
                         max_overlap=self["data.max_overlap"],
                         classes=self["data.classes"])

    def learning_rate(self, step: int) -> float:
        every = self["optimizer.lr_decay_every"]
        return self["optimizer.lr"] * (
            self["optimizer.lr_decay_factor"] ** (step // every))

    # -- serialization ------------------------------------------------------

    def _format(self, key) -> str:
        value = self.values[key]
        if key == "backbone.stages":
            return _stages_text(value)
        if isinstance(value, tuple):
            return ",".join(str(v) for v in value)
        return str(value)

    def to_text(self) -> str:
        return "\n".join(f"{key}={self._format(key)}"
                         for key in sorted(SCHEMA)) + "\n"

    def config_hash(self) -> bytes:
        return hashlib.sha256(self.to_text().encode("utf-8")).digest()


def parse_config(text: str) -> RunConfig:
    values = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected key=value, got {raw!r}")
        key, _, text_value = line.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(text_value.strip())
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"line {line_no}: {exc}") from None
    return RunConfig(values=values)


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
