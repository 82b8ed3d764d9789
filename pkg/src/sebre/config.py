"""Model, loss, schedule and run configuration.

Everything the detector and trainer can vary lives here, with desk-scale
defaults; ``preset("paper")`` switches to the source training regime (deep
backbone, 6000 + 9000 iteration schedule), which is far beyond desk-scale
compute and exists for completeness.  Configs serialize to/from plain JSON
dicts so run files and checkpoints can embed them canonically.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .backbone import BackboneConfig, ConfigError


@dataclass(frozen=True)
class LossConfig:
    """Loss normalization and component weighting.

    ``mu`` weights the proposal-stage regression term; ``n_cls``/``n_reg``
    pick the normalizer ("sampled" or "positive" anchor counts).  The three
    component weights apply to the head loss (classification, box, mask).
    Delta standardization is off by default to stay with the plain
    parameterization.
    """

    mu: float = 1.0
    n_cls: str = "sampled"
    n_reg: str = "positive"
    weight_cls: float = 1.0
    weight_reg: float = 1.0
    weight_mask: float = 1.0
    standardize_deltas: bool = False
    delta_std: tuple[float, float, float, float] = (0.1, 0.1, 0.2, 0.2)

    def __post_init__(self):
        if min(self.weight_cls, self.weight_reg, self.weight_mask) < 0:
            raise ConfigError("loss component weights must be >= 0")
        for mode, name in ((self.n_cls, "n_cls"), (self.n_reg, "n_reg")):
            if mode not in ("sampled", "positive"):
                raise ConfigError(f"{name} must be 'sampled' or 'positive', got {mode!r}")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and inference hyperparameters of the detector."""

    num_classes: int = 9  # 8 foreground regions + background
    pool_size: int = 7
    mask_pool_size: int = 14
    mask_size: int = 28
    max_detections: int = 8
    detection_threshold: float = 0.9
    mask_threshold: float = 0.5
    # one scale per pyramid level; ratios shared across levels
    anchor_scales: tuple[float, ...] = (32.0, 64.0, 128.0, 256.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_sample_size: int = 64
    rpn_nms_threshold: float = 0.7
    pre_nms_train: int = 1000
    post_nms_train: int = 200
    pre_nms_infer: int = 500
    post_nms_infer: int = 100
    roi_sample_size: int = 32
    roi_positive_fraction: float = 0.25
    head_hidden: int = 256
    mask_channels: int = 32

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("need at least background plus one region class")
        if self.mask_size != 2 * self.mask_pool_size:
            raise ConfigError(
                f"mask_size ({self.mask_size}) must be twice mask_pool_size "
                f"({self.mask_pool_size})"
            )
        if not 0.0 <= self.detection_threshold <= 1.0:
            raise ConfigError("detection_threshold must be in [0, 1]")

    @property
    def num_fg_classes(self) -> int:
        return self.num_classes - 1


@dataclass(frozen=True)
class StageSpec:
    scope: str  # "heads" (backbone frozen) or "all"
    iterations: int
    learning_rate: float

    def __post_init__(self):
        if self.scope not in ("heads", "all"):
            raise ConfigError(f"stage scope must be 'heads' or 'all', got {self.scope!r}")
        if self.iterations < 0 or self.learning_rate < 0:
            raise ConfigError("iterations and learning rate must be non-negative")


@dataclass(frozen=True)
class Schedule:
    stages: tuple[StageSpec, ...]
    momentum: float = 0.9

    def __post_init__(self):
        if len(self.stages) < 1:
            raise ConfigError("schedule needs at least one stage")

    @staticmethod
    def paper() -> "Schedule":
        return Schedule(
            stages=(StageSpec("heads", 6000, 1e-3), StageSpec("all", 9000, 1e-4)),
            momentum=0.9,
        )

    @staticmethod
    def desk() -> "Schedule":
        return Schedule(
            stages=(StageSpec("heads", 600, 1e-3), StageSpec("all", 900, 1e-4)),
            momentum=0.9,
        )


@dataclass(frozen=True)
class RunConfig:
    """Full training/inference run description; serializes to one JSON doc."""

    preset: str = "desk"
    profile: str = "mouse8"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: Schedule = field(default_factory=Schedule.desk)
    init_seed: int = 0
    train_seed: int = 0
    checkpoint_every: int = 500

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def config_to_dict(cfg: RunConfig) -> dict:
    return _to_jsonable(cfg)


def config_to_json(cfg: RunConfig) -> str:
    """Canonical JSON form (sorted keys) so identical configs share bytes."""
    return json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))


def _tupled(d: dict, *keys):
    for k in keys:
        if k in d and isinstance(d[k], list):
            d[k] = tuple(d[k])
    return d


def config_from_dict(doc: dict) -> RunConfig:
    doc = dict(doc)
    if "backbone" in doc:
        doc["backbone"] = BackboneConfig(
            **_tupled(dict(doc["backbone"]), "stage_blocks", "channels")
        )
    if "model" in doc:
        doc["model"] = ModelConfig(
            **_tupled(dict(doc["model"]), "anchor_scales", "anchor_ratios")
        )
    if "loss" in doc:
        doc["loss"] = LossConfig(**_tupled(dict(doc["loss"]), "delta_std"))
    if "schedule" in doc:
        sched = dict(doc["schedule"])
        sched["stages"] = tuple(StageSpec(**s) for s in sched.get("stages", ()))
        doc["schedule"] = Schedule(**sched)
    return RunConfig(**doc)


def config_from_json(text: str) -> RunConfig:
    return config_from_dict(json.loads(text))


def preset(name: str, **overrides) -> RunConfig:
    """Named starting points: 'desk' (default, shallow) or 'paper' (deep)."""
    if name == "desk":
        cfg = RunConfig()
    elif name == "paper":
        cfg = RunConfig(
            preset="paper",
            backbone=BackboneConfig.paper_preset(),
            schedule=Schedule.paper(),
        )
    else:
        raise ConfigError(f"unknown preset {name!r} (expected 'desk' or 'paper')")
    return cfg.replace(**overrides) if overrides else cfg


def set_by_path(doc: dict, path: str, raw: str) -> None:
    """Override a config dict field by dotted path with a JSON-ish literal."""
    keys = path.split(".")
    node = doc
    for k in keys[:-1]:
        if k not in node or not isinstance(node[k], dict):
            raise ConfigError(f"unknown config path {path!r}")
        node = node[k]
    leaf = keys[-1]
    if leaf not in node:
        raise ConfigError(f"unknown config path {path!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node[leaf] = value
