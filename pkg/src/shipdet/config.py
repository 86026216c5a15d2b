"""Detector configuration: a flat, versioned, JSON-serializable dataclass."""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace

CONFIG_VERSION = 1
CONFIG_ENV = "SHIPDET_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    version: int = CONFIG_VERSION
    # input
    image_short_side: int = 600
    # backbone: one block per level, strides double from level to level
    backbone_widths: tuple = (8, 16, 16, 32, 64)
    n_levels: int = 3
    backbone_init: str = "he"
    # rotation-sensitive feature stack
    arf_layers: int = 3
    arf_filters: int = 40
    arf_orientations: int = 8
    # region proposal network
    rpn_mode: str = "dual"
    rpn_hidden: int = 64
    anchor_scales: tuple = (32, 64, 128, 256)
    anchor_ratios: tuple = (4, 7)
    n_orientation_bins: int = 6
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    angle_pos: float = math.pi / 6
    angle_neg: float = math.pi / 3
    rpn_batch: int = 256
    rpn_fg_fraction: float = 0.25
    rpn_nms: float = 0.7
    rpn_pre_nms_train: int = 12000
    rpn_pre_nms_test: int = 6000
    rpn_post_nms_train: int = 2000
    rpn_post_nms_test: int = 300
    # second stage
    pooling: str = "adaptive"
    arrangement: str = "standard"
    out_size: int = 7
    circle_fractions: tuple = (6 / 7, 4 / 7, 2 / 7)
    pooled_channels: int = 256
    fc_dim: int = 1024
    enlarge: float = 1.2
    det_pos_iou: float = 0.6
    det_neg_iou: float = 0.6
    det_batch: int = 64
    det_fg_fraction: float = 0.25
    bbox_std: tuple = (0.1, 0.1, 0.2, 0.2, 0.1)
    final_nms: float = 0.2
    score_threshold: float = 0.05
    max_detections: int = 100
    # losses
    focal_gamma: float = 2.0
    lam: float = 1.0
    det_focal: bool = True
    # training
    lr: float = 1e-3
    lr_final: float = 1e-4
    lr_drop_step: int = 40000
    steps: int = 80000
    batch_images: int = 2
    weight_decay: float = 0.0005
    init_std: float = 0.01
    flip: bool = True
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 1000
    val_every: int = 0
    dtype: str = "float32"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        validate(self)

    @classmethod
    def desk(cls, **overrides):
        """Desk-scale preset for 256 px images on one CPU core.

        The top level sits at stride 8 (four backbone blocks) so thin ships
        still fall near an anchor center, anchor scales follow the ship
        sizes of the synthetic scenes, and the rotating-filter stack and
        second stage are narrower to pay for the finer grid.
        """
        base = dict(
            image_short_side=256,
            backbone_widths=(8, 16, 16, 32),
            arf_filters=20,
            anchor_scales=(24, 32, 48, 64),
            steps=2300,
            lr=1e-4,
            lr_final=1e-5,
            lr_drop_step=1850,
            rpn_pre_nms_train=600,
            rpn_pre_nms_test=1000,
            checkpoint_every=500,
            pooled_channels=128,
            fc_dim=512,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def strides(self):
        return tuple(2**i for i in range(len(self.backbone_widths)))

    @property
    def level_strides(self):
        return self.strides[-self.n_levels :]

    @property
    def top_stride(self):
        return self.strides[-1]

    @property
    def pool_mode(self):
        return "channel_concat" if self.arrangement == "concat" else self.arrangement

    @property
    def pattern(self):
        return "ring" if self.pooling == "adaptive" else "typical"

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if d.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {d.get('version')}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        try:
            return cls(**kw)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")


def load_config(path=None, **overrides):
    """Load a config file; falls back to ``$SHIPDET_CONFIG`` and then the desk preset."""
    path = path or os.environ.get(CONFIG_ENV)
    if path:
        try:
            with open(path) as fh:
                cfg = DetectorConfig.from_json(fh.read())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cfg.replace(**overrides) if overrides else cfg
    return DetectorConfig.desk(**overrides)


def _check(cond, msg):
    if not cond:
        raise ConfigError(msg)


def validate(cfg):
    for name in ("rpn_pos_iou", "rpn_neg_iou", "rpn_nms", "det_pos_iou", "det_neg_iou", "final_nms",
                 "rpn_fg_fraction", "det_fg_fraction", "score_threshold"):
        v = getattr(cfg, name)
        _check(0 <= v <= 1, f"{name}={v} outside [0, 1]")
    _check(cfg.rpn_neg_iou <= cfg.rpn_pos_iou, "rpn_neg_iou must not exceed rpn_pos_iou")
    _check(cfg.det_neg_iou <= cfg.det_pos_iou, "det_neg_iou must not exceed det_pos_iou")
    _check(0 < cfg.angle_pos <= cfg.angle_neg <= math.pi / 2, "need 0 < angle_pos <= angle_neg <= pi/2")
    _check(cfg.pooling in ("adaptive", "typical"), f"unknown pooling {cfg.pooling!r}")
    _check(cfg.arrangement in ("standard", "reverse", "concat"), f"unknown arrangement {cfg.arrangement!r}")
    _check(cfg.rpn_mode in ("dual", "single"), f"unknown rpn mode {cfg.rpn_mode!r}")
    _check(1 <= cfg.n_levels <= min(5, len(cfg.backbone_widths)), f"n_levels={cfg.n_levels} not in 1..5")
    _check(cfg.out_size == 7, "the ring pattern is defined for a 7x7 output")
    _check(tuple(round(f, 12) for f in cfg.circle_fractions) == tuple(round(f, 12) for f in (6 / 7, 4 / 7, 2 / 7)),
           "circle fractions are fixed at 6/7, 4/7, 2/7")
    _check(cfg.enlarge >= 1, "enlarge must be >= 1")
    _check(len(cfg.bbox_std) == 5 and all(s > 0 for s in cfg.bbox_std), "bbox_std needs 5 positive entries")
    _check(cfg.batch_images >= 1 and cfg.steps >= 0, "batch_images >= 1 and steps >= 0 required")
    _check(cfg.lr > 0 and cfg.lr_final > 0, "learning rates must be positive")
    _check(cfg.dtype in ("float32", "float64"), f"unsupported dtype {cfg.dtype!r}")
    _check(cfg.image_short_side >= cfg.top_stride, "image_short_side smaller than the top stride")
    _check(all(w > 0 for w in cfg.backbone_widths), "backbone widths must be positive")
    _check(cfg.arf_layers >= 1 and cfg.arf_filters >= 1 and cfg.arf_orientations >= 1, "ARF sizes must be positive")
