"""Residual backbone plus feature pyramid.

The backbone is a configurable stack of basic residual stages whose strides
double from 4; the pyramid merges stage outputs top-down with nearest
upsampling and lateral 1x1 projections, then smooths each level with a 3x3
convolution.  Normalization layers are frozen per-channel affines (scale 1,
shift 0, never updated) so the small-batch training regime has a stable,
named no-op where batch normalization would sit.

Parameter names start with ``backbone.`` for the residual trunk and ``fpn.``
for the pyramid, which is what the two-stage trainer's freeze-by-prefix
logic keys on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import Parameter, Tensor


class ConfigError(ValueError):
    """Invalid architecture configuration."""


@dataclass(frozen=True)
class BackboneConfig:
    """Residual blocks, channel widths per stage, and the pyramid width.

    The default is the shallow desk-scale network; ``paper_preset`` returns
    the deep configuration matching the source architecture's stage layout
    (training it is far beyond desk scale).
    """

    stage_blocks: tuple[int, ...] = (2, 2, 2, 2)
    channels: tuple[int, ...] = (16, 32, 64, 128)
    fpn_channels: int = 32

    def __post_init__(self):
        if len(self.stage_blocks) < 2:
            raise ConfigError("backbone needs at least 2 stages")
        if len(self.stage_blocks) != len(self.channels):
            raise ConfigError(
                f"stage_blocks ({len(self.stage_blocks)}) and channels "
                f"({len(self.channels)}) must align"
            )
        if any(b < 1 for b in self.stage_blocks):
            raise ConfigError("every stage needs at least one block")
        if any(c < 1 for c in self.channels) or self.fpn_channels < 1:
            raise ConfigError("channel widths must be positive")

    @property
    def num_levels(self) -> int:
        return len(self.stage_blocks)

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(4 * 2**i for i in range(self.num_levels))

    @property
    def top_stride(self) -> int:
        return self.strides[-1]

    @staticmethod
    def paper_preset() -> "BackboneConfig":
        return BackboneConfig(
            stage_blocks=(3, 4, 23, 3), channels=(64, 128, 256, 512), fpn_channels=256
        )


class Conv:
    def __init__(self, name, params, rng, c_in, c_out, k, stride=1, padding=0):
        fan_in = c_in * k * k
        self.weight = Parameter(f"{name}.weight", nn.uniform_init(rng, (c_out, c_in, k, k), fan_in))
        self.bias = Parameter(f"{name}.bias", np.zeros(c_out, dtype=np.float32))
        self.stride, self.padding = stride, padding
        params += [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return nn.conv2d(x, self.weight.value, self.bias.value, self.stride, self.padding)


class Dense:
    def __init__(self, name, params, rng, d_in, d_out):
        self.weight = Parameter(f"{name}.weight", nn.uniform_init(rng, (d_in, d_out), d_in))
        self.bias = Parameter(f"{name}.bias", np.zeros(d_out, dtype=np.float32))
        params += [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return nn.dense(x, self.weight.value, self.bias.value)


class FrozenNorm:
    """Per-channel affine pinned at identity; parameters are never trained."""

    def __init__(self, name, params, channels):
        self.scale = Parameter(f"{name}.scale", np.ones(channels, dtype=np.float32), trainable=False)
        self.shift = Parameter(f"{name}.shift", np.zeros(channels, dtype=np.float32), trainable=False)
        params += [self.scale, self.shift]

    def __call__(self, x: Tensor) -> Tensor:
        return nn.channel_affine(x, self.scale.value, self.shift.value)


class ResidualBlock:
    def __init__(self, name, params, rng, c_in, c_out, stride):
        self.conv1 = Conv(f"{name}.conv1", params, rng, c_in, c_out, 3, stride, 1)
        self.norm1 = FrozenNorm(f"{name}.norm1", params, c_out)
        self.conv2 = Conv(f"{name}.conv2", params, rng, c_out, c_out, 3, 1, 1)
        self.norm2 = FrozenNorm(f"{name}.norm2", params, c_out)
        self.project = None
        if stride != 1 or c_in != c_out:
            self.project = Conv(f"{name}.proj", params, rng, c_in, c_out, 1, stride, 0)
            self.norm_p = FrozenNorm(f"{name}.normp", params, c_out)

    def __call__(self, x: Tensor) -> Tensor:
        h = nn.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        skip = self.norm_p(self.project(x)) if self.project else x
        return nn.relu(nn.add(h, skip))


class BackboneFpn:
    """Trunk plus pyramid; build with :func:`build_backbone`."""

    def __init__(self, config: BackboneConfig, seed: int):
        self.config = config
        self.params: list[Parameter] = []
        rng = np.random.default_rng(seed)
        c0 = config.channels[0]
        self.stem = Conv("backbone.stem.conv", self.params, rng, 3, c0, 7, 2, 3)
        self.stem_norm = FrozenNorm("backbone.stem.norm", self.params, c0)
        self.stages: list[list[ResidualBlock]] = []
        c_in = c0
        for s, (blocks, c_out) in enumerate(zip(config.stage_blocks, config.channels)):
            stage = []
            for b in range(blocks):
                stride = 2 if (b == 0 and s > 0) else 1
                stage.append(
                    ResidualBlock(f"backbone.stage{s}.block{b}", self.params, rng, c_in, c_out, stride)
                )
                c_in = c_out
            self.stages.append(stage)
        f = config.fpn_channels
        self.laterals = [
            Conv(f"fpn.lateral{lvl}", self.params, rng, c, f, 1)
            for lvl, c in enumerate(config.channels)
        ]
        self.smooths = [
            Conv(f"fpn.smooth{lvl}", self.params, rng, f, f, 3, 1, 1)
            for lvl in range(config.num_levels)
        ]

    def parameters(self) -> list[Parameter]:
        return list(self.params)

    def extract_pyramid(self, image: Tensor, detach_trunk: bool = False) -> list[Tensor]:
        """Feature maps P2..P_top with strides (4, 8, 16, ...) and uniform width.

        The image extent must be divisible by the top stride; the dataset
        pipeline pads records to guarantee it.  ``detach_trunk`` cuts the
        graph below the lateral projections, which the heads-only training
        stage uses to skip backward work through the frozen trunk.
        """
        if image.ndim != 3 or image.shape[0] != 3:
            raise ConfigError(f"expected a [3,H,W] image, got {image.shape}")
        h, w = image.shape[1], image.shape[2]
        top = self.config.top_stride
        if h % top or w % top:
            raise ConfigError(
                f"image extent {h}x{w} not divisible by top stride {top}; "
                f"pad the image (the dataset pipeline does this)"
            )
        x = nn.relu(self.stem_norm(self.stem(image)))
        x = nn.resample2d(x, "max_pool_2x2")
        laterals = []
        for stage, lateral in zip(self.stages, self.laterals):
            for block in stage:
                x = block(x)
            laterals.append(lateral(x.detach() if detach_trunk else x))
        merged = [laterals[-1]]
        for lat in reversed(laterals[:-1]):
            merged.append(nn.add(lat, nn.resample2d(merged[-1], "nearest_upsample_2x")))
        merged.reverse()
        return [smooth(m) for smooth, m in zip(self.smooths, merged)]


def build_backbone(config: BackboneConfig, seed: int) -> BackboneFpn:
    """Construct the backbone with deterministic seed-derived initialization."""
    return BackboneFpn(config, seed)


# Canonical RoI extent (pixels) mapped to the stride-16 level; larger RoIs
# move up the pyramid, smaller ones down.
CANONICAL_ROI_EXTENT = 224.0


def assign_roi_level(
    box: np.ndarray, image_h: int, image_w: int, num_levels: int
) -> int:
    """Pyramid level for a normalized RoI, by area.

    ``k = clamp(k0 + floor(log2(sqrt(area_px) / 224)))`` where ``k0`` is the
    stride-16 level.  Zero-area boxes go to the lowest level.
    """
    box = np.asarray(box, dtype=np.float64).reshape(4)
    h = (box[2] - box[0]) * image_h
    w = (box[3] - box[1]) * image_w
    area = h * w
    k0 = 2  # strides run 4, 8, 16, ... so index 2 is stride 16
    if area <= 0.0:
        return 0
    k = k0 + math.floor(math.log2(math.sqrt(area) / CANONICAL_ROI_EXTENT))
    return int(np.clip(k, 0, num_levels - 1))


def assign_roi_levels(
    boxes: np.ndarray, image_h: int, image_w: int, num_levels: int
) -> np.ndarray:
    """Vectorized :func:`assign_roi_level` over an (N, 4) normalized box array."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    area = (boxes[:, 2] - boxes[:, 0]) * image_h * (boxes[:, 3] - boxes[:, 1]) * image_w
    out = np.zeros(boxes.shape[0], dtype=np.int64)
    pos = area > 0.0
    k = 2 + np.floor(np.log2(np.sqrt(area[pos]) / CANONICAL_ROI_EXTENT))
    out[pos] = np.clip(k, 0, num_levels - 1).astype(np.int64)
    return out
