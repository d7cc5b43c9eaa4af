"""
DCMNet Encoders Module

HSI 3-D and LiDAR 2-D convolutional encoders plus the per-level projectors that map every
encoder level into the routing space (c channels on an s x s grid).
"""

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import ConvLayer, Tape, Tensor, activation, conv2d, conv3d, init_uniform, reshape

if TYPE_CHECKING:
    from .model import ModelConfig

STREAMS = ("hsi", "lidar")
LEVELS = 3
MIN_PATCH_SIZE = 7

# Preferred kernel extents per level; shrunk when a level is too small to hold them
HSI_DEPTH_KERNELS = (9, 7, 5)
HSI_SPATIAL_KERNELS = (3, 3, 3)
LIDAR_SPATIAL_KERNELS = (3, 3, 5)


@dataclass(frozen=True)
class ConvSpec:
    """Shape contract of one valid (stride 1, no padding) convolution."""

    input_shape: tuple[int, ...]  # (C_in, *spatial)
    output_shape: tuple[int, ...]  # (C_out, *spatial)
    kernel: tuple[int, ...]
    activation: str | None = "relu"

    @property
    def in_channels(self) -> int:
        return self.input_shape[0]

    @property
    def out_channels(self) -> int:
        return self.output_shape[0]

    @property
    def param_count(self) -> int:
        return self.out_channels * (self.in_channels * math.prod(self.kernel) + 1)

    @property
    def macs(self) -> int:
        """Multiply-accumulates for one sample."""
        return math.prod(self.output_shape) * self.in_channels * math.prod(self.kernel)


@dataclass(frozen=True)
class EncoderSpec:
    hsi_layers: tuple[ConvSpec, ...]
    lidar_layers: tuple[ConvSpec, ...]


@dataclass(frozen=True)
class ProjectorSpec:
    """One 2-D conv per stream and level; HSI inputs arrive depth-merged as (C*D, H, W)."""

    hsi: tuple[ConvSpec, ...]
    lidar: tuple[ConvSpec, ...]
    channels: int
    size: int

    def level(self, stream: str, level: int) -> ConvSpec:
        if stream not in STREAMS:
            raise ConfigError(f"Unknown stream: {stream!r} (expected one of {STREAMS})")
        specs = self.hsi if stream == "hsi" else self.lidar
        if not 1 <= level <= len(specs):
            raise ConfigError(f"projector level must be in 1..{len(specs)}, got {level}")
        return specs[level - 1]


def _fit_kernel(preferred: int, extent: int, keep: int, what: str) -> int:
    """Largest kernel <= preferred that leaves at least ``keep`` outputs along ``extent``."""
    kernel = min(preferred, extent - keep + 1)
    if kernel < 1:
        raise ConfigError(f"{what}: extent {extent} cannot keep {keep} outputs after convolution")
    return kernel


def build_encoder_spec(config: "ModelConfig") -> tuple[EncoderSpec, ProjectorSpec]:
    """
    Derive every encoder and projector shape from a model configuration.

    Depth kernels are the largest of 9/7/5 that fit; spatial kernels follow 3,3,3 (HSI) and
    3,3,5 (LiDAR) but shrink so every level keeps at least s x s positions. Configurations
    that cannot produce an s x s routing grid are rejected here rather than mid-forward.

    Raises:
        ConfigError: If the patch, component count or routing size is infeasible
    """
    p = config.patch_size
    s = config.routing.size
    if p < MIN_PATCH_SIZE or p % 2 == 0:
        raise ConfigError(f"patch size must be odd and >= {MIN_PATCH_SIZE}, got {p}")
    if s < 1:
        raise ConfigError(f"routing spatial size must be positive, got {s}")
    if len(config.hsi_widths) != LEVELS or len(config.lidar_widths) != LEVELS:
        raise ConfigError(f"each encoder needs exactly {LEVELS} layer widths")
    if min(config.hsi_widths + config.lidar_widths) < 1:
        raise ConfigError("encoder widths must be positive")

    hsi_layers = []
    shape = (1, config.components, p, p)
    for i, width in enumerate(config.hsi_widths):
        _, depth, size, _ = shape
        kd = _fit_kernel(HSI_DEPTH_KERNELS[i], depth, 1, f"HSI conv{i + 1} depth")
        ks = _fit_kernel(HSI_SPATIAL_KERNELS[i], size, s, f"HSI conv{i + 1}")
        out = (width, depth - kd + 1, size - ks + 1, size - ks + 1)
        hsi_layers.append(ConvSpec(shape, out, (kd, ks, ks)))
        shape = out

    lidar_layers = []
    shape = (config.lidar_channels, p, p)
    for i, width in enumerate(config.lidar_widths):
        size = shape[1]
        ks = _fit_kernel(LIDAR_SPATIAL_KERNELS[i], size, s, f"LiDAR conv{i + 1}")
        out = (width, size - ks + 1, size - ks + 1)
        lidar_layers.append(ConvSpec(shape, out, (ks, ks)))
        shape = out

    c = config.routing.channels
    hsi_projectors = []
    for layer in hsi_layers:
        width, depth, size, _ = layer.output_shape
        k = size - s + 1
        hsi_projectors.append(ConvSpec((width * depth, size, size), (c, s, s), (k, k), None))
    lidar_projectors = []
    for layer in lidar_layers:
        width, size, _ = layer.output_shape
        k = size - s + 1
        lidar_projectors.append(ConvSpec((width, size, size), (c, s, s), (k, k), None))

    return (
        EncoderSpec(tuple(hsi_layers), tuple(lidar_layers)),
        ProjectorSpec(tuple(hsi_projectors), tuple(lidar_projectors), c, s),
    )


@dataclass
class EncoderParams:
    """Trainable conv layers of both encoders and all six projectors."""

    hsi: list[ConvLayer]
    lidar: list[ConvLayer]
    hsi_projectors: list[ConvLayer]
    lidar_projectors: list[ConvLayer]

    def named(self) -> dict[str, Tensor]:
        named = {}
        groups = {
            "hsi.conv": self.hsi,
            "lidar.conv": self.lidar,
            "hsi.projector": self.hsi_projectors,
            "lidar.projector": self.lidar_projectors,
        }
        for prefix, layers in groups.items():
            for i, layer in enumerate(layers, start=1):
                named[f"{prefix}{i}.weight"] = layer.weight
                named[f"{prefix}{i}.bias"] = layer.bias
        return named


def _init_conv(spec: ConvSpec, rng: np.random.Generator) -> ConvLayer:
    fan_in = spec.in_channels * math.prod(spec.kernel)
    return ConvLayer(
        weight=init_uniform(rng, (spec.out_channels, spec.in_channels, *spec.kernel), fan_in),
        bias=init_uniform(rng, (spec.out_channels,), fan_in),
    )


def init_encoder_params(
    encoder: EncoderSpec, projector: ProjectorSpec, rng: np.random.Generator
) -> EncoderParams:
    return EncoderParams(
        hsi=[_init_conv(spec, rng) for spec in encoder.hsi_layers],
        lidar=[_init_conv(spec, rng) for spec in encoder.lidar_layers],
        hsi_projectors=[_init_conv(spec, rng) for spec in projector.hsi],
        lidar_projectors=[_init_conv(spec, rng) for spec in projector.lidar],
    )


def _check_input(x: Tensor, expected: tuple[int, ...], what: str) -> bool:
    """Validate [*expected] or [N, *expected]; returns whether ``x`` is batched."""
    if x.shape == expected:
        return False
    if x.ndim == len(expected) + 1 and x.shape[1:] == expected:
        return True
    raise ShapeError(f"{what}: input {x.shape} does not match expected {expected}")


def encode_hsi(
    patch: Tensor, spec: EncoderSpec, params: EncoderParams, tape: Tape | None = None
) -> list[Tensor]:
    """
    Run the 3-D HSI encoder on a (K, p, p) patch or an (N, K, p, p) batch.

    The patch is treated as a one-channel volume; returns the three post-ReLU levels.
    """
    first = spec.hsi_layers[0].input_shape
    batched = _check_input(patch, first[1:], "encode_hsi")
    x = reshape(patch, (patch.shape[0], *first) if batched else first, tape)
    levels = []
    for layer_spec, layer in zip(spec.hsi_layers, params.hsi, strict=True):
        x = activation(conv3d(x, layer, tape), layer_spec.activation, tape)
        levels.append(x)
    return levels


def encode_lidar(
    patch: Tensor, spec: EncoderSpec, params: EncoderParams, tape: Tape | None = None
) -> list[Tensor]:
    """Run the 2-D LiDAR encoder on a (c_l, p, p) patch or an (N, c_l, p, p) batch."""
    _check_input(patch, spec.lidar_layers[0].input_shape, "encode_lidar")
    x = patch
    levels = []
    for layer_spec, layer in zip(spec.lidar_layers, params.lidar, strict=True):
        x = activation(conv2d(x, layer, tape), layer_spec.activation, tape)
        levels.append(x)
    return levels


def project(
    level_features: Tensor,
    level: int,
    stream: str,
    spec: ProjectorSpec,
    params: EncoderParams,
    tape: Tape | None = None,
) -> Tensor:
    """
    Map encoder level ``level`` (1-based) of ``stream`` to the (c, s, s) routing grid.

    HSI features (C, D, H, W) are merged depth-into-channels before the 2-D projector conv.
    """
    conv_spec = spec.level(stream, level)
    layers = params.hsi_projectors if stream == "hsi" else params.lidar_projectors
    x = level_features
    if stream == "hsi":
        if x.ndim == 5:
            n, c, d, h, w = x.shape
            x = reshape(x, (n, c * d, h, w), tape)
        elif x.ndim == 4:
            c, d, h, w = x.shape
            x = reshape(x, (c * d, h, w), tape)
        else:
            raise ShapeError(f"project: HSI level {level} features must be 4-D or 5-D, got {x.shape}")
    _check_input(x, conv_spec.input_shape, f"project {stream} level {level}")
    return conv2d(x, layers[level - 1], tape)
