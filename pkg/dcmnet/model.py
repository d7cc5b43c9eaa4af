"""
DCMNet Model Module

Model configuration and presets, the assembled network (encoders, projectors, routing space,
classifier head), per-layer shape and cost accounting and the DYNM checkpoint container.
"""

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import (
    LEVELS,
    ConvSpec,
    EncoderParams,
    build_encoder_spec,
    encode_hsi,
    encode_lidar,
    init_encoder_params,
    project,
)
from .errors import CheckpointError, ConfigError, NonFiniteError
from .numerics import Tape, Tensor, rng_stream
from .preprocessing import PcaModel, Preprocessor, Standardizer
from .routing import (
    BLOCKS,
    RoutingConfig,
    RoutingOutput,
    RoutingParams,
    init_routing_params,
    routing_forward,
)
from .storage import atomic_write_bytes, canonical_json

CHECKPOINT_MAGIC = b"DYNM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Everything that fixes the network's shapes."""

    bands: int = 144
    components: int = 30
    patch_size: int = 11
    lidar_channels: int = 1
    num_classes: int = 15
    hsi_widths: tuple[int, int, int] = (8, 16, 32)
    lidar_widths: tuple[int, int, int] = (64, 128, 128)
    routing: RoutingConfig = field(default_factory=RoutingConfig)

    def __post_init__(self):
        object.__setattr__(self, "hsi_widths", tuple(self.hsi_widths))
        object.__setattr__(self, "lidar_widths", tuple(self.lidar_widths))
        if self.bands < 1 or self.lidar_channels < 1 or self.num_classes < 1:
            raise ConfigError("bands, lidar_channels and num_classes must be positive")
        if not 1 <= self.components <= self.bands:
            raise ConfigError(
                f"components must be in 1..{self.bands} (the band count), got {self.components}"
            )

    def replace(self, **changes) -> "ModelConfig":
        """Copy with top-level fields changed; routing fields may be passed by name too."""
        routing_fields = {f.name for f in dataclasses.fields(RoutingConfig)}
        routing_changes = {k: changes.pop(k) for k in list(changes) if k in routing_fields}
        if routing_changes:
            changes["routing"] = dataclasses.replace(self.routing, **routing_changes)
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "bands": self.bands,
            "components": self.components,
            "patch_size": self.patch_size,
            "lidar_channels": self.lidar_channels,
            "num_classes": self.num_classes,
            "hsi_widths": list(self.hsi_widths),
            "lidar_widths": list(self.lidar_widths),
            "routing": self.routing.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict, base: "ModelConfig | None" = None) -> "ModelConfig":
        """Build from a (possibly partial) dict layered over ``base``."""
        base = base or cls()
        known = set(base.to_dict())
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        values = {k: v for k, v in data.items() if k != "routing"}
        if "routing" in data:
            merged = {**base.routing.to_dict(), **data["routing"]}
            values["routing"] = RoutingConfig.from_dict(merged)
        return dataclasses.replace(base, **values)


PRESETS = {
    "houston2013": ModelConfig(),
    "desk": ModelConfig(
        bands=20,
        components=10,
        patch_size=11,
        num_classes=6,
        hsi_widths=(4, 8, 8),
        lidar_widths=(8, 16, 16),
        routing=RoutingConfig(channels=16, size=3, gate_hidden=32),
    ),
}


def preset(name: str) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"Unknown preset: {name!r} (available: {', '.join(PRESETS)})")
    return PRESETS[name]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class DCMNet:
    """
    The assembled network.

    Holds the configuration, the derived encoder/projector shapes, every trainable tensor and
    optionally the preprocessing fitted on the training data.
    """

    def __init__(
        self,
        config: ModelConfig,
        encoder: EncoderParams,
        routing: RoutingParams,
        preprocessor: Preprocessor | None = None,
    ):
        self.config = config
        self.encoder_spec, self.projector_spec = build_encoder_spec(config)
        self.encoder = encoder
        self.routing = routing
        self.preprocessor = preprocessor

    @property
    def used_levels(self) -> range:
        """1-based encoder levels that feed routing layers (the deepest L)."""
        return range(LEVELS - self.config.routing.layers + 1, LEVELS + 1)

    def named_parameters(self) -> dict[str, Tensor]:
        unused = [f"projector{k}." for k in range(1, self.used_levels.start)]
        named = {
            name: tensor
            for name, tensor in self.encoder.named().items()
            if not any(tag in name for tag in unused)
        }
        named.update(self.routing.named())
        return named

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def forward(self, hsi, lidar, tape: Tape | None = None, gate_override=None) -> RoutingOutput:
        """
        Classify one sample ((K, p, p), (c_l, p, p)) or a batch ((N, K, p, p), (N, c_l, p, p)).

        Returns:
            RoutingOutput with logits, the routing trace, the fused feature and the final
            layer's block outputs
        """
        hsi, lidar = _as_tensor(hsi), _as_tensor(lidar)
        levels_h = encode_hsi(hsi, self.encoder_spec, self.encoder, tape)
        levels_l = encode_lidar(lidar, self.encoder_spec, self.encoder, tape)
        projected_h = [
            project(levels_h[k - 1], k, "hsi", self.projector_spec, self.encoder, tape)
            for k in self.used_levels
        ]
        projected_l = [
            project(levels_l[k - 1], k, "lidar", self.projector_spec, self.encoder, tape)
            for k in self.used_levels
        ]
        return routing_forward(
            projected_h, projected_l, self.config.routing, self.routing, gate_override, tape
        )

    __call__ = forward


def build_model(config: ModelConfig, seed: int = 0) -> DCMNet:
    """Initialize a model from the seed's "init" stream."""
    encoder_spec, projector_spec = build_encoder_spec(config)
    rng = rng_stream(seed, "init")
    encoder = init_encoder_params(encoder_spec, projector_spec, rng)
    routing = init_routing_params(config.routing, config.num_classes, rng)
    return DCMNet(config, encoder, routing)


# ---------------------------------------------------------------------------
# Layer accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerRow:
    name: str
    input: str
    output: str
    kernel: str
    params: int
    flops: int


def format_shape(shape) -> str:
    """(30, 11, 11) -> "(30, 11, 11)"; a single extent prints bare."""
    shape = tuple(shape)
    if len(shape) == 1:
        return str(shape[0])
    return "(" + ", ".join(str(v) for v in shape) + ")"


def _conv_kernel(spec: ConvSpec, padding: int = 0) -> str:
    kind = f"{len(spec.kernel)}D CNN"
    return f"{kind} ({'x'.join(str(k) for k in spec.kernel)}, stride=1, padding={padding})"


def layer_table(config: ModelConfig) -> list[LayerRow]:
    """
    Per-layer shapes, parameter counts and FLOPs (2 x multiply-accumulates) of one forward pass.

    The Projector row sums every used projector and routing rows aggregate all L layers of a
    block type (see ``layer_details`` for the breakdown). Activation and softmax costs are not
    counted.
    """
    encoder, projector = build_encoder_spec(config)
    routing = config.routing
    c, s, d = routing.channels, routing.size, routing.d
    p = config.patch_size
    rows = [
        LayerRow(
            "PCA (HSI Preprocessing)",
            "HSI: " + format_shape((config.bands, p, p)),
            format_shape((config.components, p, p)),
            "PCA projection",
            0,
            0,
        )
    ]
    for i, spec in enumerate(encoder.hsi_layers, start=1):
        shape = format_shape(spec.input_shape)
        rows.append(
            LayerRow(
                f"3D Conv{i} (HSI Feature Extraction)",
                shape,
                format_shape(spec.output_shape),
                _conv_kernel(spec),
                spec.param_count,
                2 * spec.macs,
            )
        )
    for i, spec in enumerate(encoder.lidar_layers, start=1):
        shape = format_shape(spec.input_shape)
        rows.append(
            LayerRow(
                f"2D Conv{i} (LiDAR Feature Extraction)",
                ("LiDAR: " + shape) if i == 1 else shape,
                format_shape(spec.output_shape),
                _conv_kernel(spec),
                spec.param_count,
                2 * spec.macs,
            )
        )
    projectors = _projector_rows(config, projector)
    shrink = s - 1
    side = f"(P-{shrink})" if shrink else "P"
    rows.append(
        LayerRow(
            "Projector (Input to Routing Space)",
            "(C, P, P)",
            format_shape((c, s, s)),
            f"2D CNN ({side}x{side}, stride=1, padding=0)",
            sum(r.params for r in projectors),
            sum(r.flops for r in projectors),
        )
    )

    grid = format_shape((c, s, s))
    for name, _, params, macs in _routing_units(config):
        if name.startswith("Router"):
            hidden = routing.gate_hidden
            rows.append(LayerRow(name, grid, format_shape((hidden, hidden)), "N/A", params, 2 * macs))
        else:
            rows.append(LayerRow(name, f"{grid}, {grid}", grid, "N/A", params, 2 * macs))

    rows.append(
        LayerRow(
            "Aggregation Layer (Final Output)",
            grid,
            format_shape((config.num_classes,)),
            "N/A",
            config.num_classes * (c * d + 1),
            2 * c * d * config.num_classes,
        )
    )
    return rows


def _projector_rows(config: ModelConfig, projector) -> list[LayerRow]:
    used = range(LEVELS - config.routing.layers + 1, LEVELS + 1)
    rows = []
    for stream, label in (("hsi", "HSI"), ("lidar", "LiDAR")):
        for level in used:
            spec = projector.level(stream, level)
            rows.append(
                LayerRow(
                    f"Projector {label}-{level}",
                    format_shape(spec.input_shape),
                    format_shape(spec.output_shape),
                    _conv_kernel(spec),
                    spec.param_count,
                    2 * spec.macs,
                )
            )
    return rows


def _routing_units(config: ModelConfig) -> list[tuple[str, str, int, int]]:
    """(name, operator detail, params, MACs) of the router and each enabled block, all layers."""
    routing = config.routing
    c, d, layers = routing.channels, routing.d, routing.layers
    units = []
    if routing.router_mode == "soft":
        hidden = routing.gate_hidden
        copies = len(routing.enabled_blocks) * layers
        units.append(
            (
                "Router (Feature Interactive Blocks Routing)",
                f"FC {c * d}x{hidden}, FC {hidden}x3 (x{copies})",
                copies * (hidden * (c * d + 1) + 3 * (hidden + 1)),
                copies * (c * d * hidden + hidden * 3),
            )
        )

    conv_params = c * (9 * c + 1)
    conv_macs = c * d * 9 * c
    qkv_params = 6 * (d * d + d)
    qkv_macs = 6 * c * d * d
    attention = f"Linear {d}x{d} (x6), 2D CNN (3x3, stride=1, padding=1)"
    blocks = {
        "BSAB": (
            "BSAB (Bilinear Spatial Attention Block)",
            attention,
            qkv_params + conv_params,
            qkv_macs + 2 * c * d * d + conv_macs,
        ),
        "BCAB": (
            "BCAB (Bilinear Channel Attention Block)",
            attention,
            qkv_params + conv_params,
            qkv_macs + 2 * c * c * d + conv_macs,
        ),
        "ICB": (
            "ICB (Integration Convolutional Block)",
            "2D CNN (3x3, stride=1, padding=1)",
            conv_params,
            conv_macs,
        ),
    }
    for block in BLOCKS:
        if block in routing.enabled_blocks:
            name, detail, params, macs = blocks[block]
            units.append((name, detail, layers * params, layers * macs))
    return units


def layer_details(config: ModelConfig) -> list[LayerRow]:
    """
    Breakdown of the aggregated rows of ``layer_table``: one row per projector, and the
    operators behind the router and each block. Not additive with ``layer_table``.
    """
    _, projector = build_encoder_spec(config)
    rows = _projector_rows(config, projector)
    grid = format_shape((config.routing.channels, config.routing.size, config.routing.size))
    for name, detail, params, macs in _routing_units(config):
        output = "3" if name.startswith("Router") else grid
        rows.append(LayerRow(name.split(" ")[0], grid, output, detail, params, 2 * macs))
    return rows


def model_cost(config: ModelConfig) -> dict[str, int]:
    rows = layer_table(config)
    return {
        "param_count": sum(r.params for r in rows),
        "flops_per_sample": sum(r.flops for r in rows),
    }


# ---------------------------------------------------------------------------
# DYNM checkpoints
# ---------------------------------------------------------------------------

_PREPROCESS_TENSORS = (
    "preprocess.pca.mean",
    "preprocess.pca.components",
    "preprocess.pca.explained_variance",
    "preprocess.standardizer.hsi_mean",
    "preprocess.standardizer.hsi_std",
    "preprocess.standardizer.lidar_mean",
    "preprocess.standardizer.lidar_std",
)


def _preprocess_arrays(preprocessor: Preprocessor) -> dict[str, np.ndarray]:
    pca, std = preprocessor.pca, preprocessor.standardizer
    values = (
        pca.mean,
        pca.components,
        pca.explained_variance,
        std.hsi_mean,
        std.hsi_std,
        std.lidar_mean,
        std.lidar_std,
    )
    return dict(zip(_PREPROCESS_TENSORS, values, strict=True))


def encode_checkpoint(model: DCMNet) -> bytes:
    header = canonical_json({"model": model.config.to_dict()})
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(header)), header]
    arrays = {name: t.data for name, t in model.named_parameters().items()}
    if model.preprocessor is not None:
        arrays.update(_preprocess_arrays(model.preprocessor))
    for name, array in arrays.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(model: DCMNet, path: str | Path) -> Path:
    """Write parameters (and fitted preprocessing, when present) as a DYNM file."""
    return atomic_write_bytes(path, encode_checkpoint(model))


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw = raw
        self.offset = 0
        self.source = source

    @property
    def exhausted(self) -> bool:
        return self.offset >= len(self.raw)

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.raw):
            raise CheckpointError(f"{self.source}: truncated while reading {what}")
        chunk = self.raw[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> DCMNet:
    """Rebuild a model from DYNM bytes; every stored tensor must match the config's layout."""
    reader = _Reader(raw, source)
    if reader.take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: not a DYNM checkpoint")
    version, header_length = reader.unpack("<HI", "header")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{source}: DYNM version {version} is not supported")
    try:
        header = json.loads(reader.take(header_length, "config").decode("utf-8"))
        config = ModelConfig.from_dict(header["model"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise CheckpointError(f"{source}: unreadable model config ({e})") from e
    except ConfigError as e:
        raise CheckpointError(f"{source}: invalid model config: {e}") from e

    arrays: dict[str, np.ndarray] = {}
    while not reader.exhausted:
        (name_length,) = reader.unpack("<H", "tensor name length")
        raw_name = reader.take(name_length, "tensor name")
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"{source}: tensor name {raw_name!r} is not UTF-8") from e
        (rank,) = reader.unpack("<B", f"rank of {name}")
        shape = reader.unpack(f"<{rank}I", f"shape of {name}")
        count = math.prod(shape)
        payload = reader.take(8 * count, f"payload of {name}")
        if name in arrays:
            raise CheckpointError(f"{source}: duplicate tensor {name!r}")
        arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)

    model = build_model(config)
    expected = model.named_parameters()
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected) - set(_PREPROCESS_TENSORS))
    if missing or extra:
        raise CheckpointError(
            f"{source}: tensors do not match the stored config (missing {missing[:3]}, "
            f"unexpected {extra[:3]})"
        )
    for name, tensor in expected.items():
        if arrays[name].shape != tensor.shape:
            raise CheckpointError(
                f"{source}: {name} has shape {arrays[name].shape}, config expects {tensor.shape}"
            )
        try:
            tensor.assign(arrays[name])
        except NonFiniteError as e:
            raise CheckpointError(f"{source}: {name}: {e}") from e

    present = [n for n in _PREPROCESS_TENSORS if n in arrays]
    if present:
        if len(present) != len(_PREPROCESS_TENSORS):
            raise CheckpointError(f"{source}: incomplete preprocessing tensors")
        values = [arrays[n] for n in _PREPROCESS_TENSORS]
        model.preprocessor = Preprocessor(
            pca=PcaModel(*values[:3]),
            standardizer=Standardizer(*values[3:]),
            patch_size=config.patch_size,
        )
    return model


def load_checkpoint(path: str | Path) -> DCMNet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint file not found: {path}")
    return decode_checkpoint(path.read_bytes(), str(path))
