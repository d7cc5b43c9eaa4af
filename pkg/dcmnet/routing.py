"""
DCMNet Routing Space

The L-layer, fully connected grid of feature interactive blocks. Every layer holds a bilinear
spatial attention block (BSAB), a bilinear channel attention block (BCAB) and an integration
convolutional block (ICB); each block's gate decides how much of its output flows to each block
of the next layer. Also holds path extraction over recorded gates.
"""

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import polars as pl

from .errors import ConfigError, ShapeError
from .numerics import (
    ConvLayer,
    LinearLayer,
    Tape,
    Tensor,
    activation,
    add,
    conv2d,
    init_uniform,
    linear,
    matmul,
    mul,
    reshape,
    scale,
    softmax,
    take,
    transpose,
)

BLOCKS = ("BSAB", "BCAB", "ICB")
ATTENTION_KINDS = ("bilinear", "self")
ROUTER_MODES = ("soft", "uniform_average", "off")
DEFAULT_ROUTE_THRESHOLD = 0.3
HEAD = "head"


@dataclass(frozen=True)
class RoutingConfig:
    """Shape and ablation switches of the routing space."""

    layers: int = 3
    channels: int = 128
    size: int = 3
    gate_hidden: int = 256
    enabled_blocks: tuple[str, ...] = BLOCKS
    attention_kind: str = "bilinear"
    router_mode: str = "soft"
    gate_bias_init: float = 1.5

    def __post_init__(self):
        if not 1 <= self.layers <= 3:
            raise ConfigError(f"routing layers must be 1, 2 or 3, got {self.layers}")
        if self.channels < 1 or self.size < 1 or self.gate_hidden < 1:
            raise ConfigError("routing channels, size and gate_hidden must be positive")
        blocks = tuple(self.enabled_blocks)
        if not blocks:
            raise ConfigError("at least one routing block must be enabled")
        unknown = [b for b in blocks if b not in BLOCKS]
        if unknown or len(set(blocks)) != len(blocks):
            raise ConfigError(f"enabled_blocks must be distinct names from {BLOCKS}, got {blocks}")
        # Canonical order keeps equal configs equal
        object.__setattr__(self, "enabled_blocks", tuple(b for b in BLOCKS if b in blocks))
        if self.attention_kind not in ATTENTION_KINDS:
            raise ConfigError(
                f"attention_kind must be one of {ATTENTION_KINDS}, got {self.attention_kind!r}"
            )
        if self.router_mode not in ROUTER_MODES:
            raise ConfigError(f"router_mode must be one of {ROUTER_MODES}, got {self.router_mode!r}")

    @property
    def d(self) -> int:
        return self.size * self.size

    @property
    def enabled_mask(self) -> tuple[bool, bool, bool]:
        return tuple(b in self.enabled_blocks for b in BLOCKS)

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "channels": self.channels,
            "size": self.size,
            "gate_hidden": self.gate_hidden,
            "enabled_blocks": list(self.enabled_blocks),
            "attention_kind": self.attention_kind,
            "router_mode": self.router_mode,
            "gate_bias_init": self.gate_bias_init,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RoutingConfig":
        unknown = set(data) - set(cls().to_dict())
        if unknown:
            raise ConfigError(f"unknown routing keys: {sorted(unknown)}")
        values = dict(data)
        if "enabled_blocks" in values:
            values["enabled_blocks"] = tuple(values["enabled_blocks"])
        return cls(**values)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class AttentionParams:
    """Per-stream query/key/value maps, each acting on the d spatial entries of every channel."""

    q_h: LinearLayer
    k_h: LinearLayer
    v_h: LinearLayer
    q_l: LinearLayer
    k_l: LinearLayer
    v_l: LinearLayer

    MAPS = ("q_h", "k_h", "v_h", "q_l", "k_l", "v_l")


@dataclass
class GateParams:
    fc1: LinearLayer  # c*d -> gate_hidden
    fc2: LinearLayer  # gate_hidden -> 3


@dataclass
class BlockParams:
    conv: ConvLayer  # 3x3, padding 1, c -> c
    attention: AttentionParams | None = None  # None for ICB
    gate: GateParams | None = None  # None unless the router is soft


@dataclass
class RoutingParams:
    blocks: list[list[BlockParams | None]]  # [layer][block], None where disabled
    head: LinearLayer  # c*d -> num_classes

    def named(self) -> dict[str, Tensor]:
        named = {}
        for k, layer in enumerate(self.blocks, start=1):
            for name, block in zip(BLOCKS, layer, strict=True):
                if block is None:
                    continue
                prefix = f"routing.layer{k}.{name}"
                named[f"{prefix}.conv.weight"] = block.conv.weight
                named[f"{prefix}.conv.bias"] = block.conv.bias
                if block.attention is not None:
                    for map_name in AttentionParams.MAPS:
                        layer_params = getattr(block.attention, map_name)
                        named[f"{prefix}.attention.{map_name}.weight"] = layer_params.weight
                        named[f"{prefix}.attention.{map_name}.bias"] = layer_params.bias
                if block.gate is not None:
                    for fc_name in ("fc1", "fc2"):
                        fc = getattr(block.gate, fc_name)
                        named[f"{prefix}.gate.{fc_name}.weight"] = fc.weight
                        named[f"{prefix}.gate.{fc_name}.bias"] = fc.bias
        named["head.weight"] = self.head.weight
        named["head.bias"] = self.head.bias
        return named


def _init_linear(rng: np.random.Generator, n_in: int, n_out: int) -> LinearLayer:
    return LinearLayer(init_uniform(rng, (n_out, n_in), n_in), init_uniform(rng, (n_out,), n_in))


def init_routing_params(
    config: RoutingConfig, num_classes: int, rng: np.random.Generator
) -> RoutingParams:
    """
    Draw every routing parameter from ``rng``.

    Parameters of all three blocks and their gates are drawn regardless of the ablation
    switches, so two configs built from the same seed share identical weights for the parts
    they have in common.
    """
    c, d = config.channels, config.d
    enabled = config.enabled_mask
    blocks = []
    for _ in range(config.layers):
        layer = []
        for index, name in enumerate(BLOCKS):
            conv = ConvLayer(
                weight=init_uniform(rng, (c, c, 3, 3), c * 9),
                bias=init_uniform(rng, (c,), c * 9),
                padding=1,
            )
            attention = None
            if name != "ICB":
                attention = AttentionParams(*(_init_linear(rng, d, d) for _ in AttentionParams.MAPS))
            fc1 = _init_linear(rng, c * d, config.gate_hidden)
            fc2 = LinearLayer(
                weight=init_uniform(rng, (3, config.gate_hidden), config.gate_hidden),
                bias=Tensor(np.full(3, config.gate_bias_init), requires_grad=True),
            )
            gate = GateParams(fc1, fc2) if config.router_mode == "soft" else None
            layer.append(BlockParams(conv, attention, gate) if enabled[index] else None)
        blocks.append(layer)
    return RoutingParams(blocks=blocks, head=_init_linear(rng, c * d, num_classes))


# ---------------------------------------------------------------------------
# Attention cores and calculation units
# ---------------------------------------------------------------------------


def _flatten_spatial(x: Tensor, tape: Tape | None) -> Tensor:
    """(..., c, s, s) -> (..., c, d)"""
    if x.ndim < 3:
        raise ShapeError(f"routing features must be (..., c, s, s), got {x.shape}")
    return reshape(x, (*x.shape[:-2], x.shape[-2] * x.shape[-1]), tape)


def bilinear_values(
    q_h: Tensor, v_h: Tensor, q_l: Tensor, v_l: Tensor, tape: Tape | None = None
) -> tuple[Tensor, Tensor]:
    """Second-order values: each stream's V gated elementwise by the other stream's Q."""
    if not q_h.shape == v_h.shape == q_l.shape == v_l.shape:
        raise ShapeError(
            f"bilinear_values: shapes differ: {q_h.shape}, {v_h.shape}, {q_l.shape}, {v_l.shape}"
        )
    return mul(v_h, q_l, tape), mul(v_l, q_h, tape)


def channel_attention(q: Tensor, k: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """softmax(Q K^T / sqrt(d)) B with a c x c attention matrix."""
    scores = scale(matmul(q, transpose(k, tape), tape), 1.0 / math.sqrt(q.shape[-1]), tape)
    return matmul(softmax(scores, -1, tape), b, tape)


def spatial_attention(q: Tensor, k: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """B A^T with A = softmax(Q^T K / sqrt(c)), a d x d attention over spatial positions."""
    scores = scale(matmul(transpose(q, tape), k, tape), 1.0 / math.sqrt(q.shape[-2]), tape)
    return matmul(b, transpose(softmax(scores, -1, tape), tape), tape)


def _attend(
    f_h: Tensor,
    f_l: Tensor,
    params: AttentionParams,
    attention_kind: str,
    core,
    tape: Tape | None,
) -> tuple[Tensor, Tensor]:
    if f_h.shape != f_l.shape:
        raise ShapeError(f"HSI features {f_h.shape} and LiDAR features {f_l.shape} differ")
    flat_h, flat_l = _flatten_spatial(f_h, tape), _flatten_spatial(f_l, tape)
    q_h, k_h, v_h = (linear(flat_h, m, tape) for m in (params.q_h, params.k_h, params.v_h))
    q_l, k_l, v_l = (linear(flat_l, m, tape) for m in (params.q_l, params.k_l, params.v_l))
    if attention_kind == "bilinear":
        b_h, b_l = bilinear_values(q_h, v_h, q_l, v_l, tape)
    elif attention_kind == "self":
        b_h, b_l = v_h, v_l
    else:
        raise ConfigError(f"attention_kind must be one of {ATTENTION_KINDS}, got {attention_kind!r}")
    ca_h = reshape(core(q_h, k_h, b_h, tape), f_h.shape, tape)
    ca_l = reshape(core(q_l, k_l, b_l, tape), f_l.shape, tape)
    return ca_h, ca_l


def bca_channel(
    f_h: Tensor,
    f_l: Tensor,
    params: AttentionParams,
    attention_kind: str = "bilinear",
    tape: Tape | None = None,
) -> tuple[Tensor, Tensor]:
    """Channel-wise (bilinear) cross-attention of both streams."""
    return _attend(f_h, f_l, params, attention_kind, channel_attention, tape)


def bca_spatial(
    f_h: Tensor,
    f_l: Tensor,
    params: AttentionParams,
    attention_kind: str = "bilinear",
    tape: Tape | None = None,
) -> tuple[Tensor, Tensor]:
    """Spatial-wise (bilinear) cross-attention of both streams."""
    return _attend(f_h, f_l, params, attention_kind, spatial_attention, tape)


def _fuse(a: Tensor, b: Tensor, x: Tensor | None, conv: ConvLayer, tape: Tape | None) -> Tensor:
    """Conv3x3(a + b + x) with shape-preserving padding; absent x counts as zeros."""
    z = add(a, b, tape)
    if x is not None:
        if x.shape != z.shape:
            raise ShapeError(f"block input {x.shape} does not match features {z.shape}")
        z = add(z, x, tape)
    return conv2d(z, conv, tape)


def bsab_forward(
    f_h: Tensor,
    f_l: Tensor,
    x: Tensor | None,
    params: BlockParams,
    attention_kind: str = "bilinear",
    tape: Tape | None = None,
) -> Tensor:
    ca_h, ca_l = bca_spatial(f_h, f_l, params.attention, attention_kind, tape)
    return _fuse(ca_h, ca_l, x, params.conv, tape)


def bcab_forward(
    f_h: Tensor,
    f_l: Tensor,
    x: Tensor | None,
    params: BlockParams,
    attention_kind: str = "bilinear",
    tape: Tape | None = None,
) -> Tensor:
    ca_h, ca_l = bca_channel(f_h, f_l, params.attention, attention_kind, tape)
    return _fuse(ca_h, ca_l, x, params.conv, tape)


def icb_forward(
    f_h: Tensor,
    f_l: Tensor,
    x: Tensor | None,
    params: BlockParams,
    attention_kind: str = "bilinear",
    tape: Tape | None = None,
) -> Tensor:
    """Plain integration: Conv3x3(F_h + F_l + X). ``attention_kind`` is accepted and ignored."""
    if f_h.shape != f_l.shape:
        raise ShapeError(f"HSI features {f_h.shape} and LiDAR features {f_l.shape} differ")
    return _fuse(f_h, f_l, x, params.conv, tape)


BLOCK_FORWARD = {"BSAB": bsab_forward, "BCAB": bcab_forward, "ICB": icb_forward}


# ---------------------------------------------------------------------------
# Gates and aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GateVector:
    """Path weights from one block to the three blocks of the next layer."""

    values: tuple[float, float, float]

    def __getitem__(self, index: int) -> float:
        return self.values[index]


def routing_gate(
    f_h: Tensor,
    f_l: Tensor,
    x: Tensor | None,
    params: GateParams,
    tape: Tape | None = None,
) -> Tensor:
    """
    Path probabilities max(0, tanh(FC2(ReLU(FC1(flatten(F_h + F_l + X)))))).

    Returns a (3,) tensor, or (N, 3) for batched features; every entry lies in [0, 1).
    """
    if f_h.shape != f_l.shape:
        raise ShapeError(f"HSI features {f_h.shape} and LiDAR features {f_l.shape} differ")
    z = add(f_h, f_l, tape)
    if x is not None:
        if x.shape != z.shape:
            raise ShapeError(f"gate input {x.shape} does not match features {z.shape}")
        z = add(z, x, tape)
    flat_size = math.prod(z.shape[-3:])
    z = reshape(z, (*z.shape[:-3], flat_size), tape)
    hidden = activation(linear(z, params.fc1, tape), "relu", tape)
    return activation(linear(hidden, params.fc2, tape), "restricted_tanh", tape)


def aggregate(
    outputs: list[Tensor | None],
    gates: list[Tensor | None],
    target: int,
    tape: Tape | None = None,
) -> Tensor:
    """
    Input of block ``target`` (index into BLOCKS) at the next layer.

    Sums w_j[target] * H_j over the source blocks j that are present: each source block's
    own gate decides how much of its output reaches ``target``.
    """
    terms = []
    for h, w in zip(outputs, gates, strict=True):
        if h is None:
            continue
        if w is None:
            raise ShapeError("every present block output needs a gate vector")
        if w.shape[-1] != len(BLOCKS) or w.shape[:-1] != h.shape[: w.ndim - 1]:
            raise ShapeError(f"gate {w.shape} does not fit block output {h.shape}")
        terms.append(scale(h, take(w, target, tape), tape))
    if not terms:
        raise ShapeError("aggregate needs at least one block output")
    shapes = {t.shape for t in terms}
    if len(shapes) != 1:
        raise ShapeError(f"block outputs differ in shape: {sorted(shapes)}")
    result = terms[0]
    for term in terms[1:]:
        result = add(result, term, tape)
    return result


def _constant(data: np.ndarray) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64))


def _pin(gate: Tensor, override: np.ndarray, tape: Tape | None) -> Tensor:
    """Replace the non-NaN entries of ``override`` in ``gate``; pinned entries get no gradient."""
    mask = ~np.isnan(override)
    data = np.where(mask, override, gate.data)
    if tape is None:
        return Tensor(data)
    return tape.record("pin", data, (gate,), lambda g: (g * ~mask,))


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


@dataclass
class RoutingTrace:
    """Gate values of every sample: gates[n, k, i, j] is the weight from block i at layer k+1 to block j."""

    gates: np.ndarray  # (N, L, 3, 3)
    enabled: tuple[bool, bool, bool] = (True, True, True)

    def __post_init__(self):
        self.gates = np.asarray(self.gates, dtype=np.float64)
        if self.gates.ndim != 4 or self.gates.shape[2:] != (3, 3):
            raise ShapeError(f"routing trace must be (N, L, 3, 3), got {self.gates.shape}")

    @property
    def num_samples(self) -> int:
        return self.gates.shape[0]

    @property
    def layers(self) -> int:
        return self.gates.shape[1]

    def gate(self, sample: int, layer: int, block: int) -> GateVector:
        """Gate of ``block`` (index into BLOCKS) at ``layer`` (1-based)."""
        return GateVector(tuple(float(v) for v in self.gates[sample, layer - 1, block]))


@dataclass
class RoutingOutput:
    logits: Tensor  # (C,) or (N, C)
    trace: RoutingTrace
    fused: Tensor  # mean of the enabled blocks' final outputs
    block_outputs: list[Tensor | None] = field(default_factory=list)  # final layer, per block


def _as_override(gate_override, layers: int, batch: int) -> np.ndarray | None:
    if gate_override is None:
        return None
    override = np.asarray(gate_override, dtype=np.float64)
    if override.shape == (layers, 3, 3):
        return np.broadcast_to(override, (batch, layers, 3, 3))
    if override.shape == (batch, layers, 3, 3):
        return override
    raise ShapeError(
        f"gate_override must be ({layers}, 3, 3) or ({batch}, {layers}, 3, 3), got {override.shape}"
    )


def routing_forward(
    levels_h: list[Tensor],
    levels_l: list[Tensor],
    config: RoutingConfig,
    params: RoutingParams,
    gate_override=None,
    tape: Tape | None = None,
) -> RoutingOutput:
    """
    Push projected encoder levels through the routing space and the classifier head.

    Routing layer k consumes encoder level (len(levels) - L + k), i.e. the deepest L levels.
    Each enabled block computes its output and gate; the next layer's block i receives the
    gate-weighted sum of this layer's outputs. Final-layer outputs of the enabled blocks are
    averaged, flattened and mapped to class logits. ``gate_override`` pins gates: an
    (L, 3, 3) or (N, L, 3, 3) array whose non-NaN entries replace the computed values.

    Router modes:
        soft: learned gates
        uniform_average: every gate fixed to 1 (no gate parameters)
        off: block i feeds only block i of the next layer

    Raises:
        ConfigError: If fewer encoder levels than routing layers are supplied
        ShapeError: If feature shapes do not match the configuration
    """
    layers = config.layers
    if len(levels_h) < layers or len(levels_l) < layers:
        raise ConfigError(
            f"{layers} routing layers need {layers} encoder levels, got "
            f"{len(levels_h)} HSI and {len(levels_l)} LiDAR"
        )
    expected = (config.channels, config.size, config.size)
    for f in (*levels_h[-layers:], *levels_l[-layers:]):
        if f.shape[-3:] != expected or f.ndim not in (3, 4):
            raise ShapeError(f"routing features must be {expected} (optionally batched), got {f.shape}")

    offset_h = len(levels_h) - layers
    offset_l = len(levels_l) - layers
    batched = levels_h[offset_h].ndim == 4
    batch = levels_h[offset_h].shape[0] if batched else 1
    gate_shape = (batch, 3) if batched else (3,)
    override = _as_override(gate_override, layers, batch)
    enabled = config.enabled_mask
    trace = np.zeros((batch, layers, 3, 3))

    inputs: list[Tensor | None] = [None, None, None]
    outputs: list[Tensor | None] = [None, None, None]
    for k in range(layers):
        f_h, f_l = levels_h[offset_h + k], levels_l[offset_l + k]
        outputs = [None, None, None]
        gates: list[Tensor | None] = [None, None, None]
        for b, name in enumerate(BLOCKS):
            if not enabled[b]:
                continue
            block = params.blocks[k][b]
            outputs[b] = BLOCK_FORWARD[name](f_h, f_l, inputs[b], block, config.attention_kind, tape)

            pinned = None
            if override is not None:
                pinned = override[:, k, b, :] if batched else override[0, k, b, :]
            if pinned is not None and not np.isnan(pinned).any():
                gate = _constant(pinned)
            elif config.router_mode == "soft":
                gate = routing_gate(f_h, f_l, inputs[b], block.gate, tape)
                if pinned is not None:
                    gate = _pin(gate, pinned, tape)
            elif config.router_mode == "uniform_average":
                gate = _constant(np.ones(gate_shape))
            else:
                gate = _constant(np.broadcast_to(np.eye(3)[b], gate_shape))
                if pinned is not None:
                    gate = _constant(np.where(np.isnan(pinned), gate.data, pinned))
            gates[b] = gate
            trace[:, k, b, :] = gate.data.reshape(batch, 3)

        if k < layers - 1:
            if config.router_mode == "off" and override is None:
                inputs = list(outputs)
            else:
                inputs = [
                    aggregate(outputs, gates, i, tape) if enabled[i] else None for i in range(3)
                ]

    trace *= np.outer(enabled, enabled)[None, None]

    present = [h for h in outputs if h is not None]
    fused = present[0]
    for h in present[1:]:
        fused = add(fused, h, tape)
    if len(present) > 1:
        fused = scale(fused, 1.0 / len(present), tape)
    flat_size = config.channels * config.d
    flat = reshape(fused, (batch, flat_size) if batched else (flat_size,), tape)
    logits = linear(flat, params.head, tape)
    return RoutingOutput(
        logits=logits,
        trace=RoutingTrace(trace, enabled),
        fused=fused,
        block_outputs=outputs,
    )


# ---------------------------------------------------------------------------
# Path analysis
# ---------------------------------------------------------------------------


class Edge(NamedTuple):
    """One routing edge; ``target`` is a block name or "head" for the final layer."""

    layer: int
    source: str
    target: str

    def __str__(self) -> str:
        return f"L{self.layer}:{self.source}->{self.target}"


def candidate_edges(layers: int, enabled: tuple[bool, bool, bool]) -> list[Edge]:
    """Every edge a trace of this shape can activate, in canonical order."""
    names = [name for name, on in zip(BLOCKS, enabled, strict=True) if on]
    edges = [Edge(k, src, dst) for k in range(1, layers) for src in names for dst in names]
    edges.extend(Edge(layers, src, HEAD) for src in names)
    return edges


@dataclass
class PathSummary:
    """Active routing paths of a set of samples at one threshold."""

    threshold: float
    layers: int
    edges: list[list[Edge]]  # per sample
    edge_frequency: dict[Edge, float]  # fraction of samples using each edge
    block_usage: np.ndarray  # (L, 3) fraction of samples with an active outgoing edge
    class_histograms: pl.DataFrame | None = None  # columns: label, edge, count

    def to_dict(self) -> dict:
        document = {
            "threshold": self.threshold,
            "layers": self.layers,
            "edge_frequency": {str(e): f for e, f in self.edge_frequency.items()},
            "block_usage": {
                f"layer{k + 1}": {name: float(self.block_usage[k, b]) for b, name in enumerate(BLOCKS)}
                for k in range(self.layers)
            },
        }
        if self.class_histograms is not None:
            histograms: dict[str, dict[str, int]] = {}
            for row in self.class_histograms.iter_rows(named=True):
                histograms.setdefault(str(row["label"]), {})[row["edge"]] = row["count"]
            document["class_histograms"] = histograms
        return document


def extract_paths(
    trace: RoutingTrace, threshold: float = DEFAULT_ROUTE_THRESHOLD, labels=None
) -> PathSummary:
    """
    Edges whose gate weight reaches ``threshold``.

    Inter-layer edge (k, i, j) is active when gates[k, i, j] >= threshold. At threshold 1 the
    comparison is strict, so the constant unit gates of the uniform_average and off routers
    yield no edges there, as learned gates never do. Final-layer gates route nowhere, so block
    j's edge to the head is active when its largest final-layer gate over enabled targets
    reaches the threshold. Only edges between enabled blocks exist.

    Args:
        trace: Recorded gates
        threshold: Cut-off in [0, 1]
        labels: Optional per-sample class labels for per-class edge histograms
    """
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"route threshold must be in [0, 1], got {threshold}")
    enabled = np.array(trace.enabled)
    layers, n = trace.layers, trace.num_samples
    pair_mask = np.outer(enabled, enabled)

    reaches = np.greater if threshold >= 1.0 else np.greater_equal
    inner = reaches(trace.gates[:, : layers - 1], threshold) & pair_mask
    final = np.where(enabled[None, None, :], trace.gates[:, layers - 1], -np.inf).max(axis=-1)
    terminal = reaches(final, threshold) & enabled[None, :]

    per_sample: list[list[Edge]] = []
    for s in range(n):
        sample_edges = [
            Edge(k + 1, BLOCKS[i], BLOCKS[j]) for k, i, j in zip(*np.nonzero(inner[s]), strict=True)
        ]
        sample_edges.extend(Edge(layers, BLOCKS[j], HEAD) for j in np.flatnonzero(terminal[s]))
        per_sample.append(sample_edges)

    frequency = {edge: 0.0 for edge in candidate_edges(layers, trace.enabled)}
    for sample_edges in per_sample:
        for edge in sample_edges:
            frequency[edge] += 1.0 / n

    usage = np.zeros((layers, 3))
    if layers > 1:
        usage[: layers - 1] = inner.any(axis=-1).mean(axis=0)
    usage[layers - 1] = terminal.mean(axis=0)

    histograms = None
    if labels is not None:
        labels = np.asarray(labels).reshape(-1)
        if len(labels) != n:
            raise ShapeError(f"{len(labels)} labels for a trace of {n} samples")
        rows = [
            (int(labels[s]), str(edge)) for s, sample_edges in enumerate(per_sample) for edge in sample_edges
        ]
        histograms = (
            pl.DataFrame(rows, schema={"label": pl.Int64, "edge": pl.String}, orient="row")
            .group_by("label", "edge")
            .agg(pl.len().alias("count"))
            .sort("label", "edge")
        )

    return PathSummary(
        threshold=threshold,
        layers=layers,
        edges=per_sample,
        edge_frequency=frequency,
        block_usage=usage,
        class_histograms=histograms,
    )


def trace_document(trace: RoutingTrace, summary: PathSummary, labels=None, predictions=None) -> dict:
    """JSON-ready routing trace: per-sample gates and active edges plus the summary."""
    samples = []
    for s in range(trace.num_samples):
        entry = {
            "index": s,
            "gates": trace.gates[s].tolist(),
            "active_edges": [str(e) for e in summary.edges[s]],
        }
        if labels is not None:
            entry["label"] = int(labels[s])
        if predictions is not None:
            entry["predicted"] = int(predictions[s])
        samples.append(entry)
    return {
        "blocks": list(BLOCKS),
        "enabled_blocks": [b for b, on in zip(BLOCKS, trace.enabled, strict=True) if on],
        **summary.to_dict(),
        "samples": samples,
    }
