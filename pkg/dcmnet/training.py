"""
DCMNet Training Module

Loss, mini-batch training, evaluation metrics (OA, AA, Kappa), scene prediction, cost
accounting and the ablation/parameter-sweep orchestration.
"""

import concurrent.futures
import dataclasses
from dataclasses import dataclass, field

import numpy as np
import polars as pl

from .errors import ConfigError, DatasetError
from .model import DCMNet, ModelConfig, build_model, model_cost
from .numerics import SGD, Adam, Tape, Tensor, rng_stream
from .preprocessing import PatchSet, Preprocessor, SceneCube, augment, prepare_dataset
from .routing import DEFAULT_ROUTE_THRESHOLD, RoutingTrace, extract_paths

MODALITIES = ("HL", "H", "L")
OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    noise_sigma: float = 0.05
    augment: bool = True
    modality: str = "HL"

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality must be one of {MODALITIES}, got {self.modality!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        base = base or cls()
        unknown = set(data) - set(base.to_dict())
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return dataclasses.replace(base, **data)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels, tape: Tape | None = None) -> Tensor:
    """
    Mean softmax cross-entropy of (C,) or (N, C) logits against 1-based labels.

    Uses log-sum-exp with the row maximum subtracted; the gradient is
    (softmax(logits) - onehot(label)) / N.

    Raises:
        DatasetError: If a label lies outside 1..C
    """
    data = logits.data if logits.ndim == 2 else logits.data[np.newaxis]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, num_classes = data.shape
    if labels.shape != (n,):
        raise DatasetError(f"{labels.shape[0]} labels for {n} rows of logits")
    if labels.min() < 1 or labels.max() > num_classes:
        raise DatasetError(f"labels must be in 1..{num_classes}, got {labels.min()}..{labels.max()}")

    shifted = data - data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shifted[rows, labels - 1]))

    probs = np.exp(shifted - log_norm[:, None])
    probs[rows, labels - 1] -= 1.0
    grad = (probs / n).reshape(logits.shape)

    if tape is None:
        return Tensor(loss)
    return tape.record("cross_entropy", np.array(loss), (logits,), lambda g: (g * grad,))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainHistory:
    epoch_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"epoch_loss": self.epoch_loss, "train_accuracy": self.train_accuracy}


def apply_modality(hsi: np.ndarray, lidar: np.ndarray, modality: str) -> tuple[np.ndarray, np.ndarray]:
    """Zero the input of the modality left out ("H" keeps HSI only, "L" keeps LiDAR only)."""
    if modality not in MODALITIES:
        raise ConfigError(f"modality must be one of {MODALITIES}, got {modality!r}")
    if modality == "H":
        lidar = np.zeros_like(lidar)
    elif modality == "L":
        hsi = np.zeros_like(hsi)
    return hsi, lidar


def _make_optimizer(model: DCMNet, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(model.parameters(), lr=cfg.learning_rate)
    return Adam(model.parameters(), lr=cfg.learning_rate)


def train(
    model: DCMNet, data: PatchSet, cfg: TrainConfig, quiet: bool = True, log_every: int = 10
) -> tuple[DCMNet, TrainHistory]:
    """
    Mini-batch training on ``data`` (updates ``model`` in place).

    Batches are reshuffled every epoch from the seed's "shuffle" stream; augmentation draws
    from the "augment" stream, so toggling it never changes the initialization or batch order.

    Args:
        model: Network to train
        data: Training patches
        cfg: Training configuration
        quiet: Suppress progress messages
        log_every: Print a progress line every this many epochs

    Returns:
        (model, per-epoch history)
    """
    if len(data) == 0:
        raise DatasetError("cannot train on an empty train split")
    if data.labels.max() > model.config.num_classes:
        raise DatasetError(
            f"label {data.labels.max()} exceeds the model's {model.config.num_classes} classes"
        )

    optimizer = _make_optimizer(model, cfg)
    shuffle_rng = rng_stream(cfg.seed, "shuffle")
    augment_rng = rng_stream(cfg.seed, "augment")
    history = TrainHistory()
    n = len(data)

    if not quiet:
        print(f"[*] Training on {n} samples for {cfg.epochs} epochs ({cfg.optimizer}, lr={cfg.learning_rate})")

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            batch = data.subset(order[start : start + cfg.batch_size])
            if cfg.augment:
                batch = PatchSet.from_pairs(
                    [augment(batch[i], augment_rng, cfg.noise_sigma) for i in range(len(batch))]
                )
            hsi, lidar = apply_modality(batch.hsi, batch.lidar, cfg.modality)

            tape = Tape()
            output = model.forward(hsi, lidar, tape)
            loss = cross_entropy(output.logits, batch.labels, tape)
            optimizer.zero_grad()
            tape.backward(loss)
            optimizer.step()

            loss_sum += loss.item() * len(batch)
            correct += int((output.logits.data.argmax(axis=1) + 1 == batch.labels).sum())

        history.epoch_loss.append(loss_sum / n)
        history.train_accuracy.append(correct / n)
        if not quiet and (epoch % log_every == 0 or epoch == cfg.epochs):
            print(
                f"[*] Epoch {epoch}/{cfg.epochs}: loss {history.epoch_loss[-1]:.4f}, "
                f"train OA {history.train_accuracy[-1]:.2%}"
            )

    if not quiet:
        print("[+] Training complete")
    return model, history


# ---------------------------------------------------------------------------
# Prediction and metrics
# ---------------------------------------------------------------------------


def predict(
    model: DCMNet, data: PatchSet, modality: str = "HL", batch_size: int = 256
) -> tuple[np.ndarray, RoutingTrace]:
    """
    Predicted 1-based labels and the routing trace of every sample in ``data``.
    """
    if len(data) == 0:
        raise DatasetError("cannot predict an empty sample set")
    predictions = []
    gates = []
    for start in range(0, len(data), batch_size):
        hsi, lidar = apply_modality(
            data.hsi[start : start + batch_size], data.lidar[start : start + batch_size], modality
        )
        output = model.forward(hsi, lidar)
        predictions.append(output.logits.data.argmax(axis=1) + 1)
        gates.append(output.trace.gates)
    trace = RoutingTrace(np.concatenate(gates), model.config.routing.enabled_mask)
    return np.concatenate(predictions).astype(np.int64), trace


def predict_scene(
    model: DCMNet,
    cube: SceneCube,
    preprocessor: Preprocessor | None = None,
    batch_size: int = 256,
) -> np.ndarray:
    """(H, W) map of predicted labels for every labeled pixel; 0 elsewhere."""
    preprocessor = preprocessor or model.preprocessor
    if preprocessor is None:
        raise ConfigError("predict_scene needs fitted preprocessing (none stored on the model)")
    patches = preprocessor.all_labeled(cube)
    predictions, _ = predict(model, patches, batch_size=batch_size)
    label_map = np.zeros((cube.height, cube.width), dtype=np.uint16)
    label_map[patches.centers[:, 0], patches.centers[:, 1]] = predictions
    return label_map


def confusion_matrix(truth, predicted, num_classes: int) -> np.ndarray:
    """C x C counts, rows = true class, columns = predicted class (labels are 1-based)."""
    truth = np.asarray(truth, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(matrix, (truth - 1, predicted - 1), 1)
    return matrix


def metrics_from_confusion(matrix: np.ndarray) -> tuple[float, float, float, np.ndarray]:
    """
    Overall accuracy, average accuracy, Cohen's kappa and per-class recall.

    AA averages only classes with at least one true sample (per-class recall is NaN for the
    others). Kappa is 1 when chance agreement is already perfect.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    total = matrix.sum()
    if total == 0:
        raise DatasetError("confusion matrix is empty")
    support = matrix.sum(axis=1)
    diagonal = np.diag(matrix)
    per_class = np.full(len(matrix), np.nan)
    has_support = support > 0
    per_class[has_support] = diagonal[has_support] / support[has_support]

    oa = float(diagonal.sum() / total)
    aa = float(per_class[has_support].mean())
    expected = float((support * matrix.sum(axis=0)).sum() / total**2)
    kappa = 1.0 if expected == 1.0 else float((oa - expected) / (1.0 - expected))
    return oa, aa, kappa, per_class


@dataclass
class EvalReport:
    confusion_matrix: np.ndarray
    oa: float
    aa: float
    kappa: float
    per_class_accuracy: np.ndarray
    predictions: np.ndarray
    labels: np.ndarray
    trace: RoutingTrace | None = None
    cost: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "oa": self.oa,
            "aa": self.aa,
            "kappa": self.kappa,
            "per_class_accuracy": [None if np.isnan(v) else float(v) for v in self.per_class_accuracy],
            "confusion_matrix": self.confusion_matrix.tolist(),
            "samples": int(len(self.labels)),
            "cost": self.cost,
        }


def evaluate(model: DCMNet, data: PatchSet | None, modality: str = "HL") -> EvalReport:
    """Predict ``data`` and score it against its labels."""
    if data is None or len(data) == 0:
        raise DatasetError("cannot evaluate an empty split")
    predictions, trace = predict(model, data, modality)
    matrix = confusion_matrix(data.labels, predictions, model.config.num_classes)
    oa, aa, kappa, per_class = metrics_from_confusion(matrix)
    return EvalReport(
        confusion_matrix=matrix,
        oa=oa,
        aa=aa,
        kappa=kappa,
        per_class_accuracy=per_class,
        predictions=predictions,
        labels=data.labels.copy(),
        trace=trace,
        cost=count_cost(model),
    )


def count_cost(model: DCMNet | ModelConfig) -> dict[str, int]:
    """Exact parameter count and FLOPs per sample."""
    config = model.config if isinstance(model, DCMNet) else model
    return model_cost(config)


# ---------------------------------------------------------------------------
# Ablations and parameter sweeps
# ---------------------------------------------------------------------------

BLOCK_SUBSETS = (
    ("BCAB",),
    ("BSAB",),
    ("ICB",),
    ("BCAB", "BSAB"),
    ("BCAB", "ICB"),
    ("BSAB", "ICB"),
    ("BCAB", "BSAB", "ICB"),
)
FEATURE_CHANNELS = (8, 16, 32)
FEATURE_SIZES = (1, 2, 3)
COMPONENT_COUNTS = (5, 10, 15, 20)
PATCH_SIZES = (7, 9, 11, 13)
SUITES = ("blocks", "router", "attention", "layers", "modality", "features", "components", "patch")


@dataclass(frozen=True)
class Variant:
    name: str
    model: ModelConfig
    train: TrainConfig


def ablation_variants(suite: str, model_cfg: ModelConfig, train_cfg: TrainConfig) -> list[Variant]:
    """Enumerate the configurations of one ablation suite (all share seed and data)."""
    if suite == "blocks":
        return [
            Variant("+".join(blocks), model_cfg.replace(enabled_blocks=blocks), train_cfg)
            for blocks in BLOCK_SUBSETS
        ]
    if suite == "router":
        return [
            Variant("DCMNet", model_cfg.replace(router_mode="soft"), train_cfg),
            Variant("DCMNet'", model_cfg.replace(router_mode="uniform_average"), train_cfg),
            Variant(
                "DCMNet*", model_cfg.replace(router_mode="off", enabled_blocks=("ICB",)), train_cfg
            ),
        ]
    if suite == "attention":
        return [
            Variant(kind, model_cfg.replace(attention_kind=kind), train_cfg)
            for kind in ("self", "bilinear")
        ]
    if suite == "layers":
        return [Variant(f"L={n}", model_cfg.replace(layers=n), train_cfg) for n in (1, 2, 3)]
    if suite == "modality":
        return [
            Variant(f"DCMNet-{m}", model_cfg, dataclasses.replace(train_cfg, modality=m))
            for m in ("L", "H", "HL")
        ]
    if suite == "features":
        return [
            Variant(f"c={c},d={s * s}", model_cfg.replace(channels=c, size=s), train_cfg)
            for c in FEATURE_CHANNELS
            for s in FEATURE_SIZES
        ]
    if suite == "components":
        return [
            Variant(f"K={k}", model_cfg.replace(components=k), train_cfg)
            for k in COMPONENT_COUNTS
            if k <= model_cfg.bands
        ]
    if suite == "patch":
        return [Variant(f"p={p}", model_cfg.replace(patch_size=p), train_cfg) for p in PATCH_SIZES]
    raise ConfigError(f"Unknown ablation suite: {suite!r} (expected one of {', '.join(SUITES)})")


@dataclass
class AblationResult:
    suite: str
    table: pl.DataFrame  # variant, oa, aa, kappa, params, flops
    reports: dict[str, EvalReport]
    histories: dict[str, TrainHistory]


def _run_variant(variant: Variant, cube: SceneCube) -> tuple[EvalReport, TrainHistory]:
    prepared = prepare_dataset(cube, variant.model.components, variant.model.patch_size)
    model = build_model(variant.model, variant.train.seed)
    model.preprocessor = prepared.preprocessor
    model, history = train(model, prepared.train, variant.train, quiet=True)
    report = evaluate(model, prepared.test, variant.train.modality)
    return report, history


def run_ablation(
    suite: str,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    cube: SceneCube,
    workers: int = 1,
    quiet: bool = True,
    route_threshold: float = DEFAULT_ROUTE_THRESHOLD,
) -> AblationResult:
    """
    Train and evaluate every variant of ``suite`` on the same scene and seed.

    Variants run on a thread pool when ``workers`` > 1; each variant owns its RNG streams, so
    results do not depend on scheduling.
    """
    variants = ablation_variants(suite, model_cfg, train_cfg)
    if workers < 1:
        raise ConfigError(f"workers must be positive, got {workers}")
    if not quiet:
        print(f"[*] Running ablation suite '{suite}' ({len(variants)} variants, {workers} worker(s))")

    results: dict[str, tuple[EvalReport, TrainHistory]] = {}
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
        futures = {executor.submit(_run_variant, v, cube): v for v in variants}
        for future in concurrent.futures.as_completed(futures):
            variant = futures[future]
            results[variant.name] = future.result()
            if not quiet:
                print(f"[+] {variant.name}: OA {results[variant.name][0].oa:.2%}")

    rows = []
    for variant in variants:
        report, _ = results[variant.name]
        paths = extract_paths(report.trace, route_threshold) if report.trace is not None else None
        rows.append(
            {
                "variant": variant.name,
                "oa": report.oa,
                "aa": report.aa,
                "kappa": report.kappa,
                "params": report.cost["param_count"],
                "flops": report.cost["flops_per_sample"],
                "mean_active_edges": float(np.mean([len(e) for e in paths.edges])) if paths else 0.0,
            }
        )
    return AblationResult(
        suite=suite,
        table=pl.DataFrame(rows),
        reports={v.name: results[v.name][0] for v in variants},
        histories={v.name: results[v.name][1] for v in variants},
    )
