"""
DCMNet Preprocessing Module

Turns co-registered HSI/LiDAR scene cubes into model-ready samples: PCA spectral reduction,
per-channel standardization, mirror-padded patch extraction, augmentation, synthetic scene
generation and the DYNF dataset container.
"""

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import polars as pl
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ConfigError,
    DatasetError,
    DatasetFormatError,
    DatasetTruncatedError,
    DatasetVersionError,
)
from .numerics import rng_stream
from .storage import atomic_write_bytes

# Split mask codes as stored in DYNF files
SPLIT_NONE = 0
SPLIT_TRAIN = 1
SPLIT_TEST = 2
SPLIT_CODES = {"train": SPLIT_TRAIN, "test": SPLIT_TEST}

DATASET_MAGIC = b"DYNF"
DATASET_VERSION = 1
# magic, version, flags, H, W, c_bands, c_l, C
_DATASET_HEADER = struct.Struct("<4sHHIIIII")


@dataclass
class SceneCube:
    """Co-registered HSI and LiDAR rasters with per-pixel labels and a train/test mask."""

    hsi: np.ndarray  # (bands, H, W) float32 reflectance
    lidar: np.ndarray  # (c_l, H, W) float32 elevation in metres
    labels: np.ndarray  # (H, W) uint16, 0 = unlabeled, 1..C = classes
    split_mask: np.ndarray  # (H, W) uint8, SPLIT_NONE / SPLIT_TRAIN / SPLIT_TEST
    num_classes: int

    def __post_init__(self):
        if self.hsi.ndim != 3 or self.lidar.ndim != 3:
            raise DatasetError(
                f"hsi and lidar must be (channels, H, W), got {self.hsi.shape} and {self.lidar.shape}"
            )
        grid = self.hsi.shape[1:]
        if self.lidar.shape[1:] != grid or self.labels.shape != grid or self.split_mask.shape != grid:
            raise DatasetError(
                f"hsi {self.hsi.shape}, lidar {self.lidar.shape}, labels {self.labels.shape} and "
                f"split mask {self.split_mask.shape} must share the same H x W grid"
            )
        if self.num_classes < 1:
            raise DatasetError(f"num_classes must be positive, got {self.num_classes}")
        if self.labels.size and int(self.labels.max()) > self.num_classes:
            raise DatasetError(
                f"label {int(self.labels.max())} outside 1..{self.num_classes}"
            )
        if not np.isin(self.split_mask, (SPLIT_NONE, SPLIT_TRAIN, SPLIT_TEST)).all():
            raise DatasetError("split mask may only contain 0 (none), 1 (train) or 2 (test)")
        if ((self.split_mask != SPLIT_NONE) & (self.labels == 0)).any():
            raise DatasetError("unlabeled pixels cannot belong to the train or test split")

    @property
    def height(self) -> int:
        return self.hsi.shape[1]

    @property
    def width(self) -> int:
        return self.hsi.shape[2]

    @property
    def bands(self) -> int:
        return self.hsi.shape[0]

    @property
    def lidar_channels(self) -> int:
        return self.lidar.shape[0]

    def split_pixels(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """Row and column indices (row-major order) of the labeled pixels in ``split``."""
        if split not in SPLIT_CODES:
            raise ConfigError(f"Unknown split: {split!r} (expected 'train' or 'test')")
        return np.nonzero(self.split_mask == SPLIT_CODES[split])


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


@dataclass
class PcaModel:
    """Top-K principal axes of the per-pixel spectra."""

    mean: np.ndarray  # (bands,)
    components: np.ndarray  # (K, bands), orthonormal rows
    explained_variance: np.ndarray  # (K,), non-increasing

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def project(self, pixels: np.ndarray) -> np.ndarray:
        """(n, bands) spectra -> (n, K) scores."""
        return (np.asarray(pixels, dtype=np.float64) - self.mean) @ self.components.T

    def reconstruct(self, scores: np.ndarray) -> np.ndarray:
        """(n, K) scores -> (n, bands) spectra."""
        return np.asarray(scores, dtype=np.float64) @ self.components + self.mean

    def project_cube(self, hsi: np.ndarray) -> np.ndarray:
        """(bands, H, W) cube -> (K, H, W) component images."""
        bands, height, width = hsi.shape
        scores = self.project(hsi.reshape(bands, -1).T)
        return scores.T.reshape(self.n_components, height, width)


def fit_pca_pixels(pixels: np.ndarray, n_components: int) -> PcaModel:
    """
    Fit PCA to a (n, bands) pixel matrix.

    Components are eigenvectors of the sample covariance sorted by decreasing eigenvalue, each
    signed so its largest-magnitude entry is positive. When the covariance has rank below
    ``n_components`` a RuntimeWarning is emitted and the remaining rows come from the
    orthonormal null-space basis.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    n, bands = pixels.shape
    if not 1 <= n_components <= bands:
        raise ConfigError(f"PCA component count must be in 1..{bands}, got {n_components}")
    if n < n_components:
        raise DatasetError(f"PCA with {n_components} components needs at least that many pixels, got {n}")

    mean = pixels.mean(axis=0)
    centered = pixels - mean
    covariance = centered.T @ centered / max(n - 1, 1)
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    order = np.argsort(-eigenvalues, kind="stable")
    eigenvalues = np.clip(eigenvalues[order], 0.0, None)
    eigenvectors = eigenvectors[:, order]

    tolerance = max(float(eigenvalues[0]), 1.0) * bands * np.finfo(np.float64).eps
    rank = int((eigenvalues > tolerance).sum())
    if rank < n_components:
        warnings.warn(
            f"Spectral covariance has rank {rank} < {n_components} components; "
            "padding with an orthonormal completion",
            RuntimeWarning,
            stacklevel=2,
        )

    components = eigenvectors[:, :n_components].T.copy()
    pivots = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(n_components), pivots])
    signs[signs == 0] = 1.0
    components *= signs[:, np.newaxis]

    return PcaModel(
        mean=mean,
        components=components,
        explained_variance=eigenvalues[:n_components].copy(),
    )


def fit_pca(cube: SceneCube, n_components: int) -> PcaModel:
    """Fit PCA on the training-split pixels of ``cube`` only."""
    rows, cols = cube.split_pixels("train")
    if len(rows) == 0:
        raise DatasetError("cannot fit PCA: the train split is empty")
    return fit_pca_pixels(cube.hsi[:, rows, cols].T, n_components)


# ---------------------------------------------------------------------------
# Standardization and patches
# ---------------------------------------------------------------------------


@dataclass
class Standardizer:
    """Per-channel z-score statistics measured on training pixels."""

    hsi_mean: np.ndarray  # (K,)
    hsi_std: np.ndarray
    lidar_mean: np.ndarray  # (c_l,)
    lidar_std: np.ndarray

    def hsi(self, components: np.ndarray) -> np.ndarray:
        return (components - self.hsi_mean[:, None, None]) / self.hsi_std[:, None, None]

    def lidar(self, lidar: np.ndarray) -> np.ndarray:
        return (np.asarray(lidar, dtype=np.float64) - self.lidar_mean[:, None, None]) / self.lidar_std[
            :, None, None
        ]


def _safe_std(values: np.ndarray) -> np.ndarray:
    std = values.std(axis=1)
    std[std == 0] = 1.0
    return std


def fit_standardizer(cube: SceneCube, pca: PcaModel) -> Standardizer:
    """Channel statistics of the PCA-projected HSI and the raw LiDAR over train pixels."""
    rows, cols = cube.split_pixels("train")
    if len(rows) == 0:
        raise DatasetError("cannot fit standardization statistics: the train split is empty")
    hsi = pca.project(cube.hsi[:, rows, cols].T).T
    lidar = cube.lidar[:, rows, cols].astype(np.float64)
    return Standardizer(
        hsi_mean=hsi.mean(axis=1),
        hsi_std=_safe_std(hsi),
        lidar_mean=lidar.mean(axis=1),
        lidar_std=_safe_std(lidar),
    )


@dataclass
class PatchPair:
    """One co-registered HSI/LiDAR sample centred on a labeled pixel."""

    hsi_patch: np.ndarray  # (K, p, p)
    lidar_patch: np.ndarray  # (c_l, p, p)
    label: int  # 1..C
    center: tuple[int, int]


@dataclass
class PatchSet:
    """Stacked PatchPairs, the unit the model trains and evaluates on."""

    hsi: np.ndarray  # (n, K, p, p)
    lidar: np.ndarray  # (n, c_l, p, p)
    labels: np.ndarray  # (n,) 1-based class labels
    centers: np.ndarray  # (n, 2) row, col

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, index: int) -> PatchPair:
        return PatchPair(
            hsi_patch=self.hsi[index],
            lidar_patch=self.lidar[index],
            label=int(self.labels[index]),
            center=(int(self.centers[index, 0]), int(self.centers[index, 1])),
        )

    @property
    def patch_size(self) -> int:
        return self.hsi.shape[-1]

    def subset(self, indices: np.ndarray) -> "PatchSet":
        return PatchSet(
            hsi=self.hsi[indices],
            lidar=self.lidar[indices],
            labels=self.labels[indices],
            centers=self.centers[indices],
        )

    @classmethod
    def from_pairs(cls, pairs: list[PatchPair]) -> "PatchSet":
        return cls(
            hsi=np.stack([p.hsi_patch for p in pairs]),
            lidar=np.stack([p.lidar_patch for p in pairs]),
            labels=np.array([p.label for p in pairs], dtype=np.int64),
            centers=np.array([p.center for p in pairs], dtype=np.int64),
        )


def _mirror_windows(image: np.ndarray, patch_size: int, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """(C, H, W) image -> (n, C, p, p) windows centred on (rows, cols), mirror-padded."""
    radius = patch_size // 2
    padded = np.pad(image, ((0, 0), (radius, radius), (radius, radius)), mode="reflect")
    windows = sliding_window_view(padded, (patch_size, patch_size), axis=(1, 2))
    return np.ascontiguousarray(np.moveaxis(windows[:, rows, cols], 0, 1))


def extract_patches(
    cube: SceneCube,
    pca: PcaModel,
    patch_size: int,
    split: str,
    standardizer: Standardizer | None = None,
) -> PatchSet:
    """
    Cut one p x p sample around every labeled pixel of ``split``.

    Borders are mirror-padded (reflection about the edge pixel, edge not repeated). HSI patches
    are PCA-projected and z-scored per channel; LiDAR patches are z-scored per channel. When
    ``standardizer`` is omitted its statistics are measured on the train split, so test
    patches never see test statistics.
    """
    if patch_size < 1 or patch_size % 2 == 0:
        raise ConfigError(f"patch size must be a positive odd number, got {patch_size}")
    if patch_size // 2 >= min(cube.height, cube.width):
        raise ConfigError(
            f"patch size {patch_size} too large to mirror-pad a {cube.height}x{cube.width} scene"
        )
    rows, cols = cube.split_pixels(split)
    if len(rows) == 0:
        raise DatasetError(f"the {split} split is empty")
    if standardizer is None:
        standardizer = fit_standardizer(cube, pca)

    hsi = standardizer.hsi(pca.project_cube(cube.hsi))
    lidar = standardizer.lidar(cube.lidar)
    return PatchSet(
        hsi=_mirror_windows(hsi, patch_size, rows, cols),
        lidar=_mirror_windows(lidar, patch_size, rows, cols),
        labels=cube.labels[rows, cols].astype(np.int64),
        centers=np.stack([rows, cols], axis=1).astype(np.int64),
    )


@dataclass
class Preprocessor:
    """Everything needed to turn a scene into model input the same way at train and eval time."""

    pca: PcaModel
    standardizer: Standardizer
    patch_size: int

    def patches(self, cube: SceneCube, split: str) -> PatchSet:
        return extract_patches(cube, self.pca, self.patch_size, split, self.standardizer)

    def all_labeled(self, cube: SceneCube) -> PatchSet:
        """Patches for every labeled pixel regardless of split (classification maps)."""
        rows, cols = np.nonzero(cube.labels > 0)
        if len(rows) == 0:
            raise DatasetError("scene has no labeled pixels")
        hsi = self.standardizer.hsi(self.pca.project_cube(cube.hsi))
        lidar = self.standardizer.lidar(cube.lidar)
        return PatchSet(
            hsi=_mirror_windows(hsi, self.patch_size, rows, cols),
            lidar=_mirror_windows(lidar, self.patch_size, rows, cols),
            labels=cube.labels[rows, cols].astype(np.int64),
            centers=np.stack([rows, cols], axis=1).astype(np.int64),
        )


@dataclass
class PreparedData:
    train: PatchSet
    test: PatchSet | None
    preprocessor: Preprocessor


def prepare_dataset(cube: SceneCube, n_components: int, patch_size: int) -> PreparedData:
    """Fit PCA and standardization on the train split and extract both splits."""
    pca = fit_pca(cube, n_components)
    preprocessor = Preprocessor(pca, fit_standardizer(cube, pca), patch_size)
    train = preprocessor.patches(cube, "train")
    test = preprocessor.patches(cube, "test") if (cube.split_mask == SPLIT_TEST).any() else None
    return PreparedData(train=train, test=test, preprocessor=preprocessor)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def augment(
    sample: PatchPair,
    rng: np.random.Generator,
    noise_sigma: float = 0.05,
    flip_h: bool | None = None,
    flip_v: bool | None = None,
) -> PatchPair:
    """
    Random orientation flips plus Gaussian noise, applied identically to both modalities.

    Horizontal and vertical flips each happen with probability 1/2 (``flip_h``/``flip_v``
    force the outcome; the coins are drawn either way so the stream stays aligned). Noise std
    is ``noise_sigma`` times each channel's own standard deviation.
    """
    if noise_sigma < 0:
        raise ConfigError(f"noise_sigma must be >= 0, got {noise_sigma}")
    coin_h = rng.random() < 0.5
    coin_v = rng.random() < 0.5
    do_h = coin_h if flip_h is None else flip_h
    do_v = coin_v if flip_v is None else flip_v

    hsi, lidar = sample.hsi_patch, sample.lidar_patch
    if do_h:
        hsi, lidar = hsi[..., ::-1], lidar[..., ::-1]
    if do_v:
        hsi, lidar = hsi[..., ::-1, :], lidar[..., ::-1, :]
    if noise_sigma > 0:
        hsi = hsi + rng.normal(size=hsi.shape) * noise_sigma * hsi.std(axis=(1, 2), keepdims=True)
        lidar = lidar + rng.normal(size=lidar.shape) * noise_sigma * lidar.std(
            axis=(1, 2), keepdims=True
        )
    return PatchPair(
        hsi_patch=np.ascontiguousarray(hsi),
        lidar_patch=np.ascontiguousarray(lidar),
        label=sample.label,
        center=sample.center,
    )


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a blocky desk-scale HSI/LiDAR scene."""

    num_classes: int = 6
    height: int = 64
    width: int = 64
    bands: int = 20
    lidar_channels: int = 1
    block_size: int = 8
    train_per_class: int = 100
    spectral_noise: float = 0.02
    height_noise: float = 0.5
    unlabeled_fraction: float = 0.0
    seed: int = 7
    prototypes: tuple[tuple[float, ...], ...] | None = None
    class_heights: tuple[float, ...] | None = None


def planted_confusions(num_classes: int) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """
    Class pairs (1-based) the default synthetic prototypes make indistinguishable.

    The full set, two spectral pairs and a disjoint height pair, needs at least 6 classes.
    Smaller scenes get a reduced set: 4-5 classes keep both spectral pairs plus the height
    pair (2, 3), which overlaps them; 3 classes get (1, 2) and (2, 3); 2 classes only the spectral
    pair (1, 2).

    Returns:
        (spectral twins: same spectrum, different height;
         height twins: same height, different spectrum)
    """
    spectral = [(1, 2)] if num_classes >= 2 else []
    if num_classes >= 4:
        spectral.append((3, 4))
    if num_classes >= 6:
        height = [(5, 6)]
    elif num_classes >= 3:
        height = [(2, 3)]
    else:
        height = []
    return spectral, height


def _default_prototypes(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    wavelengths = np.linspace(0.0, 1.0, spec.bands)
    spectra = np.empty((spec.num_classes, spec.bands))
    for c in range(spec.num_classes):
        curve = np.full(spec.bands, 0.08)
        for _ in range(3):
            centre = rng.uniform(0.0, 1.0)
            width = rng.uniform(0.08, 0.25)
            amplitude = rng.uniform(0.1, 0.4)
            curve += amplitude * np.exp(-0.5 * ((wavelengths - centre) / width) ** 2)
        spectra[c] = curve
    heights = np.arange(spec.num_classes, dtype=np.float64) * 3.0

    spectral_twins, height_twins = planted_confusions(spec.num_classes)
    for a, b in spectral_twins:
        spectra[b - 1] = spectra[a - 1]
    for a, b in height_twins:
        heights[b - 1] = heights[a - 1]
    return spectra, heights


def generate_synthetic(spec: SyntheticSpec) -> SceneCube:
    """
    Generate a scene of square class blocks with per-pixel noise.

    Every pixel's spectrum is its class prototype plus Gaussian noise and its elevation is the
    class height plus noise (LiDAR channel k scales the height by 1 + k/4). The default
    prototypes plant spectral twins separable only by height and height twins separable only
    by spectrum (see ``planted_confusions``). Deterministic for a fixed ``spec.seed``.
    """
    if spec.num_classes < 2:
        raise ConfigError(f"synthetic scenes need at least 2 classes, got {spec.num_classes}")
    if min(spec.height, spec.width, spec.bands, spec.lidar_channels, spec.block_size) < 1:
        raise ConfigError("synthetic scene extents must be positive")
    if not 0.0 <= spec.unlabeled_fraction < 1.0:
        raise ConfigError(f"unlabeled_fraction must be in [0, 1), got {spec.unlabeled_fraction}")

    rng = rng_stream(spec.seed, "synthetic")
    spectra, heights = _default_prototypes(spec, rng)
    if spec.prototypes is not None:
        spectra = np.asarray(spec.prototypes, dtype=np.float64)
    if spec.class_heights is not None:
        heights = np.asarray(spec.class_heights, dtype=np.float64)
    if spectra.shape != (spec.num_classes, spec.bands) or heights.shape != (spec.num_classes,):
        raise ConfigError(
            f"prototypes must be ({spec.num_classes}, {spec.bands}) and heights ({spec.num_classes},)"
        )

    block_rows = -(-spec.height // spec.block_size)
    block_cols = -(-spec.width // spec.block_size)
    n_blocks = block_rows * block_cols
    block_labels = (np.arange(n_blocks) % spec.num_classes + 1)[rng.permutation(n_blocks)]
    n_unlabeled = int(round(spec.unlabeled_fraction * n_blocks))
    if n_unlabeled:
        block_labels[rng.choice(n_blocks, size=n_unlabeled, replace=False)] = 0
    labels = np.kron(
        block_labels.reshape(block_rows, block_cols), np.ones((spec.block_size, spec.block_size), dtype=np.int64)
    )[: spec.height, : spec.width]

    background_spectrum = spectra.mean(axis=0)
    background_height = float(heights.mean())
    all_spectra = np.vstack([background_spectrum, spectra])
    all_heights = np.concatenate([[background_height], heights])

    hsi = np.moveaxis(all_spectra[labels], -1, 0)
    hsi = hsi + rng.normal(scale=spec.spectral_noise, size=hsi.shape)
    elevation = all_heights[labels]
    channel_gain = 1.0 + np.arange(spec.lidar_channels)[:, None, None] / 4.0
    lidar = elevation[None] * channel_gain + rng.normal(
        scale=spec.height_noise, size=(spec.lidar_channels, spec.height, spec.width)
    )

    split_rng = rng_stream(spec.seed, "split")
    split = np.zeros(labels.shape, dtype=np.uint8)
    flat_labels = labels.reshape(-1)
    flat_split = split.reshape(-1)
    for c in range(1, spec.num_classes + 1):
        pixels = np.flatnonzero(flat_labels == c)
        if len(pixels) == 0:
            continue
        pixels = pixels[split_rng.permutation(len(pixels))]
        n_train = min(spec.train_per_class, len(pixels) // 2)
        flat_split[pixels[:n_train]] = SPLIT_TRAIN
        flat_split[pixels[n_train:]] = SPLIT_TEST

    return SceneCube(
        hsi=hsi.astype(np.float32),
        lidar=lidar.astype(np.float32),
        labels=labels.astype(np.uint16),
        split_mask=split,
        num_classes=spec.num_classes,
    )


def class_summary(cube: SceneCube) -> pl.DataFrame:
    """Train/test sample counts per class (columns: class, train, test, total)."""
    df = pl.DataFrame(
        {
            "class": cube.labels.reshape(-1).astype(np.int64),
            "split": cube.split_mask.reshape(-1).astype(np.int64),
        }
    )
    counts = (
        df.filter(pl.col("class") > 0)
        .group_by("class")
        .agg(
            (pl.col("split") == SPLIT_TRAIN).sum().alias("train"),
            (pl.col("split") == SPLIT_TEST).sum().alias("test"),
        )
    )
    scaffold = pl.DataFrame({"class": list(range(1, cube.num_classes + 1))})
    return (
        scaffold.join(counts, on="class", how="left")
        .with_columns(pl.col("train").fill_null(0), pl.col("test").fill_null(0))
        .with_columns((pl.col("train") + pl.col("test")).alias("total"))
        .sort("class")
    )


def prototype_predictions(cube: SceneCube, use_lidar: bool, split: str = "test") -> tuple[np.ndarray, np.ndarray]:
    """
    Nearest class-mean classification of raw pixels.

    Features are the raw spectrum (plus the LiDAR channels when ``use_lidar``), z-scored with
    train-pixel statistics. Class means come from the train split.

    Returns:
        (true labels, predicted labels) for the pixels of ``split``
    """
    def features(rows, cols):
        parts = [cube.hsi[:, rows, cols]]
        if use_lidar:
            parts.append(cube.lidar[:, rows, cols])
        return np.vstack(parts).T.astype(np.float64)

    train_rows, train_cols = cube.split_pixels("train")
    if len(train_rows) == 0:
        raise DatasetError("prototype classification needs a non-empty train split")
    train = features(train_rows, train_cols)
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std[std == 0] = 1.0
    train = (train - mean) / std
    train_labels = cube.labels[train_rows, train_cols].astype(np.int64)

    classes = np.unique(train_labels)
    centroids = np.stack([train[train_labels == c].mean(axis=0) for c in classes])

    rows, cols = cube.split_pixels(split)
    if len(rows) == 0:
        raise DatasetError(f"the {split} split is empty")
    queries = (features(rows, cols) - mean) / std
    distances = ((queries[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    return cube.labels[rows, cols].astype(np.int64), classes[np.argmin(distances, axis=1)]


def prototype_oracle(cube: SceneCube, use_lidar: bool, split: str = "test") -> float:
    """Overall accuracy of ``prototype_predictions``."""
    truth, predicted = prototype_predictions(cube, use_lidar, split)
    return float((truth == predicted).mean())


# ---------------------------------------------------------------------------
# DYNF container
# ---------------------------------------------------------------------------


def encode_dataset(cube: SceneCube) -> bytes:
    header = _DATASET_HEADER.pack(
        DATASET_MAGIC,
        DATASET_VERSION,
        0,
        cube.height,
        cube.width,
        cube.bands,
        cube.lidar_channels,
        cube.num_classes,
    )
    return b"".join(
        [
            header,
            np.ascontiguousarray(cube.hsi, dtype="<f4").tobytes(),
            np.ascontiguousarray(cube.lidar, dtype="<f4").tobytes(),
            np.ascontiguousarray(cube.labels, dtype="<u2").tobytes(),
            np.ascontiguousarray(cube.split_mask, dtype="u1").tobytes(),
        ]
    )


def decode_dataset(raw: bytes, source: str = "<bytes>") -> SceneCube:
    """Parse DYNF bytes; ``source`` names the file in error messages."""
    if raw[:4] != DATASET_MAGIC:
        raise DatasetFormatError(f"{source}: not a DYNF dataset (magic {raw[:4]!r})")
    if len(raw) < _DATASET_HEADER.size:
        raise DatasetTruncatedError(f"{source}: truncated header ({len(raw)} bytes)")
    _, version, _flags, height, width, bands, lidar_channels, num_classes = _DATASET_HEADER.unpack_from(raw)
    if version != DATASET_VERSION:
        raise DatasetVersionError(
            f"{source}: DYNF version {version} is not supported (expected {DATASET_VERSION})"
        )

    pixels = height * width
    sections = [
        ("hsi", "<f4", (bands, height, width)),
        ("lidar", "<f4", (lidar_channels, height, width)),
        ("labels", "<u2", (height, width)),
        ("split", "u1", (height, width)),
    ]
    expected = _DATASET_HEADER.size + sum(
        np.dtype(dtype).itemsize * int(np.prod(shape)) for _, dtype, shape in sections
    )
    if len(raw) < expected:
        raise DatasetTruncatedError(
            f"{source}: truncated payload ({len(raw)} of {expected} bytes for a "
            f"{height}x{width} scene with {bands} bands)"
        )
    if len(raw) > expected:
        raise DatasetFormatError(f"{source}: {len(raw) - expected} unexpected trailing bytes")
    if pixels == 0:
        raise DatasetFormatError(f"{source}: empty {height}x{width} grid")

    arrays = {}
    offset = _DATASET_HEADER.size
    for name, dtype, shape in sections:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape)
        offset += count * np.dtype(dtype).itemsize

    return SceneCube(
        hsi=arrays["hsi"].astype(np.float32),
        lidar=arrays["lidar"].astype(np.float32),
        labels=arrays["labels"].astype(np.uint16),
        split_mask=arrays["split"].astype(np.uint8),
        num_classes=num_classes,
    )


def save_dataset(cube: SceneCube, path: str | Path) -> Path:
    """Write ``cube`` as a DYNF file (atomically)."""
    return atomic_write_bytes(path, encode_dataset(cube))


def load_dataset(path: str | Path) -> SceneCube:
    """Read a DYNF file written by ``save_dataset``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset file not found: {path}")
    return decode_dataset(path.read_bytes(), str(path))
