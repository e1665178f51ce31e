"""Biased dataset generation, IDX ingestion, colorization and splits.

The synthetic generator produces block-structured feature vectors: a target
block carrying the class signal under heavy noise and a bias block carrying
a spuriously correlated class signal under light noise.  The correlation
strength between the two labels is controlled by ``rho``: a sample's bias
class equals its target class with probability ``rho`` and is uniform over
the remaining classes otherwise.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# Pixels strictly below this byte value count as background when colorizing.
BACKGROUND_THRESHOLD = 16

# Ten well-separated RGB triples, one per class.
DEFAULT_PALETTE = (
    (255, 0, 0),
    (0, 255, 0),
    (0, 0, 255),
    (225, 225, 0),
    (225, 0, 225),
    (0, 255, 255),
    (255, 128, 0),
    (255, 0, 128),
    (128, 0, 255),
    (128, 128, 128),
)


def as_generator(rng: np.random.Generator | int | None) -> np.random.Generator:
    """Coerce a seed (or None) into a numpy Generator; pass Generators through."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass(frozen=True)
class LabeledSample:
    """One sample: feature vector, target class, optional bias class."""

    features: np.ndarray
    target: int
    bias: int | None


@dataclass(frozen=True)
class BiasSpec:
    """Parameters of the synthetic generator.

    ``noise_bias <= noise_target`` is enforced: the bias block must never be
    the harder pattern, which keeps the bias malignant whenever the
    inequality is strict.
    """

    rho: float
    n_classes: int = 10
    dim_target: int = 16
    dim_bias: int = 10
    noise_target: float = 0.25
    noise_bias: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ParameterError(f"rho must be in (0, 1], got {self.rho}")
        if self.n_classes < 2:
            raise ParameterError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.noise_target < 0 or self.noise_bias < 0:
            raise ParameterError("noise levels must be nonnegative")
        if self.noise_bias > self.noise_target:
            raise ParameterError(
                "noise_bias must not exceed noise_target "
                f"(got {self.noise_bias} > {self.noise_target})"
            )


@dataclass(frozen=True)
class Dataset:
    """Immutable column-oriented sample collection.

    ``biases`` is None when bias labels are hidden (unsupervised phases) and
    an int array otherwise.  ``rho`` records the correlation used at
    generation time.  ``bias_spec`` is kept on synthetic datasets so splits
    can re-generate bias blocks at a different correlation.
    """

    features: np.ndarray
    targets: np.ndarray
    biases: np.ndarray | None
    n_targets: int
    n_biases: int
    rho: float
    bias_spec: BiasSpec | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        targs = np.asarray(self.targets, dtype=np.int64)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "targets", targs)
        if feats.ndim != 2:
            raise ParameterError("features must be a 2-D array (n, D)")
        if targs.shape != (feats.shape[0],):
            raise ParameterError("targets length must match feature rows")
        if self.n_targets < 2:
            raise ParameterError("n_targets must be >= 2")
        if targs.size and (targs.min() < 0 or targs.max() >= self.n_targets):
            raise ParameterError("target labels out of range")
        if self.biases is not None:
            biases = np.asarray(self.biases, dtype=np.int64)
            object.__setattr__(self, "biases", biases)
            if biases.shape != targs.shape:
                raise ParameterError("biases length must match targets")
            if biases.size and (biases.min() < 0 or biases.max() >= self.n_biases):
                raise ParameterError("bias labels out of range")
        feats.setflags(write=False)
        targs.setflags(write=False)
        if self.biases is not None:
            self.biases.setflags(write=False)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def sample(self, i: int) -> LabeledSample:
        bias = None if self.biases is None else int(self.biases[i])
        return LabeledSample(self.features[i], int(self.targets[i]), bias)

    def with_biases(self, biases: np.ndarray, n_biases: int) -> "Dataset":
        """New dataset with the bias column replaced (e.g. pseudo-labels)."""
        return Dataset(
            features=self.features,
            targets=self.targets,
            biases=np.asarray(biases, dtype=np.int64),
            n_targets=self.n_targets,
            n_biases=n_biases,
            rho=self.rho,
            bias_spec=self.bias_spec,
        )

    def mask_biases(self) -> "Dataset":
        """New dataset with bias labels hidden, for unsupervised phases."""
        return Dataset(
            features=self.features,
            targets=self.targets,
            biases=None,
            n_targets=self.n_targets,
            n_biases=self.n_biases,
            rho=self.rho,
            bias_spec=self.bias_spec,
        )

    def subset(self, indices: np.ndarray) -> "Dataset":
        biases = None if self.biases is None else self.biases[indices]
        return Dataset(
            features=self.features[indices],
            targets=self.targets[indices],
            biases=biases,
            n_targets=self.n_targets,
            n_biases=self.n_biases,
            rho=self.rho,
            bias_spec=self.bias_spec,
        )

    def save_csv(self, path: str | Path) -> None:
        """Write one row per sample: f0..f{D-1}, target, bias.

        Dataset-level metadata goes to a ``<path>.meta.json`` sidecar.
        """
        path = Path(path)
        n, d = self.features.shape
        header = ",".join([f"f{i}" for i in range(d)] + ["target", "bias"])
        bias_col = (
            np.full(n, "", dtype=object)
            if self.biases is None
            else self.biases.astype(object)
        )
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for i in range(n):
                row = ",".join(repr(float(v)) for v in self.features[i])
                fh.write(f"{row},{self.targets[i]},{bias_col[i]}\n")
        meta = {
            "n_targets": self.n_targets,
            "n_biases": self.n_biases,
            "rho": self.rho,
        }
        with open(path.with_name(path.name + ".meta.json"), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)

    @staticmethod
    def load_csv(path: str | Path) -> "Dataset":
        path = Path(path)
        meta_path = path.with_name(path.name + ".meta.json")
        if not meta_path.exists():
            raise FormatError(f"missing metadata sidecar {meta_path}")
        with open(meta_path) as fh:
            meta = json.load(fh)
        rows = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=np.float64)
        rows = np.atleast_2d(rows)
        feats = rows[:, :-2]
        targets = rows[:, -2].astype(np.int64)
        bias_col = rows[:, -1]
        biases = None if np.isnan(bias_col).all() else bias_col.astype(np.int64)
        return Dataset(
            features=feats,
            targets=targets,
            biases=biases,
            n_targets=int(meta["n_targets"]),
            n_biases=int(meta["n_biases"]),
            rho=float(meta["rho"]),
        )


def assign_bias_label(target, rho: float, n_classes: int, rng: np.random.Generator):
    """Draw bias label(s): equal to target with probability rho, otherwise
    uniform over the remaining n_classes - 1 classes.

    Accepts a scalar target or an integer array; the return shape matches.
    """
    if not 0.0 < rho <= 1.0:
        raise ParameterError(f"rho must be in (0, 1], got {rho}")
    if n_classes < 2:
        raise ParameterError(f"n_classes must be >= 2, got {n_classes}")
    target_arr = np.asarray(target, dtype=np.int64)
    if target_arr.size and (target_arr.min() < 0 or target_arr.max() >= n_classes):
        raise ParameterError("target out of range")
    aligned = rng.random(target_arr.shape) < rho
    offset = rng.integers(0, n_classes - 1, size=target_arr.shape)
    other = offset + (offset >= target_arr)
    result = np.where(aligned, target_arr, other)
    if np.isscalar(target) or target_arr.ndim == 0:
        return int(result)
    return result


def generate_synthetic(
    spec: BiasSpec, n: int, rng: np.random.Generator | None = None
) -> Dataset:
    """Generate n samples with orthogonal class centers per block.

    Each feature vector is the concatenation of a target block
    (standard-basis center of the target class plus Gaussian noise of scale
    ``noise_target``) and a bias block (center of the bias class plus noise
    of scale ``noise_bias``).  Both ground-truth labels are stored.
    """
    if n < spec.n_classes:
        raise ParameterError(f"n must be >= n_classes, got {n} < {spec.n_classes}")
    if spec.dim_target < spec.n_classes or spec.dim_bias < spec.n_classes:
        raise ParameterError(
            "block dimensions must be >= n_classes for orthogonal class centers"
        )
    rng = as_generator(spec.seed if rng is None else rng)
    targets = rng.integers(0, spec.n_classes, size=n)
    biases = assign_bias_label(targets, spec.rho, spec.n_classes, rng)
    idx = np.arange(n)
    target_block = spec.noise_target * rng.standard_normal((n, spec.dim_target))
    target_block[idx, targets] += 1.0
    bias_block = spec.noise_bias * rng.standard_normal((n, spec.dim_bias))
    bias_block[idx, biases] += 1.0
    return Dataset(
        features=np.hstack([target_block, bias_block]),
        targets=targets,
        biases=biases,
        n_targets=spec.n_classes,
        n_biases=spec.n_classes,
        rho=spec.rho,
        bias_spec=spec,
    )


def _read_be32(data: bytes, offset: int, path) -> int:
    if offset + 4 > len(data):
        raise FormatError(f"{path}: truncated header at byte {offset}")
    return struct.unpack_from(">I", data, offset)[0]


def load_idx(images_path: str | Path, labels_path: str | Path):
    """Read an IDX image/label file pair.

    Layout (big endian):
      images: u32 magic 0x00000803 | u32 count | u32 rows | u32 cols | u8 pixels
      labels: u32 magic 0x00000801 | u32 count | u8 labels

    Returns (images, labels) with images of shape (n, rows, cols) uint8.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    for path in (images_path, labels_path):
        if not path.exists():
            raise FormatError(f"file not found: {path}")
    img_data = images_path.read_bytes()
    magic = _read_be32(img_data, 0, images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(
            f"{images_path}: bad image magic {magic:#010x} at byte 0, "
            f"expected {IDX_IMAGES_MAGIC:#010x}"
        )
    n = _read_be32(img_data, 4, images_path)
    rows = _read_be32(img_data, 8, images_path)
    cols = _read_be32(img_data, 12, images_path)
    expected = 16 + n * rows * cols
    if len(img_data) < expected:
        raise FormatError(
            f"{images_path}: truncated pixel data at byte {len(img_data)}, "
            f"expected {expected} bytes"
        )
    images = np.frombuffer(img_data, dtype=np.uint8, count=n * rows * cols, offset=16)
    images = images.reshape(n, rows, cols)

    lbl_data = labels_path.read_bytes()
    magic = _read_be32(lbl_data, 0, labels_path)
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(
            f"{labels_path}: bad label magic {magic:#010x} at byte 0, "
            f"expected {IDX_LABELS_MAGIC:#010x}"
        )
    n_labels = _read_be32(lbl_data, 4, labels_path)
    if len(lbl_data) < 8 + n_labels:
        raise FormatError(
            f"{labels_path}: truncated label data at byte {len(lbl_data)}, "
            f"expected {8 + n_labels} bytes"
        )
    labels = np.frombuffer(lbl_data, dtype=np.uint8, count=n_labels, offset=8)
    if n != n_labels:
        raise FormatError(
            f"image count {n} != label count {n_labels} "
            f"({images_path} vs {labels_path})"
        )
    return images, labels.astype(np.int64)


def colorize(
    images,
    targets,
    rho: float,
    palette=DEFAULT_PALETTE,
    rng: np.random.Generator | None = None,
) -> Dataset:
    """Paint grayscale image backgrounds with the color of a drawn bias class.

    Background pixels (byte value < BACKGROUND_THRESHOLD) take the palette
    color of the bias class; foreground pixels keep their grayscale value in
    all three channels.  Features are the flattened (rows, cols, 3) image
    normalized to [0, 1].
    """
    images = np.asarray(images, dtype=np.uint8)
    targets = np.asarray(targets, dtype=np.int64)
    if images.ndim != 3:
        raise ParameterError("images must have shape (n, rows, cols)")
    palette_arr = np.asarray(palette, dtype=np.float64)
    n_classes = palette_arr.shape[0]
    if palette_arr.ndim != 2 or palette_arr.shape[1] != 3:
        raise ParameterError("palette must be a sequence of RGB triples")
    if len(np.unique(palette_arr, axis=0)) != n_classes:
        raise ParameterError("palette colors must be distinct")
    if targets.size and targets.max() >= n_classes:
        raise ParameterError("palette size must equal the number of target classes")
    rng = as_generator(rng)
    biases = assign_bias_label(targets, rho, n_classes, rng)

    n, h, w = images.shape
    gray = images.astype(np.float64)
    out = np.repeat(gray[:, :, :, None], 3, axis=3)
    background = gray < BACKGROUND_THRESHOLD
    colors = palette_arr[biases]  # (n, 3)
    out = np.where(background[:, :, :, None], colors[:, None, None, :], out)
    features = (out / 255.0).reshape(n, h * w * 3)
    return Dataset(
        features=features,
        targets=targets,
        biases=np.asarray(biases, dtype=np.int64),
        n_targets=n_classes,
        n_biases=n_classes,
        rho=rho,
    )


def make_validation_split(
    train: Dataset,
    fraction: float,
    rho_val: float | None = None,
    rng: np.random.Generator | None = None,
):
    """Carve ceil(fraction * n) samples off a synthetic dataset and re-draw
    their bias blocks at rho_val (default 1/N_T, the unbiased regime).

    Requires generation metadata (``bias_spec``); image datasets should be
    split before colorization instead.
    """
    if not 0.0 < fraction < 1.0:
        raise ParameterError(f"fraction must be in (0, 1), got {fraction}")
    spec = train.bias_spec
    if spec is None:
        raise ParameterError(
            "dataset carries no generation metadata; split before colorization"
        )
    if rho_val is None:
        rho_val = 1.0 / train.n_targets
    rng = as_generator(rng)
    n = len(train)
    n_val = math.ceil(fraction * n)
    perm = rng.permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    val_targets = train.targets[val_idx]
    val_biases = np.asarray(
        assign_bias_label(val_targets, rho_val, spec.n_classes, rng), dtype=np.int64
    )
    val_features = train.features[val_idx].copy()
    bias_block = spec.noise_bias * rng.standard_normal((n_val, spec.dim_bias))
    bias_block[np.arange(n_val), val_biases] += 1.0
    val_features[:, spec.dim_target :] = bias_block

    val = Dataset(
        features=val_features,
        targets=val_targets,
        biases=val_biases,
        n_targets=train.n_targets,
        n_biases=train.n_biases,
        rho=rho_val,
        bias_spec=replace(spec, rho=rho_val),
    )
    return train.subset(train_idx), val
