"""Dataset ingestion, synthetic generators, label corruption, and bootstrap weights.

Datasets are immutable value objects; every generator is a pure function of
its arguments and the injected random generator.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParseError, ShapeError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    """A finite labelled sample: inputs (n x d) and integer class labels (n)."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or inputs.shape[0] < 1:
            raise ShapeError(f"inputs must be a non-empty (n, d) matrix, got {inputs.shape}")
        if labels.shape != (inputs.shape[0],):
            raise ShapeError("labels must be one index per input row")
        if not np.all(np.isfinite(inputs)):
            raise ShapeError("inputs contain non-finite values")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ShapeError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


def _read_exact(f, count, what):
    buf = f.read(count)
    if len(buf) != count:
        raise ParseError(f"{what}: expected {count} bytes, file truncated at {len(buf)}")
    return buf


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Read an IDX image/label file pair into a flattened, [0,1]-scaled Dataset.

    Validates the big-endian magic numbers, the dimension headers, payload
    sizes, agreement of the two sample counts, and the label range.
    """
    with open(images_path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, "images magic"))
        if magic != IDX_IMAGES_MAGIC:
            raise ParseError(f"images magic: expected {IDX_IMAGES_MAGIC:#010x}, got {magic:#010x}")
        n_images, rows, cols = struct.unpack(">III", _read_exact(f, 12, "images header"))
        payload = _read_exact(f, n_images * rows * cols, "images payload")
        extra = f.read(1)
        if extra:
            raise ParseError("images payload: trailing bytes after declared data")
    with open(labels_path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, "labels magic"))
        if magic != IDX_LABELS_MAGIC:
            raise ParseError(f"labels magic: expected {IDX_LABELS_MAGIC:#010x}, got {magic:#010x}")
        (n_labels,) = struct.unpack(">I", _read_exact(f, 4, "labels header"))
        label_bytes = _read_exact(f, n_labels, "labels payload")
        extra = f.read(1)
        if extra:
            raise ParseError("labels payload: trailing bytes after declared data")
    if n_images != n_labels:
        raise ParseError(f"count mismatch: {n_images} images vs {n_labels} labels")
    labels = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise ParseError(
            f"label value {labels[bad]} at index {bad} out of range for {num_classes} classes"
        )
    images = np.frombuffer(payload, dtype=np.uint8).reshape(n_images, rows * cols)
    return Dataset(images.astype(np.float64) / 255.0, labels, num_classes)


def write_idx_images(path, images: np.ndarray) -> None:
    """Write a (n, rows, cols) uint8 array in IDX image format."""
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ShapeError(f"images must be (n, rows, cols), got {images.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    """Write a (n,) uint8 array in IDX label format."""
    labels = np.asarray(labels, dtype=np.uint8)
    if labels.ndim != 1:
        raise ShapeError(f"labels must be 1-D, got {labels.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def synthetic_blobs(
    n: int, dim: int, num_classes: int, separation: float, rng: np.random.Generator
) -> Dataset:
    """Balanced unit-variance Gaussian clusters with pairwise mean distance `separation`.

    Cluster means sit on scaled coordinate axes (alternating sign once the
    axes are exhausted), so any two means are at least `separation` apart.
    """
    if n < num_classes:
        raise ConfigError(f"need n >= num_classes, got n={n}, C={num_classes}")
    if num_classes > 2 * dim:
        raise ConfigError(f"at most 2*dim={2 * dim} separable clusters in {dim} dimensions")
    means = np.zeros((num_classes, dim))
    for c in range(num_classes):
        axis = c % dim
        sign = 1.0 if c < dim else -1.0
        means[c, axis] = sign * separation / np.sqrt(2.0)
    counts = np.full(num_classes, n // num_classes)
    counts[: n % num_classes] += 1
    labels = np.repeat(np.arange(num_classes), counts)
    inputs = rng.standard_normal((n, dim)) + means[labels]
    perm = rng.permutation(n)
    return Dataset(inputs[perm], labels[perm], num_classes)


def corrupt_labels(ds: Dataset, ratio: float, rng: np.random.Generator) -> Dataset:
    """Reassign exactly floor(ratio*n) labels, each to a different class.

    The replacement is uniform over the other classes, so `ratio` is the true
    flip fraction.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"corruption ratio must be in [0,1], got {ratio}")
    k = int(np.floor(ratio * ds.n))
    labels = ds.labels.copy()
    if k > 0:
        idx = rng.choice(ds.n, size=k, replace=False)
        # uniform over the C-1 other classes via a shifted draw
        shift = rng.integers(1, ds.num_classes, size=k)
        labels[idx] = (labels[idx] + shift) % ds.num_classes
    return Dataset(ds.inputs, labels, ds.num_classes)


def randomize_labels(ds: Dataset, rng: np.random.Generator) -> Dataset:
    """Replace every label with an i.i.d. uniform class, independent of inputs."""
    labels = rng.integers(0, ds.num_classes, size=ds.n)
    return Dataset(ds.inputs, labels, ds.num_classes)


def poisson_weights(n: int, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. Poisson(1) resampling counts; mean and variance are both 1."""
    if n < 1:
        raise ConfigError("need n >= 1")
    return rng.poisson(1.0, size=n).astype(np.int64)


def multinomial_bootstrap(n: int, rng: np.random.Generator) -> np.ndarray:
    """Multinomial(n, 1/n each) resampling counts; they always sum to n."""
    if n < 1:
        raise ConfigError("need n >= 1")
    return rng.multinomial(n, np.full(n, 1.0 / n)).astype(np.int64)


def subsample(ds: Dataset, m: int, rng: np.random.Generator) -> Dataset:
    """m distinct rows drawn without replacement."""
    if not 1 <= m <= ds.n:
        raise ConfigError(f"need 1 <= m <= {ds.n}, got {m}")
    idx = rng.choice(ds.n, size=m, replace=False)
    return Dataset(ds.inputs[idx], ds.labels[idx], ds.num_classes)
