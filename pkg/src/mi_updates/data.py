"""Datasets, file loaders, synthetic generators and the shift mixture sampler."""

from __future__ import annotations

import csv
import dataclasses
import struct
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803


class DataFormatError(ValueError):
    """Raised when an input file or generator spec is malformed."""


def derive_seed(root: int, *keys: int) -> int:
    """Derives a child seed from a root seed and a path of integer keys.

    The scheme hashes ``(root, *keys)`` through ``numpy.random.SeedSequence``
    and packs the first two 32-bit words of its state into one 64-bit
    integer. Children of the same root with different key paths are
    statistically independent, and the mapping never changes between runs.
    """
    words = np.random.SeedSequence([int(root) & 0xFFFFFFFFFFFFFFFF, *map(int, keys)]).generate_state(2)
    return int(words[0]) << 32 | int(words[1])


def rng_for(root: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *keys))


@dataclasses.dataclass(frozen=True, eq=False)
class Dataset:
    """An immutable labelled sample collection.

    Attributes:
      features: float array of shape (n, d).
      labels: int array of shape (n,), entries in [0, num_classes).
      num_classes: number of classes K.
      source_tag: free-form provenance string.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    source_tag: str = ""

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise DataFormatError(f"features must be 2-D, got shape {features.shape}")
        if labels.ndim != 1 or len(labels) != len(features):
            raise DataFormatError(
                f"{len(features)} feature rows but {labels.size} labels"
            )
        if features.shape[1] == 0:
            raise DataFormatError("feature dimension must be positive")
        if self.num_classes < 1:
            raise DataFormatError("num_classes must be positive")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DataFormatError(
                f"labels must lie in [0, {self.num_classes}), got range "
                f"[{labels.min()}, {labels.max()}]"
            )
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> Dataset:
        return Dataset(self.features[index], self.labels[index], self.num_classes, self.source_tag)

    def equals(self, other: Dataset) -> bool:
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


def concat(datasets: Sequence[Dataset], source_tag: str | None = None) -> Dataset:
    if not datasets:
        raise ValueError("nothing to concatenate")
    dims = {ds.dim for ds in datasets}
    if len(dims) != 1:
        raise DataFormatError(f"cannot concatenate datasets of dimensions {sorted(dims)}")
    return Dataset(
        np.concatenate([ds.features for ds in datasets]),
        np.concatenate([ds.labels for ds in datasets]),
        max(ds.num_classes for ds in datasets),
        source_tag if source_tag is not None else datasets[0].source_tag,
    )


@dataclasses.dataclass(frozen=True)
class GaussianClassSpec:
    mean: Sequence[float]
    sigma: float
    n_samples: int

    def __post_init__(self):
        if self.sigma < 0:
            raise DataFormatError("sigma must be nonnegative")
        if self.n_samples < 1:
            raise DataFormatError("n_samples must be positive")


def synth_gaussian_classes(specs: Sequence[GaussianClassSpec], seed: int) -> Dataset:
    """Draws ``spec.n_samples`` points from N(mean, sigma^2 I) for every class.

    Rows are grouped by class in spec order; class ``i`` gets label ``i``.
    """
    if len(specs) < 2:
        raise DataFormatError("need at least two classes")
    dims = {len(s.mean) for s in specs}
    if len(dims) != 1:
        raise DataFormatError(f"class means have mismatched dimensions {sorted(dims)}")
    rng = np.random.default_rng(seed)
    blocks, labels = [], []
    for label, spec in enumerate(specs):
        mean = np.asarray(spec.mean, dtype=np.float64)
        blocks.append(mean + spec.sigma * rng.standard_normal((spec.n_samples, len(mean))))
        labels.append(np.full(spec.n_samples, label))
    return Dataset(np.concatenate(blocks), np.concatenate(labels), len(specs), f"gaussian(seed={seed})")


class Distribution(Protocol):
    """Anything that can draw labelled samples from a seeded generator."""

    dim: int
    num_classes: int

    def sample(self, n: int, rng: np.random.Generator) -> Dataset: ...


@dataclasses.dataclass(frozen=True, eq=False)
class GaussianClasses:
    """Class-conditional isotropic Gaussians with uniform class prior."""

    means: np.ndarray
    sigma: float = 1.0
    tag: str = "gaussian"

    def __post_init__(self):
        means = np.array(self.means, dtype=np.float64)
        if means.ndim != 2 or len(means) < 2:
            raise DataFormatError("means must be a (K >= 2, d) array")
        if self.sigma < 0:
            raise DataFormatError("sigma must be nonnegative")
        object.__setattr__(self, "means", means)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    def sample(self, n: int, rng: np.random.Generator) -> Dataset:
        labels = rng.integers(self.num_classes, size=n)
        x = self.means[labels] + self.sigma * rng.standard_normal((n, self.dim))
        return Dataset(x, labels, self.num_classes, self.tag)

    @classmethod
    def random(cls, num_classes: int, dim: int, separation: float, sigma: float, seed: int,
               tag: str = "gaussian") -> GaussianClasses:
        """Class means drawn i.i.d. from N(0, separation^2 I)."""
        rng = np.random.default_rng(seed)
        return cls(separation * rng.standard_normal((num_classes, dim)), sigma, tag)


@dataclasses.dataclass(frozen=True)
class MixtureSpec:
    source: Distribution
    target: Distribution
    shift_ratio: float

    def __post_init__(self):
        if not 0.0 <= self.shift_ratio <= 1.0:
            raise DataFormatError(f"shift_ratio must be in [0, 1], got {self.shift_ratio}")
        if (self.source.dim, self.source.num_classes) != (self.target.dim, self.target.num_classes):
            raise DataFormatError("source and target distributions have incompatible shapes")


@dataclasses.dataclass(frozen=True)
class MixtureDistribution:
    """Sampler view of a MixtureSpec, usable wherever a Distribution is."""

    spec: MixtureSpec

    @property
    def dim(self) -> int:
        return self.spec.source.dim

    @property
    def num_classes(self) -> int:
        return self.spec.source.num_classes

    def sample(self, n: int, rng: np.random.Generator) -> Dataset:
        return mixture_sample(self.spec, n, int(rng.integers(2**63)))


def mixture_sample(mix: MixtureSpec, n: int, seed: int, return_origin: bool = False):
    """Draws n points from (1 - alpha) * source + alpha * target.

    Each row independently comes from the target with probability alpha.
    The source component is driven by ``default_rng(seed)`` so that alpha = 0
    reproduces ``source.sample(n, default_rng(seed))`` exactly; the target and
    the per-row coin use child streams ``derive_seed(seed, 1)`` and
    ``derive_seed(seed, 2)``.

    Returns:
      The Dataset, and with ``return_origin`` also a boolean array that is
      True for target-origin rows.
    """
    if n < 1:
        raise ValueError("n must be positive")
    from_source = mix.source.sample(n, np.random.default_rng(seed))
    from_target = mix.target.sample(n, rng_for(seed, 1))
    origin = rng_for(seed, 2).random(n) < mix.shift_ratio
    features = np.where(origin[:, None], from_target.features, from_source.features)
    labels = np.where(origin, from_target.labels, from_source.labels)
    out = Dataset(features, labels, mix.source.num_classes, f"mixture(alpha={mix.shift_ratio})")
    return (out, origin) if return_origin else out


def _read_idx(path: Path, expected_magic: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise DataFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    body = raw[header_len:]
    expected = int(np.prod(dims))
    if len(body) < expected:
        raise DataFormatError(f"{path}: truncated file, expected {expected} data bytes, found {len(body)}")
    return dims, body[:expected]


def load_idx(images_path, labels_path, num_classes: int | None = None, normalize: bool = True) -> Dataset:
    """Loads an MNIST-family IDX image/label file pair.

    Images are flattened to ``rows * cols`` features; with ``normalize`` the
    unsigned bytes are divided by 255.
    """
    (count, rows, cols), pixels = _read_idx(images_path, IDX_IMAGE_MAGIC)
    (label_count,), label_bytes = _read_idx(labels_path, IDX_LABEL_MAGIC)
    if count != label_count:
        raise DataFormatError(f"{count} images but {label_count} labels")
    x = np.frombuffer(pixels, dtype=np.uint8).reshape(count, rows * cols).astype(np.float64)
    if normalize:
        x /= 255.0
    y = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    k = num_classes if num_classes is not None else (int(y.max()) + 1 if len(y) else 1)
    return Dataset(x, y, k, f"idx:{Path(images_path).name}")


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Writes uint8 images of shape (n, rows, cols) and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABEL_MAGIC, len(labels)) + labels.tobytes())


def load_csv(path, label_column: str, normalize: bool = False) -> Dataset:
    """Loads a headed UTF-8 CSV; every non-label column must be numeric.

    Labels are re-indexed densely in order of first appearance. With
    ``normalize`` every feature column is standardized to zero mean and unit
    variance (constant columns are only centred).
    """
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if label_column not in header:
            raise DataFormatError(f"{path}: label column {label_column!r} not in header {header}")
        label_idx = header.index(label_column)
        feature_cols = [i for i in range(len(header)) if i != label_idx]
        if not feature_cols:
            raise DataFormatError(f"{path}: no feature columns")
        classes: dict[str, int] = {}
        rows, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}: row {line_no} has {len(row)} cells, header has {len(header)}")
            values = []
            for i in feature_cols:
                try:
                    values.append(float(row[i]))
                except ValueError:
                    raise DataFormatError(
                        f"{path}: non-numeric cell {row[i]!r} at row {line_no}, column {header[i]!r}"
                    ) from None
            rows.append(values)
            labels.append(classes.setdefault(row[label_idx], len(classes)))
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    x = np.array(rows, dtype=np.float64)
    if normalize:
        x = standardize(x)
    return Dataset(x, labels, len(classes), f"csv:{Path(path).name}")


def standardize(x: np.ndarray) -> np.ndarray:
    std = x.std(axis=0)
    return (x - x.mean(axis=0)) / np.where(std > 0, std, 1.0)


def save_dataset(ds: Dataset, path) -> None:
    """Persists a Dataset as an ``.npz`` archive.

    Arrays: ``features`` (float64, n x d), ``labels`` (int64, n),
    ``num_classes`` (scalar int64) and ``source_tag`` (0-d unicode).
    """
    with open(path, "wb") as f:
        np.savez(f, features=ds.features, labels=ds.labels,
                 num_classes=np.int64(ds.num_classes), source_tag=np.str_(ds.source_tag))


def load_dataset(path) -> Dataset:
    with np.load(path, allow_pickle=False) as z:
        return Dataset(z["features"], z["labels"], int(z["num_classes"]), str(z["source_tag"]))
