"""Dataset loading (MNIST IDX files), seeded splitting, and synthetic
large-vocabulary categorical task generation."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Tuple

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxParseError(ValueError):
    """Structured IDX parse failure (bad magic, truncation, mismatch)."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (N, input_dim) float64
    labels: np.ndarray    # (N,) int64 in [0, D)
    D: int
    provenance: str = ""

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("features must be (N, input_dim), labels (N,)")
        if self.features.shape[0] != self.labels.shape[0] or self.features.shape[0] == 0:
            raise ValueError("features/labels length mismatch or empty dataset")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if self.labels.min() < 0 or self.labels.max() >= self.D:
            raise ValueError("labels out of range")

    def __len__(self):
        return self.features.shape[0]


@dataclass(frozen=True)
class SplitSpec:
    train_n: int
    valid_n: int
    test_n: int
    seed: int = 0


def _read_be_u32(buf: bytes, offset: int, path: str) -> int:
    if offset + 4 > len(buf):
        raise IdxParseError(f"{path}: truncated header at offset {offset}")
    return struct.unpack_from(">I", buf, offset)[0]


def load_mnist(images_path: str, labels_path: str) -> Dataset:
    """Load one MNIST IDX image/label file pair; pixels scaled to [0, 1]."""
    with open(images_path, "rb") as f:
        ibuf = f.read()
    with open(labels_path, "rb") as f:
        lbuf = f.read()

    magic = _read_be_u32(ibuf, 0, images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise IdxParseError(
            f"{images_path}: bad magic 0x{magic:08x} at offset 0, "
            f"expected 0x{IDX_IMAGES_MAGIC:08x}"
        )
    n_img = _read_be_u32(ibuf, 4, images_path)
    rows = _read_be_u32(ibuf, 8, images_path)
    cols = _read_be_u32(ibuf, 12, images_path)
    if len(ibuf) != 16 + n_img * rows * cols:
        raise IdxParseError(
            f"{images_path}: expected {16 + n_img * rows * cols} bytes, got {len(ibuf)}"
        )

    magic = _read_be_u32(lbuf, 0, labels_path)
    if magic != IDX_LABELS_MAGIC:
        raise IdxParseError(
            f"{labels_path}: bad magic 0x{magic:08x} at offset 0, "
            f"expected 0x{IDX_LABELS_MAGIC:08x}"
        )
    n_lab = _read_be_u32(lbuf, 4, labels_path)
    if len(lbuf) != 8 + n_lab:
        raise IdxParseError(f"{labels_path}: expected {8 + n_lab} bytes, got {len(lbuf)}")
    if n_img != n_lab:
        raise IdxParseError(
            f"image/label count mismatch: {n_img} images vs {n_lab} labels"
        )

    pixels = np.frombuffer(ibuf, dtype=np.uint8, offset=16).reshape(n_img, rows * cols)
    features = pixels.astype(np.float64) / 255.0
    labels = np.frombuffer(lbuf, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(features=features, labels=labels, D=10,
                   provenance=f"mnist:{images_path}")


def concat(a: Dataset, b: Dataset) -> Dataset:
    if a.D != b.D or a.features.shape[1] != b.features.shape[1]:
        raise ValueError("datasets are not compatible")
    return Dataset(
        features=np.concatenate([a.features, b.features]),
        labels=np.concatenate([a.labels, b.labels]),
        D=a.D,
        provenance=f"concat({a.provenance},{b.provenance})",
    )


def random_split(dataset: Dataset, spec: SplitSpec) -> Tuple[Dataset, Dataset, Dataset]:
    """Disjoint (train, valid, test) from a seeded shuffle."""
    total = spec.train_n + spec.valid_n + spec.test_n
    if total > len(dataset):
        raise ValueError(f"split sizes sum to {total} > N={len(dataset)}")
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(len(dataset))
    bounds = (spec.train_n, spec.train_n + spec.valid_n, total)
    parts = []
    start = 0
    for name, end in zip(("train", "valid", "test"), bounds):
        idx = perm[start:end]
        parts.append(
            Dataset(
                features=dataset.features[idx],
                labels=dataset.labels[idx],
                D=dataset.D,
                provenance=f"{dataset.provenance}/{name}(seed={spec.seed})",
            )
        )
        start = end
    return tuple(parts)


def zipf_frequencies(D: int, exponent: float) -> np.ndarray:
    """Class frequencies proportional to (k+1)^-exponent, k = 0..D-1."""
    w = np.arange(1, D + 1, dtype=np.float64) ** (-exponent)
    return w / w.sum()


def synthetic_categorical(
    D: int,
    input_dim: int,
    N: int,
    zipf_exponent: float = 1.0,
    seed: int = 0,
    separation: float = 1.0,
) -> Dataset:
    """Class-conditional Gaussian task with Zipf class frequencies.

    Each class has a unit-norm mean direction scaled by ``separation``;
    features are that mean plus standard Gaussian noise.  At separation 0
    the features carry no information and the best achievable accuracy is
    max_k p_k.
    """
    if D < 2:
        raise ValueError("D must be >= 2")
    if zipf_exponent < 0:
        raise ValueError("zipf_exponent must be >= 0")
    rng = np.random.default_rng(seed)
    p = zipf_frequencies(D, zipf_exponent)
    labels = rng.choice(D, size=N, p=p).astype(np.int64)
    means = rng.normal(size=(D, input_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    features = separation * means[labels] + rng.normal(size=(N, input_dim))
    return Dataset(
        features=features,
        labels=labels,
        D=D,
        provenance=f"synthetic(D={D},zipf={zipf_exponent},sep={separation},seed={seed})",
    )
