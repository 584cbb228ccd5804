"""Parametric stand-in data: class-conditional images plus correlated metadata."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numeric as nm
from .encoder import read_features, read_images, write_features, write_images
from .graph import CATEGORICAL_FIELDS, MetadataTable, read_metadata_csv, write_metadata_csv

# Class codewords over the eight binary fields: the first-order Reed-Muller
# code of length 8, ordered so any two of the first k classes differ in >= 4 bits.
CODEWORDS = (0x00, 0xFF, 0x0F, 0xF0, 0x33, 0xCC, 0x55, 0xAA)


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings.

    Class ``c`` has latent centroid ``separation * noise * e_c`` in
    ``feature_dim`` dimensions and latent noise ``N(0, noise^2 I)``.  Each
    binary metadata field takes its class codeword bit with probability
    ``metadata_signal``.
    """

    n_classes: int = 2
    per_class: int = 150
    feature_dim: int = 8
    separation: float = 4.0
    metadata_signal: float = 0.8
    noise: float = 1.0
    missing_rate: float = 0.05
    image_size: int = 32
    pixel_noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.n_classes <= len(CODEWORDS):
            raise ValueError(f"n_classes must lie in [2, {len(CODEWORDS)}]")
        if self.feature_dim < self.n_classes:
            raise ValueError("feature_dim must be at least n_classes")
        if self.separation < 0:
            raise ValueError("separation must be nonnegative")
        if not 0.5 <= self.metadata_signal <= 1.0:
            raise ValueError("metadata_signal must lie in [0.5, 1]")
        if self.noise <= 0 or not 0 <= self.missing_rate < 1 or self.per_class < 1:
            raise ValueError("noise must be > 0, missing_rate in [0, 1), per_class >= 1")
        if self.image_size % 8:
            raise ValueError("image_size must be divisible by 8")


@dataclass
class SyntheticData:
    images: np.ndarray
    features: np.ndarray | None
    metadata: MetadataTable
    labels: np.ndarray

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1


def centroids(spec: SyntheticSpec) -> np.ndarray:
    c = np.zeros((spec.n_classes, spec.feature_dim))
    c[np.arange(spec.n_classes), np.arange(spec.n_classes)] = spec.separation * spec.noise
    return c


def patterns(dim: int, size: int) -> np.ndarray:
    """One Gaussian bump per latent coordinate, laid out on a grid."""
    side = int(np.ceil(np.sqrt(dim)))
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    out = np.empty((dim, size, size))
    for k in range(dim):
        cy = (k // side + 0.5) * size / side
        cx = (k % side + 0.5) * size / side
        out[k] = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (size / (2.5 * side)) ** 2))
    return out


def render(latent, size: int, rng, pixel_noise: float) -> np.ndarray:
    z = np.asarray(latent)
    img = 0.5 + 0.06 * np.tensordot(z, patterns(z.shape[1], size), axes=1)
    img += pixel_noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Deterministic per ``spec.seed``; instances are grouped by class."""
    rng = nm.make_rng(spec.seed, "synthetic")
    labels = np.repeat(np.arange(spec.n_classes), spec.per_class)
    n = labels.size
    latent = centroids(spec)[labels] + spec.noise * rng.standard_normal((n, spec.feature_dim))
    images = render(latent, spec.image_size, rng, spec.pixel_noise)

    cols: dict[str, list] = {}
    level = labels / max(spec.n_classes - 1, 1)
    cols["offset"] = np.abs(rng.normal(4.0 + 6.0 * level, 3.0)).tolist()
    cols["age"] = np.clip(rng.normal(42.0 + 18.0 * level, 12.0), 0.0, None).tolist()
    for bit, name in enumerate(CATEGORICAL_FIELDS):
        code = np.array([(CODEWORDS[c] >> (7 - bit)) & 1 for c in labels])
        keep = rng.random(n) < spec.metadata_signal
        value = np.where(keep, code, 1 - code)
        vocab = CATEGORICAL_FIELDS[name]
        cols[name] = [vocab[v] for v in value]
    for name in cols:
        gone = rng.random(n) < spec.missing_rate
        gone[rng.integers(n)] = False  # every field keeps an observed value
        cols[name] = [None if g else v for v, g in zip(cols[name], gone)]
    return SyntheticData(images, latent, MetadataTable(cols), labels)


def save_dataset(data: SyntheticData, directory) -> Path:
    """``images.bin``, ``metadata.csv``, ``labels.csv`` and ``latent.csv`` in ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_images(data.images, d / "images.bin")
    write_metadata_csv(data.metadata, d / "metadata.csv")
    with open(d / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"])
        w.writerows(enumerate(data.labels.tolist()))
    if data.features is not None:
        write_features(data.features, d / "latent.csv")
    return d


def read_labels(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"label file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "label" not in rows[0]:
        raise ValueError(f"{path}: expected a 'label' column")
    return np.array([int(r["label"]) for r in rows], dtype=np.int64)


def load_dataset(directory) -> SyntheticData:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory not found: {d}")
    images = read_images(d / "images.bin") if (d / "images.bin").exists() else read_images(d / "images.csv")
    labels = read_labels(d / "labels.csv")
    if not (d / "metadata.csv").exists():
        raise FileNotFoundError(f"metadata file not found: {d / 'metadata.csv'}")
    metadata = read_metadata_csv(d / "metadata.csv")
    latent = read_features(d / "latent.csv")[0] if (d / "latent.csv").exists() else None
    if not len(images) == len(labels) == metadata.n:
        raise ValueError(
            f"{d}: {len(images)} images, {len(labels)} labels, {metadata.n} metadata rows"
        )
    return SyntheticData(images, latent, metadata, labels)
