"""Datasets: IDX ingestion, a separable synthetic "ink blob" generator, seeded splits."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, FormatError, UsageError
from .rng import stream

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
N_CLASSES = 10


@dataclass
class Dataset:
    images: np.ndarray  # [n, C, H, W] in [0, 1]
    labels: np.ndarray  # [n] ints in [0, 10)
    tag: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be [n, C, H, W], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= N_CLASSES):
            raise DataError(f"labels must lie in [0, {N_CLASSES})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, tag: str | None = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.tag if tag is None else tag)


# -- IDX ------------------------------------------------------------------------


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header at offset {len(raw)} (need {header} bytes)")
    (got,) = struct.unpack_from(">I", raw, 0)
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    size = int(np.prod(dims))
    if len(raw) - header != size:
        raise FormatError(f"{path}: payload at offset {header} has {len(raw) - header} bytes, header implies {size}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, tag: str = "") -> Dataset:
    images = _read_idx(images_path, IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images_path} holds {images.shape[0]} images but {labels_path} holds {labels.shape[0]} labels (offset 4)"
        )
    return Dataset(images[:, None].astype(np.float64) / 255.0, labels.astype(np.int64), tag)


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Export as IDX; pixels are rounded to the nearest multiple of 1/255."""
    if dataset.images.shape[1] != 1:
        raise UsageError("IDX export supports single-channel images only")
    n, _, h, w = dataset.images.shape
    pixels = np.rint(dataset.images[:, 0] * 255.0).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, h, w) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABEL_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes())


# -- synthetic blobs ------------------------------------------------------------

GRID = (6, 11, 16, 21)
# anchor offsets in grid cells, relative to each class's base cell
ANCHOR_OFFSETS = (
    ((0, 0), (0, 1)),
    ((0, 0), (1, 0)),
    ((0, 0), (1, 1)),
    ((0, 1), (1, 0)),
    ((0, 0), (0, 2)),
    ((0, 0), (2, 0)),
    ((0, 0), (1, 0), (1, 1)),
    ((0, 0), (0, 1), (0, 2)),
    ((0, 0), (1, 0), (2, 0)),
    ((0, 1), (1, 0), (1, 2)),
)


def default_anchors() -> tuple[tuple[tuple[float, float], ...], ...]:
    """(row, col) pixel anchors per class on a coarse 4x4 grid."""
    table = []
    for c, offsets in enumerate(ANCHOR_OFFSETS):
        br, bc = c % 2, (c // 2) % 2
        table.append(tuple((float(GRID[br + dr]), float(GRID[bc + dc])) for dr, dc in offsets))
    return tuple(table)


@dataclass(frozen=True)
class SyntheticConfig:
    n_per_class: int = 200
    seed: int = 0
    sigma_blob: float = 1.6
    sigma_jit: float = 0.8
    sigma_pix: float = 0.05
    amp_range: tuple[float, float] = (0.8, 1.2)
    anchors: tuple = field(default_factory=default_anchors)
    size: int = 28

    def __post_init__(self):
        if self.n_per_class < 0:
            raise ConfigurationError("n_per_class must be >= 0")
        if self.sigma_blob <= 0 or self.sigma_jit < 0 or self.sigma_pix < 0:
            raise ConfigurationError("blob width must be positive and noise levels non-negative")
        lo, hi = self.amp_range
        if not 0 <= lo <= hi:
            raise ConfigurationError(f"bad amplitude range {self.amp_range}")
        if len(self.anchors) == 0:
            raise ConfigurationError("need at least one class")
        for c, class_anchors in enumerate(self.anchors):
            for r, col in class_anchors:
                if not (0 <= r <= self.size - 1 and 0 <= col <= self.size - 1):
                    raise ConfigurationError(f"class {c} anchor ({r}, {col}) lies outside the {self.size}x{self.size} image")


def gen_synthetic(cfg: SyntheticConfig, tag: str = "synthetic") -> Dataset:
    """Class-balanced images: jittered Gaussian blobs at class anchors, pixel noise, clipped to [0, 1]."""
    rng = stream(cfg.seed, "synthetic")
    n_classes = len(cfg.anchors)
    labels = np.tile(np.arange(n_classes), cfg.n_per_class)
    grid = np.arange(cfg.size, dtype=np.float64)
    images = np.zeros((len(labels), 1, cfg.size, cfg.size))
    two_s2 = 2.0 * cfg.sigma_blob**2
    for n, c in enumerate(labels):
        anchors = np.asarray(cfg.anchors[c])
        centres = anchors + rng.normal(0.0, cfg.sigma_jit, size=anchors.shape)
        amps = rng.uniform(*cfg.amp_range, size=len(anchors))
        img = np.zeros((cfg.size, cfg.size))
        for (mu, nu), a in zip(centres, amps):
            img += a * np.outer(np.exp(-((grid - mu) ** 2) / two_s2), np.exp(-((grid - nu) ** 2) / two_s2))
        if cfg.sigma_pix > 0:
            img += rng.normal(0.0, cfg.sigma_pix, size=img.shape)
        images[n, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, tag)


def split_indices(n: int, seed: int, sizes) -> list[np.ndarray]:
    """Consecutive disjoint blocks of one seeded permutation of ``range(n)``."""
    sizes = [int(s) for s in sizes]
    if any(s < 0 for s in sizes) or sum(sizes) > n:
        raise UsageError(f"split sizes {sizes} exceed the {n} available samples")
    perm = stream(seed, "split").permutation(n)
    bounds = np.cumsum([0] + sizes)
    return [perm[a:b] for a, b in zip(bounds[:-1], bounds[1:])]


def split(dataset: Dataset, seed: int, sizes) -> tuple[Dataset, ...]:
    """One dataset per entry of ``sizes`` (tagged train, val, test)."""
    tags = ("train", "val", "test")
    parts = split_indices(len(dataset), seed, sizes)
    return tuple(dataset.subset(idx, tags[i] if i < 3 else f"part{i}") for i, idx in enumerate(parts))
