"""Datasets: CIFAR binary ingestion, synthetic generation, IID partitioning,
and the pad/crop/flip augmentation pipeline."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .seeding import derive_rng

CIFAR_RECORD_BYTES = 1 + 3072  # label byte + 3 x 32 x 32 pixel bytes


@dataclass
class Dataset:
    """Immutable image classification dataset; pixel values in [0, 1].

    ``mean``/``std`` are per-channel normalization constants, computed from
    the training split at load time and copied onto the matching test split.
    """

    name: str
    images: np.ndarray  # (M, C, H, W) float64
    labels: np.ndarray  # (M,) int64
    num_classes: int
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ConfigError("Dataset: images must be (M,C,H,W) aligned with labels")
        if len(self.images) < 1:
            raise ConfigError("Dataset: empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConfigError("Dataset: labels out of range")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    @classmethod
    def from_arrays(cls, name, images, labels, num_classes, mean=None, std=None):
        images = np.asarray(images, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if mean is None:
            mean = images.mean(axis=(0, 2, 3))
            std = np.maximum(images.std(axis=(0, 2, 3)), 1e-8)
        return cls(name, images, labels, num_classes, np.asarray(mean), np.asarray(std))

    def normalized(self, idx=None) -> np.ndarray:
        imgs = self.images if idx is None else self.images[idx]
        return (imgs - self.mean[None, :, None, None]) / self.std[None, :, None, None]


@dataclass(frozen=True)
class AugmentConfig:
    pad: int = 4
    hflip_prob: float = 0.5

    def __post_init__(self):
        if self.pad < 0:
            raise ConfigError("AugmentConfig: pad must be non-negative")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError("AugmentConfig: hflip_prob must be a probability")


def iid_partition(m: int, n: int, seed: int) -> dict[int, list[int]]:
    """Uniform random disjoint split of [0, m) across clients 1..n.

    Deterministic shuffle by seed, then contiguous striping; client sizes
    differ by at most one (earlier clients take the remainder).
    """
    if n < 1:
        raise ConfigError("iid_partition: need at least one client")
    if m < n:
        raise ConfigError(f"iid_partition: {m} samples cannot cover {n} clients")
    order = derive_rng("partition", seed).permutation(m)
    base, extra = divmod(m, n)
    parts: dict[int, list[int]] = {}
    pos = 0
    for i in range(1, n + 1):
        size = base + (1 if i <= extra else 0)
        parts[i] = [int(v) for v in order[pos : pos + size]]
        pos += size
    return parts


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad, random crop back to original size, random horizontal flip.

    Operates on raw [0,1] pixels; normalization is applied separately so the
    padding value is a true zero.
    """
    c, h, w = image.shape
    p = cfg.pad
    if p > 0:
        padded = np.zeros((c, h + 2 * p, w + 2 * p))
        padded[:, p : p + h, p : p + w] = image
        oy = int(rng.integers(0, 2 * p + 1))
        ox = int(rng.integers(0, 2 * p + 1))
        image = padded[:, oy : oy + h, ox : ox + w]
    if rng.random() < cfg.hflip_prob:
        image = image[:, :, ::-1]
    return np.ascontiguousarray(image)


def augment_batch(
    images: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator,
    mean: np.ndarray, std: np.ndarray,
) -> np.ndarray:
    """Per-sample augmentation followed by per-channel normalization."""
    out = np.stack([augment(img, cfg, rng) for img in images])
    return (out - mean[None, :, None, None]) / std[None, :, None, None]


def synth_make(
    num_classes: int,
    per_class: int,
    input_shape: tuple[int, int, int] = (1, 16, 16),
    difficulty: float = 0.5,
    seed: int = 0,
) -> Dataset:
    """Class-conditional oriented gratings with difficulty-scaled jitter.

    Each class k has a fixed frequency/orientation pattern; difficulty 0
    yields identical noiseless samples per class, difficulty 1 adds strong
    per-sample phase jitter and pixel noise.
    """
    if num_classes < 2:
        raise ConfigError("synth_make: need at least 2 classes")
    if per_class < 1:
        raise ConfigError("synth_make: per_class must be positive")
    if not 0.0 <= difficulty <= 1.0:
        raise ConfigError("synth_make: difficulty must be in [0, 1]")
    c, h, w = input_shape
    rng = derive_rng("synth", seed, num_classes, per_class, input_shape, difficulty)
    yy, xx = np.meshgrid(np.linspace(0, 1, h, endpoint=False),
                         np.linspace(0, 1, w, endpoint=False), indexing="ij")
    m = num_classes * per_class
    images = np.empty((m, c, h, w))
    labels = np.repeat(np.arange(num_classes), per_class).astype(np.int64)
    phase_amp = 2.0 * np.pi * difficulty
    noise_sigma = 0.55 * difficulty
    for k in range(num_classes):
        freq = 1.5 + k
        theta = np.pi * k / num_classes
        proj = xx * np.cos(theta) + yy * np.sin(theta)
        for j in range(per_class):
            idx = k * per_class + j
            phase = rng.uniform(-phase_amp, phase_amp)
            pattern = 0.5 + 0.5 * np.cos(2 * np.pi * freq * proj + phase)
            sample = pattern[None, :, :] + rng.normal(0.0, noise_sigma, size=(c, h, w)) \
                if noise_sigma > 0 else np.broadcast_to(pattern, (c, h, w))
            images[idx] = np.clip(sample, 0.0, 1.0)
    return Dataset.from_arrays(f"synthetic-k{num_classes}-d{difficulty}", images, labels,
                               num_classes)


def read_cifar_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Parse one CIFAR binary batch file into (images, labels)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
        offset = (len(raw) // CIFAR_RECORD_BYTES) * CIFAR_RECORD_BYTES
        raise FormatError(
            f"{path}: truncated record at byte offset {offset} "
            f"(file length {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES})"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise FormatError(
            f"{path}: unknown label byte {labels[bad[0]]} at record {bad[0]} "
            f"(byte offset {bad[0] * CIFAR_RECORD_BYTES})"
        )
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def cifar10_load(path: str) -> tuple[Dataset, Dataset]:
    """Load CIFAR-10 train/test splits from a directory of binary batch files."""
    train_files = sorted(
        f for f in os.listdir(path) if f.startswith("data_batch") and f.endswith(".bin")
    )
    test_files = sorted(
        f for f in os.listdir(path) if f.startswith("test_batch") and f.endswith(".bin")
    )
    if not train_files:
        raise FormatError(f"{path}: no data_batch*.bin files found")
    parts = [read_cifar_file(os.path.join(path, f)) for f in train_files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    train = Dataset.from_arrays("cifar10-train", images, labels, 10)
    if test_files:
        ti, tl = read_cifar_file(os.path.join(path, test_files[0]))
        test = Dataset.from_arrays("cifar10-test", ti, tl, 10, train.mean, train.std)
    else:
        test = None
    return train, test
