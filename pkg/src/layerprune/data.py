"""CIFAR-10 ingestion, augmentation, and deterministic subset sampling.

Reads the standard binary batch format: each record is 1 label byte followed
by 3072 pixel bytes (1024-byte R, G, B planes). A synthetic fixture writer
produces files with the identical layout so every test runs offline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError

TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILES = ["test_batch.bin"]
RECORDS_PER_FILE = 10_000
RECORD_BYTES = 3073
FILE_BYTES = RECORDS_PER_FILE * RECORD_BYTES  # 30,730,000
NUM_CLASSES = 10

# channel statistics of the CIFAR-10 training split (pixels scaled to [0,1])
CHANNEL_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
CHANNEL_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, 32, 32) uint8
    labels: np.ndarray  # (N,) int64 in [0, 10)
    split: str  # train | test
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def take(self, indices) -> "Dataset":
        prov = dict(self.provenance)
        return Dataset(self.images[indices], self.labels[indices], self.split, prov)


def _read_batch_file(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"dataset file missing: {path}")
    raw = path.read_bytes()
    if len(raw) != FILE_BYTES:
        raise DataFormatError(
            f"{path.name} is {len(raw)} bytes, expected {FILE_BYTES} "
            f"({RECORDS_PER_FILE} records of {RECORD_BYTES} bytes)"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(RECORDS_PER_FILE, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(RECORDS_PER_FILE, 3, 32, 32).copy()
    if labels.max() >= NUM_CLASSES:
        raise DataFormatError(f"{path.name} carries label {labels.max()} outside [0, {NUM_CLASSES})")
    return images, labels


def load_cifar10(directory) -> tuple[Dataset, Dataset]:
    """Load the six standard binary batch files from `directory`."""
    directory = Path(directory)
    parts = [_read_batch_file(directory / f) for f in TRAIN_FILES]
    train = Dataset(
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        "train",
        {"sources": TRAIN_FILES},
    )
    images, labels = _read_batch_file(directory / TEST_FILES[0])
    test = Dataset(images, labels, "test", {"sources": TEST_FILES})
    return train, test


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad 4, random 32x32 crop, horizontal flip with probability 0.5."""
    if image.shape != (3, 32, 32):
        raise DataFormatError(f"augment expects one 3x32x32 image, got {image.shape}")
    padded = np.pad(image, ((0, 0), (4, 4), (4, 4)))
    top, left = rng.integers(0, 9, size=2)
    out = padded[:, top : top + 32, left : left + 32]
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def normalize(images: np.ndarray) -> np.ndarray:
    """uint8 pixels -> float32, per-channel (x/255 - mean) / std."""
    x = images.astype(np.float32) / 255.0
    if x.ndim == 3:
        return (x - CHANNEL_MEAN[:, None, None]) / CHANNEL_STD[:, None, None]
    return (x - CHANNEL_MEAN[None, :, None, None]) / CHANNEL_STD[None, :, None, None]


def denormalize(x: np.ndarray) -> np.ndarray:
    """Inverse of normalize, back to uint8 (quantization is the only loss)."""
    if x.ndim == 3:
        pix = x * CHANNEL_STD[:, None, None] + CHANNEL_MEAN[:, None, None]
    else:
        pix = x * CHANNEL_STD[None, :, None, None] + CHANNEL_MEAN[None, :, None, None]
    return np.clip(np.rint(pix * 255.0), 0, 255).astype(np.uint8)


def subset(ds: Dataset, n: int, seed: int) -> Dataset:
    """Class-stratified deterministic sample of n items.

    Classes are interleaved in the output so any contiguous slice (the
    trainer's held-out tail in particular) stays balanced.
    """
    if n > len(ds):
        raise DataFormatError(f"subset of {n} requested from {len(ds)} items")
    rng = np.random.default_rng(seed)
    per_class = [np.flatnonzero(ds.labels == c) for c in range(NUM_CLASSES)]
    for idx in per_class:
        rng.shuffle(idx)
    base, extra = divmod(n, NUM_CLASSES)
    quota = [base + (1 if c < extra else 0) for c in range(NUM_CLASSES)]
    for c, q in enumerate(quota):
        if q > len(per_class[c]):
            raise DataFormatError(f"class {c} has only {len(per_class[c])} items, need {q}")
    picked = [per_class[c][: quota[c]] for c in range(NUM_CLASSES)]
    order = []
    for i in range(base + (1 if extra else 0)):
        for c in range(NUM_CLASSES):
            if i < quota[c]:
                order.append(picked[c][i])
    out = ds.take(np.array(order, dtype=np.int64))
    out.provenance["subset_seed"] = seed
    out.provenance["subset_n"] = n
    return out


def write_synthetic_cifar(directory, seed: int = 0, pattern_scale: float = 60.0,
                          noise_scale: float = 25.0) -> None:
    """Write a 10-class synthetic dataset in the exact CIFAR-10 binary layout.

    Each class is a fixed random pattern plus pixel noise, separable enough
    that a small net learns it quickly; used for network-free tests.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    patterns = rng.normal(128.0, pattern_scale, size=(NUM_CLASSES, 3, 32, 32))
    for name in TRAIN_FILES + TEST_FILES:
        labels = rng.integers(0, NUM_CLASSES, size=RECORDS_PER_FILE)
        noise = rng.normal(0.0, noise_scale, size=(RECORDS_PER_FILE, 3, 32, 32))
        images = np.clip(patterns[labels] + noise, 0, 255).astype(np.uint8)
        records = np.empty((RECORDS_PER_FILE, RECORD_BYTES), dtype=np.uint8)
        records[:, 0] = labels
        records[:, 1:] = images.reshape(RECORDS_PER_FILE, -1)
        (directory / name).write_bytes(records.tobytes())
