"""Datasets, CIFAR-10 binary codec, unit-range conversion and batching."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple, Union

import numpy as np

from . import cipher
from .cipher import EncryptionKey
from .errors import ConfigError, FormatError, InputError

CIFAR_RECORD = 3073
CIFAR_RECORDS_PER_FILE = 10000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
CROP_PAD = 4


@dataclass
class Dataset:
    """Stack of interleaved uint8 images (N x H x W x 3) with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise InputError(f"images must be N x H x W x 3, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise InputError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.split)


@dataclass
class Batch:
    x: np.ndarray          # float32 N x 3 x H x W in [0, 1]
    y: np.ndarray
    key: Optional[EncryptionKey] = None
    encrypted: bool = False
    index: int = 0


# -- CIFAR-10 binary ------------------------------------------------------------

def parse_cifar_bytes(buf: bytes, name: str = "<bytes>",
                      records: Optional[int] = CIFAR_RECORDS_PER_FILE) -> Tuple[np.ndarray, np.ndarray]:
    """Decode CIFAR-10 binary records: 1 label byte + 3072 planar RGB bytes."""
    if records is not None and len(buf) != records * CIFAR_RECORD:
        raise FormatError(f"{name}: size {len(buf)} bytes, expected {records * CIFAR_RECORD} "
                          f"(truncated or padded at offset {min(len(buf), records * CIFAR_RECORD)})")
    if len(buf) % CIFAR_RECORD:
        whole = len(buf) // CIFAR_RECORD
        raise FormatError(f"{name}: partial record at offset {whole * CIFAR_RECORD}")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"{name}: record {i} has label {labels[i]} (offset {i * CIFAR_RECORD})")
    images = raw[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def encode_cifar_bytes(dataset: Dataset) -> bytes:
    if dataset.images.shape[1:] != (32, 32, 3):
        raise InputError("CIFAR-10 layout needs 32 x 32 x 3 images")
    if len(dataset) and (dataset.labels.min() < 0 or dataset.labels.max() > 255):
        raise InputError("labels must fit in one byte")
    planar = dataset.images.transpose(0, 3, 1, 2).reshape(len(dataset), 3072)
    out = np.empty((len(dataset), CIFAR_RECORD), dtype=np.uint8)
    out[:, 0] = dataset.labels
    out[:, 1:] = planar
    return out.tobytes()


def load_cifar10(directory: Union[str, Path]) -> Tuple[Dataset, Dataset]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"CIFAR-10 directory not found: {directory}")
    images, labels = [], []
    for fname in CIFAR_TRAIN_FILES:
        path = directory / fname
        x, y = parse_cifar_bytes(path.read_bytes(), str(path))
        images.append(x)
        labels.append(y)
    train = Dataset(np.concatenate(images), np.concatenate(labels), "train")
    path = directory / CIFAR_TEST_FILE
    tx, ty = parse_cifar_bytes(path.read_bytes(), str(path))
    return train, Dataset(tx, ty, "test")


def export_cifar10(directory: Union[str, Path], train: Dataset, test: Dataset) -> None:
    """Write datasets in the CIFAR-10 binary layout (train split over five files)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    chunks = np.array_split(np.arange(len(train)), len(CIFAR_TRAIN_FILES))
    for fname, idx in zip(CIFAR_TRAIN_FILES, chunks):
        sub = Dataset(train.images[idx], train.labels[idx])
        (directory / fname).write_bytes(encode_cifar_bytes(sub))
    (directory / CIFAR_TEST_FILE).write_bytes(encode_cifar_bytes(test))


def load_cifar_dir_any(directory: Union[str, Path]) -> Tuple[Dataset, Dataset]:
    """Like :func:`load_cifar10` but tolerates files with any whole record count."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"data directory not found: {directory}")
    parts = [parse_cifar_bytes((directory / f).read_bytes(), f, records=None) for f in CIFAR_TRAIN_FILES]
    train = Dataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), "train")
    tx, ty = parse_cifar_bytes((directory / CIFAR_TEST_FILE).read_bytes(), CIFAR_TEST_FILE, records=None)
    return train, Dataset(tx, ty, "test")


# -- conversion -----------------------------------------------------------------

def to_unit(images: np.ndarray) -> np.ndarray:
    """uint8 H x W x 3 (or N x H x W x 3) -> float32 3 x H x W (or N x 3 x H x W)."""
    images = np.asarray(images, dtype=np.uint8)
    axes = (2, 0, 1) if images.ndim == 3 else (0, 3, 1, 2)
    return np.ascontiguousarray(images.transpose(axes).astype(np.float32) / np.float32(255.0))


def to_bytes(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_unit`: round half up, clamp to [0, 255]."""
    x = np.asarray(x)
    axes = (1, 2, 0) if x.ndim == 3 else (0, 2, 3, 1)
    scaled = np.floor(x.astype(np.float64) * 255.0 + 0.5)
    return np.ascontiguousarray(np.clip(scaled, 0, 255).astype(np.uint8).transpose(axes))


def encrypt_unit(x: np.ndarray, key: EncryptionKey) -> np.ndarray:
    """Encrypt a float N x 3 x H x W batch through the byte domain."""
    return to_unit(cipher.encrypt_image(to_bytes(x), key))


# -- augmentation -----------------------------------------------------------------

def augment_images(images: np.ndarray, rng) -> np.ndarray:
    """Random 4-pixel-padded crop then horizontal flip (p=0.5), per image.

    Works on any N x H x W x C array.  ``rng`` needs ``integers`` and
    ``random`` with the numpy Generator signatures.
    """
    n, h, w = images.shape[:3]
    offsets = rng.integers(0, 2 * CROP_PAD + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    padded = np.pad(images, ((0, 0), (CROP_PAD, CROP_PAD), (CROP_PAD, CROP_PAD), (0, 0)))
    out = np.empty_like(images)
    for i in range(n):
        dy, dx = int(offsets[i, 0]), int(offsets[i, 1])
        crop = padded[i, dy:dy + h, dx:dx + w]
        out[i] = crop[:, ::-1] if flips[i] else crop
    return out


def augment(batch: Batch, rng) -> Batch:
    """Augment a float batch (N x 3 x H x W); labels are untouched."""
    if batch.x.shape[2:] != (32, 32):
        raise InputError("augmentation expects 32 x 32 images")
    nhwc = batch.x.transpose(0, 2, 3, 1)
    out = augment_images(nhwc, rng).transpose(0, 3, 1, 2)
    return Batch(np.ascontiguousarray(out), batch.y.copy(), batch.key, batch.encrypted, batch.index)


# -- key policies -----------------------------------------------------------------

@dataclass(frozen=True)
class KeyPolicy:
    """How batches are encrypted: ``none``, ``fixed`` or ``per-batch-random``."""

    kind: str = "none"
    key: Optional[EncryptionKey] = None
    seed: int = 0
    block_size: int = cipher.DEFAULT_BLOCK_SIZE

    def __post_init__(self):
        if self.kind not in ("none", "fixed", "per-batch-random"):
            raise ConfigError(f"unknown key policy {self.kind!r}")
        if self.kind == "fixed" and self.key is None:
            raise ConfigError("fixed key policy needs a key")

    @classmethod
    def none(cls) -> "KeyPolicy":
        return cls("none")

    @classmethod
    def fixed(cls, key: EncryptionKey) -> "KeyPolicy":
        return cls("fixed", key=key, block_size=key.block_size)

    @classmethod
    def per_batch_random(cls, seed: int, block_size: int = cipher.DEFAULT_BLOCK_SIZE) -> "KeyPolicy":
        return cls("per-batch-random", seed=seed, block_size=block_size)

    def key_for_batch(self, index: int) -> Optional[EncryptionKey]:
        if self.kind == "none":
            return None
        if self.kind == "fixed":
            return self.key
        return cipher.generate_key(self.seed ^ index, self.block_size)

    def reseeded(self, seed: int) -> "KeyPolicy":
        if self.kind != "per-batch-random":
            return self
        return KeyPolicy("per-batch-random", seed=seed, block_size=self.block_size)


def batches(dataset: Dataset, batch_size: int, shuffle_seed: Optional[int] = None,
            encrypt_with: Optional[KeyPolicy] = None, augment_rng=None,
            encrypt: bool = True, index_offset: int = 0) -> Iterator[Batch]:
    """Yield batches in seeded shuffle order (no shuffle when the seed is None).

    Byte images are augmented, then encrypted under the policy's key for that
    batch index (``index_offset + position``), then scaled to [0, 1].  With ``encrypt=False`` the clean
    batch is returned but ``Batch.key`` still names the key the caller
    should apply.
    """
    if batch_size < 1:
        raise ConfigError("batch size must be >= 1")
    policy = encrypt_with or KeyPolicy.none()
    order = np.arange(len(dataset))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(dataset))
    for b, start in enumerate(range(0, len(order), batch_size)):
        idx = order[start:start + batch_size]
        imgs = dataset.images[idx]
        if augment_rng is not None:
            imgs = augment_images(imgs, augment_rng)
        key = policy.key_for_batch(index_offset + b)
        if key is not None and encrypt:
            imgs = cipher.encrypt_image(imgs, key)
        yield Batch(to_unit(imgs), dataset.labels[idx], key, key is not None and encrypt, index_offset + b)


# -- synthetic data -----------------------------------------------------------------

SYNTH_GRID = 4
SYNTH_NOISE = 0.06
SYNTH_JITTER = 0.08


def class_templates(classes: int, seed: int = 0, size: int = 32) -> np.ndarray:
    """One coarse colour-tile template per class, float32 classes x H x W x 3."""
    rng = np.random.default_rng([seed, 0x5EED])
    tiles = rng.uniform(0.2, 0.8, size=(classes, SYNTH_GRID, SYNTH_GRID, 3))
    rep = size // SYNTH_GRID
    return np.repeat(np.repeat(tiles, rep, axis=1), rep, axis=2).astype(np.float32)


def synthetic_dataset(seed: int, n: int, classes: int = 10, split: str = "train",
                      template_seed: int = 0) -> Dataset:
    """Balanced class-conditional tile images with brightness jitter and noise.

    Templates depend only on ``template_seed`` so train and test splits drawn
    with different ``seed`` values share class definitions.
    """
    if n < classes:
        raise InputError(f"need n >= classes, got n={n}, classes={classes}")
    rng = np.random.default_rng([seed, 1 if split == "train" else 2])
    templates = class_templates(classes, template_seed)
    labels = np.arange(n) % classes
    labels = labels[rng.permutation(n)]
    shift = rng.uniform(-SYNTH_JITTER, SYNTH_JITTER, size=(n, 1, 1, 3))
    noise = rng.normal(0.0, SYNTH_NOISE, size=(n, 32, 32, 3))
    x = np.clip(templates[labels] + shift + noise, 0.0, 1.0)
    return Dataset(np.floor(x * 255.0 + 0.5).astype(np.uint8), labels, split)
