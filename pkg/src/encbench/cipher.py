"""Keyed block-wise learnable image encryption.

Every M x M block of an 8-bit RGB image is split into six 4-bit planes
(upper and lower nibble of each colour channel).  The key reverses a fixed
subset of nibble positions (v -> 15 - v), shuffles all 6*M*M positions with
one permutation and repacks consecutive plane pairs into bytes.  The same key
is applied to every block, so the transform is a bijection on blocks and an
adaptation network with M-strided first layer can learn through it.

Conventions:

* images are interleaved ``H x W x 3`` uint8 arrays;
* a nibble block is ``6 x M x M`` with plane ``2c`` = upper nibble and plane
  ``2c + 1`` = lower nibble of colour channel ``c``;
* nibble blocks are flattened channel-major, i.e. index
  ``plane * M * M + row * M + col``;
* the permutation is a gather: ``out[i] = in[perm[i]]``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionError, InputError, KeyFormatError, KeyLengthError, NonBijectiveError

DEFAULT_BLOCK_SIZE = 4
_SEED_LIMIT = 1 << 64


@dataclass(frozen=True, eq=False)
class EncryptionKey:
    block_size: int
    reversal_mask: np.ndarray
    permutation: np.ndarray
    seed: Optional[int] = None
    _inverse: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        m = int(self.block_size)
        if m < 1:
            raise InputError(f"block size must be >= 1, got {m}")
        mask = np.asarray(self.reversal_mask, dtype=bool).reshape(-1)
        perm = np.asarray(self.permutation, dtype=np.int64).reshape(-1)
        n = nibble_count(m)
        if mask.size != n:
            raise KeyLengthError(f"reversal mask has length {mask.size}, expected {n} for M={m}")
        if perm.size != n:
            raise KeyLengthError(f"permutation has length {perm.size}, expected {n} for M={m}")
        if not np.array_equal(np.sort(perm), np.arange(n)):
            raise NonBijectiveError("permutation is not a bijection over the nibble positions")
        mask.flags.writeable = False
        perm.flags.writeable = False
        inv = np.argsort(perm)
        inv.flags.writeable = False
        object.__setattr__(self, "block_size", m)
        object.__setattr__(self, "reversal_mask", mask)
        object.__setattr__(self, "permutation", perm)
        object.__setattr__(self, "_inverse", inv)

    @property
    def inverse_permutation(self) -> np.ndarray:
        return self._inverse

    @classmethod
    def identity(cls, block_size: int = DEFAULT_BLOCK_SIZE) -> "EncryptionKey":
        n = nibble_count(block_size)
        return cls(block_size, np.zeros(n, dtype=bool), np.arange(n))

    def is_identity(self) -> bool:
        return not self.reversal_mask.any() and np.array_equal(
            self.permutation, np.arange(self.permutation.size))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EncryptionKey):
            return NotImplemented
        return (self.block_size == other.block_size and self.seed == other.seed
                and np.array_equal(self.reversal_mask, other.reversal_mask)
                and np.array_equal(self.permutation, other.permutation))

    def __hash__(self) -> int:
        return hash((self.block_size, self.seed, self.permutation.tobytes(),
                     self.reversal_mask.tobytes()))


def nibble_count(block_size: int) -> int:
    return 6 * block_size * block_size


def generate_key(seed: int, block_size: int = DEFAULT_BLOCK_SIZE) -> EncryptionKey:
    """Draw a key deterministically from ``seed``.

    Mask bits are i.i.d. fair coins; the permutation is a Fisher-Yates
    shuffle, both taken from a PCG64 stream seeded with ``seed``.
    """
    if block_size < 1:
        raise InputError(f"block size must be >= 1, got {block_size}")
    seed = int(seed)
    if not 0 <= seed < _SEED_LIMIT:
        raise InputError("seed must be an unsigned 64-bit integer")
    rng = np.random.default_rng(seed)
    n = nibble_count(block_size)
    mask = rng.integers(0, 2, size=n).astype(bool)
    perm = rng.permutation(n)
    return EncryptionKey(block_size, mask, perm, seed)


# -- block level ------------------------------------------------------------

def split_block(block: np.ndarray) -> np.ndarray:
    """M x M x 3 bytes -> 6 x M x M nibbles."""
    block = np.asarray(block, dtype=np.uint8)
    planes = block.transpose(2, 0, 1)
    out = np.empty((6,) + planes.shape[1:], dtype=np.uint8)
    out[0::2] = planes >> 4
    out[1::2] = planes & 0x0F
    return out


def merge_block(nibbles: np.ndarray) -> np.ndarray:
    """6 x M x M nibbles -> M x M x 3 bytes."""
    nibbles = np.asarray(nibbles, dtype=np.uint8)
    return ((nibbles[0::2] << 4) | nibbles[1::2]).transpose(1, 2, 0).copy()


def _check_block(block: np.ndarray, key: EncryptionKey) -> np.ndarray:
    block = np.asarray(block)
    m = key.block_size
    if block.shape != (m, m, 3):
        raise InputError(f"block shape {block.shape} does not match key block size {m} (want {m}x{m}x3)")
    return block.astype(np.uint8, copy=False)


def encrypt_block(block: np.ndarray, key: EncryptionKey) -> np.ndarray:
    return encrypt_image(_check_block(block, key), key)


def decrypt_block(block: np.ndarray, key: EncryptionKey) -> np.ndarray:
    return decrypt_image(_check_block(block, key), key)


# -- image level ------------------------------------------------------------

def _to_flat_nibbles(images: np.ndarray, m: int) -> np.ndarray:
    # N x H x W x 3 -> N x bh x bw x (6*M*M), channel-major within a block
    n, h, w, _ = images.shape
    blocks = images.reshape(n, h // m, m, w // m, m, 3).transpose(0, 1, 3, 5, 2, 4)
    nib = np.empty((n, h // m, w // m, 6, m, m), dtype=np.uint8)
    nib[:, :, :, 0::2] = blocks >> 4
    nib[:, :, :, 1::2] = blocks & 0x0F
    return nib.reshape(n, h // m, w // m, 6 * m * m)


def _from_flat_nibbles(flat: np.ndarray, m: int) -> np.ndarray:
    n, bh, bw, _ = flat.shape
    nib = flat.reshape(n, bh, bw, 6, m, m)
    planes = (nib[:, :, :, 0::2] << 4) | nib[:, :, :, 1::2]
    return np.ascontiguousarray(planes.transpose(0, 1, 4, 2, 5, 3).reshape(n, bh * m, bw * m, 3))


def _as_batch(images: np.ndarray, key: EncryptionKey):
    arr = np.asarray(images)
    if arr.dtype != np.uint8:
        raise InputError(f"cipher operates on uint8 images, got {arr.dtype}")
    single = arr.ndim == 3
    batch = arr[None] if single else arr
    if batch.ndim != 4 or batch.shape[-1] != 3:
        raise DimensionError(f"expected H x W x 3 or N x H x W x 3 image, got {arr.shape}")
    m = key.block_size
    h, w = batch.shape[1:3]
    if h % m or w % m:
        raise InputError(f"image size {h}x{w} is not divisible by block size {m}")
    return batch, single


def encrypt_image(images: np.ndarray, key: EncryptionKey) -> np.ndarray:
    """Encrypt one image (H x W x 3) or a stack (N x H x W x 3) of uint8 images."""
    batch, single = _as_batch(images, key)
    flat = _to_flat_nibbles(batch, key.block_size)
    flat = np.where(key.reversal_mask, 15 - flat, flat).astype(np.uint8)
    flat = flat[..., key.permutation]
    out = _from_flat_nibbles(flat, key.block_size)
    return out[0] if single else out


def decrypt_image(images: np.ndarray, key: EncryptionKey) -> np.ndarray:
    """Exact inverse of :func:`encrypt_image`."""
    batch, single = _as_batch(images, key)
    flat = _to_flat_nibbles(batch, key.block_size)
    flat = flat[..., key.inverse_permutation]
    flat = np.where(key.reversal_mask, 15 - flat, flat).astype(np.uint8)
    out = _from_flat_nibbles(flat, key.block_size)
    return out[0] if single else out


# -- key documents ------------------------------------------------------------

def serialize_key(key: EncryptionKey) -> bytes:
    doc = {
        "block_size": key.block_size,
        "seed": key.seed,
        "reversal_mask": [int(b) for b in key.reversal_mask],
        "permutation": [int(i) for i in key.permutation],
    }
    return json.dumps(doc, separators=(",", ":")).encode("utf-8")


def parse_key(raw) -> EncryptionKey:
    if isinstance(raw, (bytes, bytearray)):
        try:
            raw = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise KeyFormatError("key document is not UTF-8") from exc
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise KeyFormatError(f"key document is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise KeyFormatError("key document must be a JSON object")
    for name in ("block_size", "reversal_mask", "permutation"):
        if name not in doc:
            raise KeyFormatError(f"key document lacks field {name!r}")
    m, mask, perm, seed = doc["block_size"], doc["reversal_mask"], doc["permutation"], doc.get("seed")
    if not isinstance(m, int) or isinstance(m, bool) or m < 1:
        raise KeyFormatError(f"block_size must be a positive integer, got {m!r}")
    if seed is not None and (not isinstance(seed, int) or not 0 <= seed < _SEED_LIMIT):
        raise KeyFormatError(f"seed must be null or an unsigned 64-bit integer, got {seed!r}")
    if not isinstance(mask, list) or any(v not in (0, 1) or isinstance(v, float) for v in mask):
        raise KeyFormatError("reversal_mask must be an array of 0/1")
    if not isinstance(perm, list) or any(not isinstance(v, int) or isinstance(v, bool) for v in perm):
        raise KeyFormatError("permutation must be an array of integers")
    return EncryptionKey(m, np.array(mask, dtype=bool), np.array(perm, dtype=np.int64), seed)
