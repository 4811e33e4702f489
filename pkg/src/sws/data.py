"""Datasets: a deterministic synthetic task, an IDX loader, splits, batches.

The synthetic task assigns sample t the label t mod K and renders a 2-d
sinusoid whose row/column frequencies are functions of the class, plus
bounded per-pixel noise from a SplitMix64 stream seeded with (seed XOR t).
The exact construction is part of the package contract: two runs (or two
implementations following the same recipe) must produce bit-identical
integer noise streams, so generation never touches a library RNG.

Content hashing uses 64-bit FNV-1a over the raw image bytes (float32,
little-endian, C order) followed by the labels as little-endian uint32.
The hash keys cached teacher logits to the dataset they were computed on.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .rng import GAMMA, MASK64, SplitMix64, _finalize64_np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


class DataError(ValueError):
    pass


class IdxFormatError(DataError):
    pass


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & MASK64
    return h


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    source: str
    _hash: int | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.float32:
            raise DataError(f"images must be float32 (N,C,H,W), got {self.images.dtype} {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError(f"labels shape {self.labels.shape} does not match {self.images.shape[0]} images")
        if self.images.shape[0] == 0:
            raise DataError("empty dataset")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def content_hash(self) -> int:
        if self._hash is None:
            img = np.ascontiguousarray(self.images)
            if img.dtype.byteorder == ">":
                img = img.astype("<f4")
            lab = self.labels.astype("<u4")
            self._hash = fnv1a64(img.tobytes() + lab.tobytes())
        return self._hash


# ---- synthetic task ----------------------------------------------------------


def make_synthetic(n: int, classes: int, size: int, seed: int) -> Dataset:
    """n single-channel size x size images; sample t gets label t mod classes.

    pixel(i, j) = 0.5 + 0.35 sin(2 pi ((1+c) i + (1 + (3c mod K)) j) / S)
                  + 0.15 u,   clamped to [0, 1],
    where u in [-1, 1) comes from sample t's own SplitMix64 stream (seeded
    seed XOR t), one draw per pixel in row-major order, each 64-bit output
    mapped through its top 53 bits over 2**53.
    """
    if n < 1 or classes < 1 or size < 1:
        raise DataError(f"need n, classes, size >= 1, got {n}, {classes}, {size}")
    labels = np.arange(n, dtype=np.int64) % classes
    c = labels.astype(np.float64)
    freq_i = 1.0 + c
    freq_j = 1.0 + ((3 * labels) % classes).astype(np.float64)

    ii, jj = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    phase = (freq_i[:, None, None] * ii[None] + freq_j[:, None, None] * jj[None]) / size
    base = 0.5 + 0.35 * np.sin(2.0 * np.pi * phase)

    # Per-sample streams, all samples and pixels in one vectorized pass:
    # draw k of stream t is finalize((seed ^ t) + k * GAMMA), k = 1..S*S.
    seeds = np.uint64(seed & MASK64) ^ np.arange(n, dtype=np.uint64)
    ks = np.arange(1, size * size + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = _finalize64_np(seeds[:, None] + ks[None, :] * np.uint64(GAMMA))
    u = 2.0 * ((z >> np.uint64(11)).astype(np.float64) / float(1 << 53)) - 1.0
    u = u.reshape(n, size, size)

    images = np.clip(base + 0.15 * u, 0.0, 1.0).astype(np.float32)[:, None, :, :]
    return Dataset(images=images, labels=labels, num_classes=classes,
                   source=f"synthetic(n={n},classes={classes},size={size},seed={seed})")


# ---- IDX loading ----------------------------------------------------------------


def _read_idx_header(raw: bytes, path, magic_want: int, ndims: int) -> tuple[tuple[int, ...], int]:
    head = 4 + 4 * ndims
    if len(raw) < head:
        raise IdxFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != magic_want:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{magic_want:08x}")
    dims = struct.unpack(f">{ndims}I", raw[4:head])
    return dims, head


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label file pair, scaling pixels to [0, 1]."""
    with open(images_path, "rb") as fh:
        raw_img = fh.read()
    with open(labels_path, "rb") as fh:
        raw_lab = fh.read()

    (n, h, w), off = _read_idx_header(raw_img, images_path, IDX_IMAGES_MAGIC, 3)
    if len(raw_img) != off + n * h * w:
        raise IdxFormatError(f"{images_path}: payload is {len(raw_img) - off} bytes, expected {n * h * w}")
    (n_lab,), lab_off = _read_idx_header(raw_lab, labels_path, IDX_LABELS_MAGIC, 1)
    if len(raw_lab) != lab_off + n_lab:
        raise IdxFormatError(f"{labels_path}: payload is {len(raw_lab) - lab_off} bytes, expected {n_lab}")
    if n != n_lab:
        raise IdxFormatError(f"count mismatch: {n} images vs {n_lab} labels")

    images = np.frombuffer(raw_img, dtype=np.uint8, offset=off).reshape(n, 1, h, w).astype(np.float32) / 255.0
    labels = np.frombuffer(raw_lab, dtype=np.uint8, offset=lab_off).astype(np.int64)
    classes = int(labels.max()) + 1
    return Dataset(images=images, labels=labels, num_classes=classes,
                   source=f"idx({images_path},{labels_path})")


# ---- splits and batches ----------------------------------------------------------


def split(data: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded permutation, then a prefix/suffix split. Both sides non-empty."""
    if not (0.0 < train_fraction < 1.0):
        raise DataError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(data)
    k = int(n * train_fraction)
    if k < 1 or n - k < 1:
        raise DataError(f"split of {n} samples at {train_fraction} leaves an empty side")
    perm = SplitMix64(seed).permutation(n)
    tr, va = perm[:k], perm[k:]

    def take(idx: np.ndarray, tag: str) -> Dataset:
        return Dataset(images=np.ascontiguousarray(data.images[idx]),
                       labels=np.ascontiguousarray(data.labels[idx]),
                       num_classes=data.num_classes,
                       source=f"{data.source}/{tag}")

    return take(tr, "train"), take(va, "val")


def batch_iter(data: Dataset, batch_size: int, shuffle_seed: int | None = None):
    """Yield (images, labels, indices) batches; the last one may be short.

    Without a seed the dataset order is kept; with one, a SplitMix64
    permutation of that seed decides the order.
    """
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    n = len(data)
    order = np.arange(n, dtype=np.int64) if shuffle_seed is None else SplitMix64(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield data.images[idx], data.labels[idx], idx
