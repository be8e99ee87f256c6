"""Synthetic two-domain image data and IDX-format import.

Domains are procedural: each class is a sinusoidal grating with its own
orientation, frequency, phase, and per-channel gain, drawn from a stream
keyed by (seed, domain name), plus per-sample jitter and noise.  The same
(name, seed, n) always regenerates byte-identical arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import FormatError, InputError

NOISE_STD = 0.08
VAL_FRACTION = 0.2

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Split:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


@dataclass
class Dataset:
    images: np.ndarray   # [n, channels, H, W] float32 in [0, 1]
    labels: np.ndarray   # [n] int64
    num_classes: int
    name: str
    seed: int
    train_idx: np.ndarray
    val_idx: np.ndarray

    def __len__(self):
        return len(self.labels)

    def train_split(self) -> Split:
        return Split(self.images[self.train_idx], self.labels[self.train_idx])

    def val_split(self) -> Split:
        return Split(self.images[self.val_idx], self.labels[self.val_idx])


def _split_indices(n: int, seed: int, name: str):
    perm = rng.generator(rng.derive_seed(seed, "split", name)).permutation(n)
    n_val = max(1, int(n * VAL_FRACTION))
    return perm[n_val:].copy(), perm[:n_val].copy()


def gen_domain(name: str, seed: int, num_classes: int, n: int, image_size: int,
               channels: int = 3) -> Dataset:
    if num_classes < 2:
        raise InputError(f"a domain needs >= 2 classes, got {num_classes}")
    if n < num_classes:
        raise InputError(f"n={n} cannot cover {num_classes} classes")
    if image_size < 1 or channels < 1:
        raise InputError(f"bad image dimensions {channels}x{image_size}x{image_size}")

    g = rng.generator(rng.derive_seed(seed, "domain", name))
    # class recipes, all from the domain stream so different names give different tasks
    theta = np.pi * (np.arange(num_classes) + g.uniform(0, 1)) / num_classes
    freq = g.uniform(2.0, 6.0, size=num_classes)
    phase = g.uniform(0, 2 * np.pi, size=num_classes)
    gain = g.uniform(0.3, 1.0, size=(num_classes, channels))

    labels = (np.arange(n) % num_classes).astype(np.int64)
    phase_jit = g.uniform(-0.3, 0.3, size=n)
    amp = 0.35 * (1.0 + 0.2 * g.uniform(-1, 1, size=n))
    noise = g.normal(0, NOISE_STD, size=(n, channels, image_size, image_size))

    coords = (np.arange(image_size) + 0.5) / image_size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    proj = (np.cos(theta)[:, None, None] * xx[None] +
            np.sin(theta)[:, None, None] * yy[None])          # [num_classes, H, W]
    base = np.sin(2 * np.pi * freq[labels, None, None] * proj[labels]
                  + phase[labels, None, None] + phase_jit[:, None, None])  # [n, H, W]
    imgs = 0.5 + amp[:, None, None, None] * gain[labels][:, :, None, None] * base[:, None] + noise
    images = np.clip(imgs, 0.0, 1.0).astype(np.float32)

    train_idx, val_idx = _split_indices(n, seed, name)
    return Dataset(images=images, labels=labels, num_classes=num_classes,
                   name=name, seed=seed, train_idx=train_idx, val_idx=val_idx)


# ---------------------------------------------------------------------------
# IDX import (big-endian, the classic handwritten-digit file layout)


def _read_idx(path: str, magic_expected: int):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != magic_expected:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{magic_expected:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension table")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise FormatError(f"{path}: payload holds {len(raw) - header} bytes, needs {count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx_images(path: str) -> np.ndarray:
    """[n, H, W] u8 file -> [n, 1, H, W] float32 in [0, 1]."""
    arr = _read_idx(path, IDX_IMAGES_MAGIC)
    return (arr.astype(np.float32) / 255.0)[:, None, :, :]


def load_idx_labels(path: str) -> np.ndarray:
    return _read_idx(path, IDX_LABELS_MAGIC).astype(np.int64)


def dataset_from_idx(images_path: str, labels_path: str, name: str, seed: int) -> Dataset:
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if len(images) != len(labels):
        raise InputError(f"{len(images)} images but {len(labels)} labels")
    if len(labels) == 0:
        raise InputError("empty IDX dataset")
    num_classes = int(labels.max()) + 1
    train_idx, val_idx = _split_indices(len(labels), seed, name)
    return Dataset(images=images, labels=labels, num_classes=num_classes,
                   name=name, seed=seed, train_idx=train_idx, val_idx=val_idx)
