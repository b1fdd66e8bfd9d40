"""Procedural 8-class image corpus and its binary file format.

Each 32x32 grayscale image is one dominant primitive at full contrast plus a
faint distractor primitive (weight 0.25) and Gaussian pixel noise
(sigma 0.05), clipped to [0, 1]. The label is the dominant primitive:

    0 horizontal stripes   sinusoid along y, period 4..10 px, random phase
    1 vertical stripes     sinusoid along x, period 4..10 px, random phase
    2 checker              cell 4..8 px, random offset, levels 0.2 / 0.8
    3 radial gradient      1 - r / r_max around a random centre (bright core)
    4 linear gradient      ramp 0..1 along a random angle
    5 blob cluster         3..5 Gaussian blobs (sigma 1.5..3, peak 0.9) on black
    6 corner square        side 8..14 px, level 0.85, in a random corner, bg 0.1
    7 ring                 annulus radius 6..12 px, width 2..3 px, level 0.9
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CLASSES = 8
SIZE = 32
NOISE = 0.05
DISTRACTOR = 0.25
MAGIC = b"SNDT"
VERSION = 1


class FormatError(ValueError):
    pass


@dataclass
class SynthDataset:
    images: np.ndarray  # (M, 1, 32, 32) float32
    labels: np.ndarray  # (M,) int64
    seed: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> SynthDataset:
        return SynthDataset(self.images[idx], self.labels[idx], self.seed)


_yy, _xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)


def _primitive(kind: int, rng: np.random.Generator) -> np.ndarray:
    if kind in (0, 1):
        period = rng.uniform(4, 10)
        coord = _yy if kind == 0 else _xx
        return 0.5 + 0.5 * np.sin(2 * np.pi * coord / period + rng.uniform(0, 2 * np.pi))
    if kind == 2:
        cell = int(rng.integers(4, 9))
        oy, ox = rng.integers(0, cell, size=2)
        parity = (((_yy + oy) // cell) + ((_xx + ox) // cell)) % 2
        return np.where(parity == 0, 0.2, 0.8)
    if kind == 3:
        cy, cx = rng.uniform(8, 24, size=2)
        r = np.hypot(_yy - cy, _xx - cx)
        return np.clip(1.0 - r / rng.uniform(14, 22), 0.0, 1.0)
    if kind == 4:
        theta = rng.uniform(0, 2 * np.pi)
        proj = np.cos(theta) * _xx + np.sin(theta) * _yy
        return (proj - proj.min()) / (proj.max() - proj.min())
    if kind == 5:
        img = np.zeros((SIZE, SIZE))
        for _ in range(int(rng.integers(3, 6))):
            cy, cx = rng.uniform(3, 29, size=2)
            s = rng.uniform(1.5, 3.0)
            img += 0.9 * np.exp(-((_yy - cy) ** 2 + (_xx - cx) ** 2) / (2 * s * s))
        return np.clip(img, 0.0, 1.0)
    if kind == 6:
        side = int(rng.integers(8, 15))
        img = np.full((SIZE, SIZE), 0.1)
        corner = int(rng.integers(0, 4))
        ys = slice(0, side) if corner < 2 else slice(SIZE - side, SIZE)
        xs = slice(0, side) if corner % 2 == 0 else slice(SIZE - side, SIZE)
        img[ys, xs] = 0.85
        return img
    if kind == 7:
        cy, cx = rng.uniform(12, 20, size=2)
        radius, width = rng.uniform(6, 12), rng.uniform(2, 3)
        r = np.hypot(_yy - cy, _xx - cx)
        return np.where(np.abs(r - radius) <= width / 2, 0.9, 0.0)
    raise ValueError(f"unknown primitive {kind}")


def render(label: int, rng: np.random.Generator) -> np.ndarray:
    img = _primitive(label, rng)
    other = (label + 1 + int(rng.integers(0, CLASSES - 1))) % CLASSES
    img = (img + DISTRACTOR * _primitive(other, rng)) / (1.0 + DISTRACTOR)
    img = img + rng.normal(0.0, NOISE, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate(seed: int, count: int) -> SynthDataset:
    """Stratified dataset: labels cycle through the classes, then get shuffled."""
    if count < CLASSES:
        raise ValueError(f"count must be at least {CLASSES}")
    labels = np.arange(count) % CLASSES
    labels = labels[np.random.default_rng([seed, 0]).permutation(count)]
    images = np.empty((count, 1, SIZE, SIZE), np.float32)
    for i, lab in enumerate(labels):
        images[i, 0] = render(int(lab), np.random.default_rng([seed, 1, i]))
    return SynthDataset(images, labels.astype(np.int64), seed)


# -- file format -------------------------------------------------------------
# magic "SNDT" | version u32 | count u64 | rank u32 | dims u64*rank
# | images f32 LE | labels u16 LE | seed i64


def save(dataset: SynthDataset, path) -> None:
    imgs = np.ascontiguousarray(dataset.images, dtype="<f4")
    header = MAGIC + struct.pack("<IQI", VERSION, len(dataset), imgs.ndim)
    header += struct.pack(f"<{imgs.ndim}Q", *imgs.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(imgs.tobytes())
        fh.write(np.asarray(dataset.labels, dtype="<u2").tobytes())
        fh.write(struct.pack("<q", int(dataset.seed)))


def _need(buf: bytes, offset: int, n: int, what: str) -> None:
    if offset + n > len(buf):
        raise FormatError(f"truncated dataset file: {what} needs bytes [{offset}, {offset + n}), file has {len(buf)}")


def load(path) -> SynthDataset:
    buf = Path(path).read_bytes()
    _need(buf, 0, 4, "magic")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r} at byte 0, expected {MAGIC!r}")
    _need(buf, 4, 16, "header")
    version, count, rank = struct.unpack_from("<IQI", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    off = 20
    _need(buf, off, 8 * rank, "shape")
    shape = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    if not shape or shape[0] != count:
        raise FormatError(f"header count {count} disagrees with shape {shape}")
    n_img = int(np.prod(shape)) * 4
    _need(buf, off, n_img, "image payload")
    images = np.frombuffer(buf, dtype="<f4", count=n_img // 4, offset=off).reshape(shape).astype(np.float32)
    off += n_img
    _need(buf, off, 2 * count, "labels")
    labels = np.frombuffer(buf, dtype="<u2", count=count, offset=off).astype(np.int64)
    off += 2 * count
    _need(buf, off, 8, "seed")
    (seed,) = struct.unpack_from("<q", buf, off)
    off += 8
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after offset {off}")
    return SynthDataset(images, labels, seed)
