"""Sender-side map encoding, bandwidth accounting, and the AWGN link.

The transmitted payload is a class-id grid; its normalized one-hot
encoding (unit peak) is what the channel corrupts and what the receiver
conditions on. Run-length coding of the grid exists only for the
bandwidth numbers; the noise is applied to the dense tensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import RngStream

__all__ = [
    "SemanticMap",
    "OneHotMap",
    "encode_map",
    "decode_map",
    "bandwidth_bits",
    "awgn",
    "measure_psnr",
    "save_map",
    "load_map",
    "PSNR_CAP_DB",
]

PSNR_CAP_DB = 200.0
PEAK = 1.0  # unit-peak normalization of the one-hot encoding


@dataclass
class SemanticMap:
    """Integer class grid with values in [0, num_classes)."""

    class_ids: np.ndarray  # (H, W) integer array
    num_classes: int

    def __post_init__(self):
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        if self.class_ids.ndim != 2:
            raise ValueError(f"class grid must be 2-d, got shape {self.class_ids.shape}")
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.class_ids.min() < 0 or self.class_ids.max() >= self.num_classes:
            raise ValueError(
                f"class ids must lie in [0, {self.num_classes}), found "
                f"[{self.class_ids.min()}, {self.class_ids.max()}]"
            )

    @property
    def height(self) -> int:
        return self.class_ids.shape[0]

    @property
    def width(self) -> int:
        return self.class_ids.shape[1]


@dataclass
class OneHotMap:
    """(C,H,W) float encoding; clean maps are 0/1 with unit column sums."""

    data: np.ndarray
    psnr_db: float | None = None  # None marks a clean (uncorrupted) map

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"one-hot map must be (C,H,W), got {self.data.shape}")

    @property
    def is_clean(self) -> bool:
        return self.psnr_db is None


def encode_map(sem: SemanticMap) -> OneHotMap:
    """Normalized one-hot encoding with peak value 1."""
    c = sem.num_classes
    flat = sem.class_ids.reshape(-1)
    onehot = np.zeros((c, flat.size), dtype=np.float32)
    onehot[flat, np.arange(flat.size)] = PEAK
    return OneHotMap(onehot.reshape(c, sem.height, sem.width))


def decode_map(onehot: OneHotMap, num_classes: int | None = None) -> SemanticMap:
    """Per-pixel argmax decoding; the inverse of encode_map on clean maps."""
    c = onehot.data.shape[0] if num_classes is None else num_classes
    ids = np.argmax(onehot.data, axis=0)
    return SemanticMap(ids, c)


RUN_LENGTH_BITS = 16


def bandwidth_bits(sem: SemanticMap) -> tuple[int, int]:
    """Run-length payload size over a row-major scan.

    Each run costs ceil(log2 C) bits for the class plus 16 bits for the
    length. Returns (compressed_bits, uncompressed_bits).
    """
    class_bits = max(1, math.ceil(math.log2(sem.num_classes)))
    flat = sem.class_ids.reshape(-1)
    # runs longer than the 16-bit length field split into multiple runs
    max_run = 2**RUN_LENGTH_BITS - 1
    run_starts = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], run_starts, [flat.size]])
    lengths = np.diff(bounds)
    runs = int(np.sum(np.ceil(lengths / max_run)))
    compressed = runs * (class_bits + RUN_LENGTH_BITS)
    uncompressed = flat.size * class_bits
    return compressed, uncompressed


def awgn(x: OneHotMap, psnr_db: float | None, stream: RngStream) -> OneHotMap:
    """Additive white Gaussian noise at a target peak SNR.

    sigma = PEAK * 10^(-psnr/20); a ``None`` level is the clean sentinel
    and returns the input unchanged.
    """
    if psnr_db is None:
        return OneHotMap(x.data.copy(), None)
    if psnr_db < 0:
        raise ValueError(f"psnr_db must be >= 0, got {psnr_db}")
    sigma = PEAK * 10.0 ** (-float(psnr_db) / 20.0)
    noise = stream.normal(x.data.shape)
    return OneHotMap(x.data + np.float32(sigma) * noise, float(psnr_db))


def measure_psnr(clean: np.ndarray | OneHotMap, noisy: np.ndarray | OneHotMap) -> float:
    """10 log10(PEAK^2 / MSE); capped at 200 dB for exact matches."""
    a = clean.data if isinstance(clean, OneHotMap) else np.asarray(clean, dtype=np.float32)
    b = noisy.data if isinstance(noisy, OneHotMap) else np.asarray(noisy, dtype=np.float32)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(PEAK**2 / mse), PSNR_CAP_DB)


# -- map files: plain text header + row-major ids ----------------------------


def save_map(path, sem: SemanticMap) -> None:
    with open(path, "w") as f:
        f.write(f"{sem.height} {sem.width} {sem.num_classes}\n")
        for row in sem.class_ids:
            f.write(" ".join(str(int(v)) for v in row))
            f.write("\n")


def load_map(path) -> SemanticMap:
    with open(path) as f:
        head = f.readline().split()
        if len(head) != 3:
            raise ValueError(f"{path}: bad map header {head}")
        h, w, c = (int(v) for v in head)
        ids = np.loadtxt(f, dtype=np.int64, ndmin=2)
    if ids.shape != (h, w):
        raise ValueError(f"{path}: grid shape {ids.shape} does not match header ({h}, {w})")
    return SemanticMap(ids, c)
