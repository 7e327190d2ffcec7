"""Seeded, splittable random streams.

Every source of randomness in the pipeline (weight init, training noise,
channel noise, samplers) owns a named stream. Streams are counter-based:
each draw derives a fresh Philox key from (seed, stream id, counter), so a
stream can be re-opened at any counter and reproduce the same values, and
distinct stream ids never overlap regardless of draw order.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["RngStream"]


def _philox_key(seed: int, stream_id: str, counter: int) -> np.ndarray:
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little", signed=False))
    h.update(stream_id.encode("utf-8"))
    h.update(b"\x00")
    h.update(int(counter).to_bytes(16, "little", signed=False))
    raw = h.digest()
    return np.frombuffer(raw, dtype=np.uint64)


class RngStream:
    """One purpose-labelled random stream.

    Identical (seed, stream_id, counter) always reproduces identical draws;
    the counter advances by the number of elements drawn.
    """

    def __init__(self, seed: int, stream_id: str, counter: int = 0):
        if not (0 <= int(seed) < 2**64):
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.stream_id = str(stream_id)
        self.counter = int(counter)

    def split(self, label: str) -> "RngStream":
        """Child stream with an extended id; independent of the parent."""
        return RngStream(self.seed, f"{self.stream_id}/{label}")

    def _generator(self, n: int) -> np.random.Generator:
        key = _philox_key(self.seed, self.stream_id, self.counter)
        self.counter += int(n)
        return np.random.Generator(np.random.Philox(key=key))

    def normal(self, shape: tuple[int, ...] | list[int] = ()) -> np.ndarray:
        """I.i.d. standard-normal float32 array of the given shape."""
        shape = tuple(int(d) for d in shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        g = self._generator(n)
        out = g.standard_normal(size=shape, dtype=np.float32)
        return out

    def uniform(self, low: float, high: float, shape: tuple[int, ...] | list[int] = ()) -> np.ndarray:
        shape = tuple(int(d) for d in shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        g = self._generator(n)
        return g.uniform(low, high, size=shape).astype(np.float32)

    def integers(self, low: int, high: int, shape: tuple[int, ...] | list[int] = ()) -> np.ndarray:
        """Uniform integers in [low, high)."""
        shape = tuple(int(d) for d in shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        g = self._generator(n)
        return g.integers(low, high, size=shape, dtype=np.int64)

    def permutation(self, n: int) -> np.ndarray:
        g = self._generator(n)
        return g.permutation(int(n))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id!r}, counter={self.counter})"
