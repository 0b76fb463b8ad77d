"""Counter-based random streams.

Every stream is a Philox-4x64 generator keyed by ``(seed, stream_id)``, so the
draws of one stream never depend on which other streams exist or in what order
they are consumed. Batched samplers give each batch element its own stream
(``stream_id`` = element index) through :class:`ElementStreams`.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _key_word(k):
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k) & _MASK64


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id", "counter"):
            v = getattr(self, name)
            if not 0 <= v <= _MASK64:
                raise ValueError(f"{name} must fit in 64 bits, got {v}")

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        counter = np.array([self.counter, 0, 0, 0], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def stream(self, stream_id: int) -> "RngStream":
        """Sibling stream sharing this seed."""
        return RngStream(self.seed, stream_id)

    def child(self, *keys) -> "RngStream":
        """Independent stream derived from this one and a tuple of labels.

        Labels may be ints or strings; derivation goes through
        :class:`numpy.random.SeedSequence` so children never collide with
        their parent's element streams.
        """
        spawn_key = (self.stream_id,) + tuple(_key_word(k) for k in keys)
        ss = np.random.SeedSequence(self.seed, spawn_key=spawn_key)
        return RngStream(int(ss.generate_state(1, np.uint64)[0]), 0)


class ElementStreams:
    """One generator per batch element, stream ids ``0..n-1``.

    Normal draws are pre-fetched per element in chunks of steps; the values each
    element sees are identical to drawing them one step at a time.
    """

    def __init__(self, rng: RngStream, n: int, chunk: int | None = None):
        if n < 1:
            raise ValueError("need at least one element")
        self.n = n
        self._gens = [rng.stream(i).generator() for i in range(n)]
        self._chunk = chunk
        self._buf = None
        self._pos = 0

    def uniform(self, shape, low=-1.0, high=1.0, dtype=np.float64):
        """Draw ``[n, *shape]`` uniforms, element i from stream i."""
        if self._buf is not None:
            raise RuntimeError("uniform draws must precede buffered normal draws")
        out = np.empty((self.n,) + tuple(shape), dtype=np.float64)
        for i, g in enumerate(self._gens):
            out[i] = g.uniform(low, high, size=shape)
        return out.astype(dtype, copy=False)

    def normal(self, shape, dtype=np.float64):
        """Draw ``[n, *shape]`` standard normals, element i from stream i."""
        shape = tuple(shape)
        if self._buf is None or self._buf.shape[2:] != shape or self._pos >= self._buf.shape[0]:
            self._refill(shape)
        eps = self._buf[self._pos]
        self._pos += 1
        return eps.astype(dtype, copy=False)

    def _refill(self, shape):
        if self._buf is not None and self._buf.shape[2:] != shape and self._pos < self._buf.shape[0]:
            raise RuntimeError("normal draw shape changed mid-chunk")
        size = int(np.prod(shape)) * self.n
        chunk = self._chunk or max(1, min(1024, (1 << 21) // max(size, 1)))
        buf = np.empty((chunk, self.n) + shape)
        for i, g in enumerate(self._gens):
            buf[:, i] = g.standard_normal((chunk,) + shape)
        self._buf = buf
        self._pos = 0
