"""Seed derivation and counter-based uniform streams.

All randomness in the package comes from Philox streams keyed by a seed and
a path of integers (experiment, offset, ...). Because Philox is counter
based, row ``p`` of a fixed-width block can be regenerated on its own, which
is what lets a single pass be replayed without drawing the passes before it.
"""
from __future__ import annotations

import numpy as np
from numpy.random import Generator, Philox, SeedSequence

# Philox emits four 64-bit words per counter step
_WORDS_PER_STEP = 4


def derive_seed(seed: int, *path: int) -> int:
    return int(SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path)).generate_state(1, np.uint64)[0])


def philox_key(seed: int, *path: int) -> np.ndarray:
    return SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path)).generate_state(2, np.uint64)


def padded_width(width: int) -> int:
    return -(-width // _WORDS_PER_STEP) * _WORDS_PER_STEP


def uniform_rows(key: np.ndarray, first_row: int, rows: int, width: int) -> np.ndarray:
    """Rows ``first_row .. first_row+rows-1`` of the (infinite) uniform matrix for ``key``.

    Only the first ``width`` columns are returned; storage rows are padded to a
    multiple of four so each row starts on a counter boundary.
    """
    stride = padded_width(width)
    gen = Generator(Philox(key=key, counter=first_row * (stride // _WORDS_PER_STEP)))
    block = gen.random(rows * stride).reshape(rows, stride)
    return block[:, :width]


class ArrayDraws:
    """Feeds pre-drawn uniforms to the simulator in order."""

    def __init__(self, values):
        self._values = [float(v) for v in values]
        self.used = 0

    def next(self) -> float:
        try:
            value = self._values[self.used]
        except IndexError:
            raise RuntimeError("draw source exhausted") from None
        self.used += 1
        return value


class GeneratorDraws:
    """An unbounded uniform stream for a seed, drawn in fixed chunks."""

    _CHUNK = 64

    def __init__(self, seed: int, *path: int):
        self._gen = Generator(Philox(key=philox_key(seed, *path)))
        self._buf = np.empty(0)
        self._pos = 0
        self.used = 0

    def next(self) -> float:
        if self._pos == len(self._buf):
            self._buf = self._gen.random(self._CHUNK)
            self._pos = 0
        value = float(self._buf[self._pos])
        self._pos += 1
        self.used += 1
        return value
