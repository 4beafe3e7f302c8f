"""Seeded random streams with named, independent substreams."""

from __future__ import annotations

import zlib

import numpy as np

LABELS = ("dropedge", "gumbel", "gaussian", "init", "split", "features", "bernoulli", "readout", "noise", "sbm")


class RngStream:
    """A 64-bit seed from which labelled generators are derived.

    ``stream("gumbel")`` always returns a fresh generator positioned at draw 0,
    so the same (seed, label, draw index) reproduces the same value. Callers
    keep the returned generator for the lifetime of a run.
    """

    def __init__(self, seed: int = 0):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed

    def stream(self, label: str) -> np.random.Generator:
        key = zlib.crc32(label.encode("utf-8"))
        return np.random.default_rng([self.seed & 0xFFFFFFFF, self.seed >> 32, key])

    def child(self, index: int) -> "RngStream":
        """Independent stream for grid cell ``index``."""
        mixed = np.random.SeedSequence([self.seed & 0xFFFFFFFF, self.seed >> 32, int(index)]).generate_state(2, np.uint64)
        return RngStream(int(mixed[0]))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed})"


def as_generator(rng: "RngStream | np.random.Generator | int | None", label: str) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.stream(label)
    return RngStream(0 if rng is None else rng).stream(label)
