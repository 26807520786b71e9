"""Counter-based Gaussian sampling with explicit substream keys.

Every draw is produced by a Philox generator keyed by (seed, stream tag), so a
given (seed, tag, array position) always yields the same value, independent of
worker count or call order.  Tags encode the purpose of the stream (outer
sampling vs. nested window resampling) plus the window position and the
replication index, which keeps inner streams separated from the outer stream
even when the same seed is reused.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

TAG_OUTER = 0
TAG_INNER = 1
TAG_AUX = 2


def stream_tag(purpose: int, first_cell: int = 0, replication: int = 0) -> int:
    if replication < 0 or replication >= (1 << 32):
        raise ValueError("replication index out of range")
    return ((purpose & 0xFFFF) << 48) | ((first_cell & 0xFFFF) << 32) | replication


def normals(seed: int, tag: int, shape: tuple[int, ...]) -> np.ndarray:
    """Standard normal array from the Philox substream (seed, tag)."""
    key = np.array([seed & _MASK64, tag & _MASK64], dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key))
    return gen.standard_normal(shape)


def parse_seed(text: str) -> int:
    """Seeds on the CLI come as decimal or hex strings."""
    text = text.strip()
    base = 16 if text.lower().startswith("0x") else 10
    value = int(text, base)
    if value < 0:
        raise ValueError("seed must be non-negative")
    return value
