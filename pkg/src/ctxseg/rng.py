"""Seeded random streams.

A stream is identified by ``(seed, stream)``; both are 64-bit integers. The
generator is numpy's PCG64 keyed through ``SeedSequence`` so distinct stream
ids never overlap and the same pair always replays the same values.
"""
from __future__ import annotations

import hashlib

import numpy as np

RNG_ALGORITHM = "pcg64-seedseq-v1"
_MASK64 = (1 << 64) - 1


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=int(seed) & _MASK64, spawn_key=(int(stream) & _MASK64,))
    return np.random.Generator(np.random.PCG64(seq))


def stream_id(text: str) -> int:
    """Stable 64-bit stream id derived from a string (e.g. a label)."""
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def get_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def set_state(rng: np.random.Generator, state: dict) -> None:
    if state.get("bit_generator") != "PCG64":
        raise ValueError(f"unsupported generator state: {state.get('bit_generator')!r}")
    rng.bit_generator.state = state
