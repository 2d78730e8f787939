"""Portable random streams.

Every random draw in the package comes from ``numpy.random.Philox`` (a
64-bit counter-based generator) keyed through ``numpy.random.SeedSequence``
on the entropy tuple ``(seed, *stream)``. String stream components are
mapped to integers with CRC-32 of their UTF-8 bytes, so a stream such as
``make_rng(3, "task-data", "task-a", "eval")`` is reproducible from its
description alone.
"""
from __future__ import annotations

import zlib

import numpy as np


def stream_key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    part = int(part)
    if part < 0:
        raise ValueError(f"stream components must be non-negative, got {part}")
    return part


def make_rng(seed: int, *stream) -> np.random.Generator:
    ss = np.random.SeedSequence([stream_key(seed), *(stream_key(p) for p in stream)])
    return np.random.Generator(np.random.Philox(ss))
