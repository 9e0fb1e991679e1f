"""Shared helpers: named RNG substreams and small formatting utilities."""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, label: str) -> np.random.Generator:
    """Independent generator derived from (seed, label).

    Component streams must not interact: adding or removing one consumer
    (e.g. an optional model head) must leave every other stream's draws
    unchanged. crc32 keys the label so the mapping is stable across runs
    and platforms.
    """
    key = zlib.crc32(label.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(key,))))


def format_float(x: float, places: int = 1) -> str:
    return f"{x:.{places}f}"
