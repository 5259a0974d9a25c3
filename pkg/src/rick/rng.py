"""Named, independent random streams.

Every stochastic consumer gets its own counter-based Philox generator keyed
by (seed, stream name), so adding a consumer never shifts another stream.
"""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "shots", "init", "train", "eval", "ewc", "probe", "reinit", "dump", "embed")


def stream(seed: int, name: str) -> np.random.Generator:
    if name not in STREAMS:
        raise KeyError(f"unknown rng stream {name!r}")
    key = zlib.crc32(name.encode("ascii"))
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, key])
    return np.random.Generator(np.random.Philox(ss))
