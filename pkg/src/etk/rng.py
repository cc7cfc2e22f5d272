"""Named, counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
``(seed, stream name, *indices)``, so a draw for timestep 17 does not depend on
whether timestep 16 was ever sampled.
"""

from __future__ import annotations

import zlib

import numpy as np

INVERSION = "inversion"
SDEDIT = "sdedit"
PC_INIT = "pc-init"
EVAL_FEATURES = "eval-features"
MC_ORACLE = "mc-oracle"
# source signals and reference sets drawn from a prior
SOURCES = "sources"


def _stream_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for the sub-stream ``name`` at ``keys``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    spawn_key = (_stream_id(name),) + tuple(int(k) for k in keys)
    ss = np.random.SeedSequence(int(seed), spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(ss))


def normal(seed: int, name: str, *keys: int, size) -> np.ndarray:
    return stream(seed, name, *keys).standard_normal(size)
