"""Per-subsystem seeds derived from one root seed and a fixed label."""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(root: int, label: str) -> int:
    ss = np.random.SeedSequence([int(root), zlib.crc32(label.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_for(root: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, label))
