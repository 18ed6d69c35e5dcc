from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[int, ...]
    test: tuple[int, ...]
    seed: int

    def to_dict(self) -> dict:
        return {"seed": self.seed, "train": list(self.train), "test": list(self.test)}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(tuple(int(i) for i in d["train"]), tuple(int(i) for i in d["test"]), int(d["seed"]))


def split_dataset(pairs, ratio: float = 0.85, seed: int = 0) -> DatasetSplit:
    """Seeded shuffle of pair ids; the first floor(ratio * n) go to train.

    ``pairs`` may be a sequence or a pair count. With n = 1 the floor rule
    puts the single pair in test for any ratio < 1.
    """
    n = pairs if isinstance(pairs, int) else len(pairs)
    if n <= 0:
        raise ValueError("cannot split an empty dataset")
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    perm = np.random.default_rng(seed).permutation(n)
    k = math.floor(ratio * n)
    return DatasetSplit(tuple(int(i) for i in perm[:k]), tuple(int(i) for i in perm[k:]), seed)
