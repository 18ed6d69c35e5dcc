"""Frame records and CSI-to-frame timestamp alignment."""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass

import numpy as np

from ..pam import PoseAnnotation
from .csi import CsiSample, DataFormatError

logger = logging.getLogger(__name__)


@dataclass
class FrameRecord:
    timestamp: int
    frame: np.ndarray  # [3, H, W] in [0, 1]
    pose: PoseAnnotation | None = None
    class_label: int | None = None
    frame_index: int | None = None

    def __post_init__(self) -> None:
        self.frame = np.asarray(self.frame, dtype=np.float64)
        if self.frame.ndim != 3:
            raise DataFormatError(f"frame must be [C, H, W], got {self.frame.shape}")
        if self.frame.size and (self.frame.min() < 0 or self.frame.max() > 1):
            raise DataFormatError("frame pixels must lie in [0, 1]")


@dataclass
class SyncedPair:
    frame: FrameRecord
    csi: CsiSample
    lag_ms: int  # csi.timestamp - frame.timestamp
    csi_row: int = -1


@dataclass
class SyncResult:
    pairs: list[SyncedPair]
    dropped: int


def _check_sorted(ts: list[int], what: str) -> None:
    if any(b < a for a, b in zip(ts, ts[1:])):
        raise DataFormatError(f"{what} timestamps must be sorted")


def match_timestamps(frame_ts: list[int], csi_ts: list[int], tolerance_ms: int) -> tuple[list[tuple[int, int]], int]:
    """Greedy nearest-neighbour alignment in frame order.

    Returns ``(frame_idx, csi_idx)`` pairs and the number of dropped frames.
    Each CSI sample is used at most once; ties go to the earlier sample.
    """
    if tolerance_ms < 0:
        raise ValueError("tolerance_ms must be >= 0")
    _check_sorted(frame_ts, "frame")
    _check_sorted(csi_ts, "CSI")
    used = np.zeros(len(csi_ts), dtype=bool)
    out = []
    dropped = 0
    for fi, t in enumerate(frame_ts):
        lo = bisect.bisect_left(csi_ts, t - tolerance_ms)
        hi = bisect.bisect_right(csi_ts, t + tolerance_ms)
        best = None
        for j in range(lo, hi):
            if used[j]:
                continue
            d = abs(csi_ts[j] - t)
            if best is None or d < best[0]:  # strict: keeps the earlier on ties
                best = (d, j)
        if best is None:
            dropped += 1
            continue
        used[best[1]] = True
        out.append((fi, best[1]))
    return out, dropped


def synchronize(frames: list[FrameRecord], csi: list[CsiSample], tolerance_ms: int) -> SyncResult:
    idx, dropped = match_timestamps([f.timestamp for f in frames], [c.timestamp for c in csi], tolerance_ms)
    pairs = [SyncedPair(frames[i], csi[j], csi[j].timestamp - frames[i].timestamp, j) for i, j in idx]
    if dropped:
        logger.info("synchronize: dropped %d of %d frames", dropped, len(frames))
    return SyncResult(pairs, dropped)
