"""CSI samples and the newline-delimited text interchange format.

A file starts with a header ``#csi S TX RX`` followed by one record per line::

    epoch_ms,re_0,im_0,re_1,im_1,...

with the complex tensor flattened in C order (subcarrier, TX, RX).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


class DataFormatError(ValueError):
    """Malformed data file or record."""


@dataclass
class CsiSample:
    timestamp: int
    csi: np.ndarray  # complex [S, TX, RX]

    def __post_init__(self) -> None:
        self.timestamp = int(self.timestamp)
        self.csi = np.asarray(self.csi, dtype=np.complex128)
        if self.csi.ndim != 3 or min(self.csi.shape) < 1:
            raise DataFormatError(f"CSI tensor must be [S, TX, RX] with all dims >= 1, got {self.csi.shape}")
        if not np.all(np.isfinite(self.csi)):
            raise DataFormatError(f"non-finite CSI at t={self.timestamp}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.csi.shape


def _parse_header(line: str) -> tuple[int, int, int]:
    parts = line.split()
    if len(parts) != 4 or parts[0] != "#csi":
        raise DataFormatError(f"line 1: expected header '#csi S TX RX', got {line.strip()!r}")
    try:
        dims = tuple(int(p) for p in parts[1:])
    except ValueError as exc:
        raise DataFormatError(f"line 1: bad header dims {parts[1:]}") from exc
    if min(dims) < 1:
        raise DataFormatError("line 1: header dims must be >= 1")
    return dims


def parse_csi_file(data: bytes | str) -> list[CsiSample]:
    """Parse CSI records, returning them ordered by timestamp.

    The sort is stable, so duplicate timestamps keep their input order.
    Out-of-order timestamps are counted and logged rather than rejected.
    """
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    lines = text.splitlines()
    if not any(ln.strip() for ln in lines):
        return []
    shape = _parse_header(lines[0])
    n = int(np.prod(shape))
    samples = []
    backwards = 0
    last = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 1 + 2 * n:
            raise DataFormatError(f"line {lineno}: expected {2 * n} floats after the timestamp, got {len(fields) - 1}")
        try:
            ts = int(fields[0])
            vals = np.array([float(v) for v in fields[1:]])
        except ValueError as exc:
            raise DataFormatError(f"line {lineno}: {exc}") from exc
        if last is not None and ts < last:
            backwards += 1
        last = ts
        try:
            samples.append(CsiSample(ts, (vals[0::2] + 1j * vals[1::2]).reshape(shape)))
        except DataFormatError as exc:
            raise DataFormatError(f"line {lineno}: {exc}") from exc
    if backwards:
        logger.warning("%d non-monotone CSI timestamps; records re-sorted", backwards)
    samples.sort(key=lambda s: s.timestamp)
    return samples


def serialize_csi(samples: list[CsiSample]) -> str:
    if not samples:
        return ""
    shape = samples[0].shape
    out = [f"#csi {shape[0]} {shape[1]} {shape[2]}"]
    for s in samples:
        if s.shape != shape:
            raise DataFormatError(f"mixed CSI shapes {shape} and {s.shape}")
        flat = s.csi.reshape(-1)
        inter = np.empty(2 * flat.size)
        inter[0::2] = flat.real
        inter[1::2] = flat.imag
        # repr round-trips float64 exactly
        out.append(",".join([str(s.timestamp)] + [repr(float(v)) for v in inter]))
    return "\n".join(out) + "\n"


def magnitude_normalize(samples: list[CsiSample], std_floor: float = 1e-8) -> list[np.ndarray]:
    """|csi| per sample, then one global mean/std standardization over the set."""
    if not samples:
        raise ValueError("magnitude_normalize needs at least one sample")
    mags = np.stack([np.abs(s.csi) for s in samples])
    mu = mags.mean()
    sd = max(float(mags.std()), std_floor)
    return list((mags - mu) / sd)
