"""On-disk dataset layout.

    <root>/csi.txt          CSI stream (see :mod:`ckd.data.csi`)
    <root>/frames/NNNNN.fmap float maps: header "P7F C H W\\n" + little-endian float64
    <root>/frames.csv       "#frames W H" header, then frame_index,epoch_ms
    <root>/poses.json       AlphaPose-format keypoints (pixel units)
    <root>/labels.csv       frame_index,class
    <root>/pairs.csv        frame_index,csi_row,lag_ms
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..pam import PoseAnnotation, encode_coords, parse_alphapose_json, to_alphapose_json
from .csi import CsiSample, DataFormatError, magnitude_normalize, parse_csi_file, serialize_csi
from .sync import FrameRecord

_FMAP_MAGIC = b"P7F"


def write_float_map(path: str | os.PathLike, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f8")
    if arr.ndim != 3:
        raise DataFormatError(f"float map must be [C, H, W], got {arr.shape}")
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"%s %d %d %d\n" % (_FMAP_MAGIC, c, h, w))
        fh.write(arr.tobytes(order="C"))


def read_float_map(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\n")
    parts = head.split()
    if not sep or len(parts) != 4 or parts[0] != _FMAP_MAGIC:
        raise DataFormatError(f"{path}: not a float map")
    c, h, w = (int(p) for p in parts[1:])
    if len(body) != 8 * c * h * w:
        raise DataFormatError(f"{path}: expected {8 * c * h * w} data bytes, got {len(body)}")
    return np.frombuffer(body, dtype="<f8").reshape(c, h, w).astype(np.float64)


def write_frame_sidecar(path, frames: list[FrameRecord], width: int, height: int) -> None:
    lines = [f"#frames {width} {height}"] + [f"{f.frame_index},{f.timestamp}" for f in frames]
    Path(path).write_text("\n".join(lines) + "\n")


def read_frame_sidecar(path) -> tuple[list[tuple[int, int]], int, int]:
    """Returns ``([(frame_index, epoch_ms), ...], width, height)``."""
    lines = Path(path).read_text().splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 3 or head[0] != "#frames":
        raise DataFormatError(f"{path}: missing '#frames W H' header")
    rows = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise DataFormatError(f"{path} line {n}: expected frame_index,epoch_ms")
        rows.append((int(parts[0]), int(parts[1])))
    return rows, int(head[1]), int(head[2])


def _read_csv_ints(path, ncols: int) -> list[tuple[int, ...]]:
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#") or line[0].isalpha():
            continue
        parts = line.split(",")
        if len(parts) != ncols:
            raise DataFormatError(f"{path} line {n}: expected {ncols} columns")
        rows.append(tuple(int(p) for p in parts))
    return rows


def write_pairs(path, rows: list[tuple[int, int, int]]) -> None:
    text = "frame_index,csi_row,lag_ms\n" + "".join(f"{a},{b},{c}\n" for a, b, c in rows)
    Path(path).write_text(text)


def read_pairs(path) -> list[tuple[int, int, int]]:
    return _read_csv_ints(path, 3)


def save_dataset(root, frames: list[FrameRecord], csi: list[CsiSample], pair_rows: list[tuple[int, int, int]]) -> None:
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    _, h, w = frames[0].frame.shape
    (root / "csi.txt").write_text(serialize_csi(csi))
    for f in frames:
        write_float_map(root / "frames" / f"{f.frame_index:05d}.fmap", f.frame)
    write_frame_sidecar(root / "frames.csv", frames, w, h)
    (root / "poses.json").write_text(to_alphapose_json([f.pose for f in frames], w, h))
    (root / "labels.csv").write_text("frame_index,class\n" + "".join(f"{f.frame_index},{f.class_label}\n" for f in frames))
    write_pairs(root / "pairs.csv", pair_rows)


@dataclass
class CrossModalData:
    """Aligned, training-ready arrays (one row per synchronized pair)."""

    csi: np.ndarray  # [n, S, TX, RX] standardized magnitudes
    frames: np.ndarray  # [n, 3, H, W]
    coords: np.ndarray  # [n, K, 2]
    labels: np.ndarray  # [n]
    frame_index: np.ndarray  # [n]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def pams(self) -> np.ndarray:
        return np.stack([encode_coords(c) for c in self.coords])

    def subset(self, ids) -> "CrossModalData":
        ids = np.asarray(list(ids), dtype=int)
        return CrossModalData(self.csi[ids], self.frames[ids], self.coords[ids], self.labels[ids], self.frame_index[ids])


def assemble(frames: list[FrameRecord], csi: list[CsiSample], pair_rows: list[tuple[int, int, int]]) -> CrossModalData:
    """Build arrays from pair rows; CSI magnitudes normalized over the paired samples."""
    if not pair_rows:
        raise DataFormatError("dataset has no synchronized pairs")
    by_index = {f.frame_index: f for f in frames}
    fr, cs = [], []
    for fi, row, _ in pair_rows:
        if fi not in by_index or not 0 <= row < len(csi):
            raise DataFormatError(f"pair ({fi}, {row}) refers to a missing frame or CSI row")
        fr.append(by_index[fi])
        cs.append(csi[row])
    if any(f.pose is None or f.class_label is None for f in fr):
        raise DataFormatError("every paired frame needs a pose and a class label")
    return CrossModalData(
        csi=np.stack(magnitude_normalize(cs)),
        frames=np.stack([f.frame for f in fr]),
        coords=np.stack([f.pose.coords for f in fr]),
        labels=np.array([f.class_label for f in fr], dtype=int),
        frame_index=np.array([f.frame_index for f in fr], dtype=int),
    )


def load_frames(root) -> list[FrameRecord]:
    root = Path(root)
    stamps, w, h = read_frame_sidecar(root / "frames.csv")
    ts = dict(stamps)
    poses = {p.frame_index: p for p in parse_alphapose_json((root / "poses.json").read_bytes(), w, h, timestamps=ts)}
    labels = dict(_read_csv_ints(root / "labels.csv", 2)) if (root / "labels.csv").exists() else {}
    frames = []
    for fi, t in stamps:
        pose = poses.get(fi)
        label = labels.get(fi)
        if pose is not None:
            pose = PoseAnnotation(pose.coords, pose.confidence, t, label, fi)
        frames.append(FrameRecord(t, read_float_map(root / "frames" / f"{fi:05d}.fmap"), pose, label, fi))
    return frames


def load_dataset(root, pairs_path=None) -> CrossModalData:
    root = Path(root)
    if not root.is_dir():
        raise DataFormatError(f"dataset directory {root} does not exist")
    csi = parse_csi_file((root / "csi.txt").read_bytes())
    frames = load_frames(root)
    rows = read_pairs(pairs_path or root / "pairs.csv")
    return assemble(frames, csi, rows)
