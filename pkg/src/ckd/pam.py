"""Pose keypoints and the pose adjacency matrix (PAM).

A PAM is a ``[2, K, K]`` array. Channel 0 holds x relations and channel 1 y
relations: the diagonal carries the keypoint coordinate itself and entry
``[c, i, j]`` the difference ``coord_c(i) - coord_c(j)``.

Keypoint order follows the 18-point OpenPose/COCO layout produced by AlphaPose
in its 18-keypoint configuration.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

NUM_KEYPOINTS = 18

KEYPOINT_NAMES = (
    "nose", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
    "r_eye", "l_eye", "r_ear", "l_ear",
)  # fmt: skip

SKELETON = (
    (0, 1), (1, 2), (2, 3), (3, 4), (1, 5), (5, 6), (6, 7),
    (1, 8), (8, 9), (9, 10), (1, 11), (11, 12), (12, 13),
    (0, 14), (14, 16), (0, 15), (15, 17),
)  # fmt: skip

SHOULDERS = (2, 5)
HIPS = (8, 11)


class PoseFormatError(ValueError):
    """Malformed or out-of-range pose data."""


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    confidence: float = 1.0


@dataclass
class PoseAnnotation:
    """K keypoints in normalized image coordinates.

    ``coords`` is ``[K, 2]`` (x, y in [0, 1]) and ``confidence`` is ``[K]``.
    """

    coords: np.ndarray
    confidence: np.ndarray = None
    timestamp: int = 0
    class_label: int | None = None
    frame_index: int | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise PoseFormatError(f"coords must be [K, 2], got {self.coords.shape}")
        if self.confidence is None:
            self.confidence = np.ones(len(self.coords))
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if self.confidence.shape != (len(self.coords),):
            raise PoseFormatError(f"confidence must be [{len(self.coords)}], got {self.confidence.shape}")

    @property
    def K(self) -> int:
        return len(self.coords)

    @property
    def keypoints(self) -> list[Keypoint]:
        return [Keypoint(float(x), float(y), float(c)) for (x, y), c in zip(self.coords, self.confidence)]

    @classmethod
    def from_keypoints(cls, keypoints, **kw) -> "PoseAnnotation":
        kps = list(keypoints)
        return cls(np.array([[k.x, k.y] for k in kps]), np.array([k.confidence for k in kps]), **kw)


# -- PAM codec -------------------------------------------------------------------


def encode_pam(pose: PoseAnnotation) -> np.ndarray:
    c = pose.coords
    if np.any(c < 0) or np.any(c > 1) or not np.all(np.isfinite(c)):
        raise PoseFormatError("keypoint coordinates must lie in [0, 1]")
    return encode_coords(c)


def encode_coords(coords: np.ndarray) -> np.ndarray:
    """PAM of a ``[K, 2]`` coordinate array without range checking."""
    k = coords.shape[0]
    pam = coords.T[:, :, None] - coords.T[:, None, :]
    idx = np.arange(k)
    pam[:, idx, idx] = coords.T
    return pam


def pam_diagonal(pam: np.ndarray) -> np.ndarray:
    """Diagonal readout as ``[..., K, 2]`` coordinates (works on batches)."""
    return np.stack([np.diagonal(pam[..., 0, :, :], axis1=-2, axis2=-1),
                     np.diagonal(pam[..., 1, :, :], axis1=-2, axis2=-1)], axis=-1)


def decode_pam(pam: np.ndarray, timestamp: int = 0) -> PoseAnnotation:
    pam = np.asarray(pam, dtype=np.float64)
    if pam.ndim != 3 or pam.shape[0] != 2 or pam.shape[1] != pam.shape[2]:
        raise PoseFormatError(f"PAM must have shape [2, K, K], got {pam.shape}")
    coords = np.clip(pam_diagonal(pam), 0.0, 1.0)
    return PoseAnnotation(coords, np.ones(len(coords)), timestamp=timestamp)


def pam_consistency(pam: np.ndarray) -> float:
    """Mean |pam[c,i,j] - (pam[c,i,i] - pam[c,j,j])| over off-diagonal entries."""
    pam = np.asarray(pam, dtype=np.float64)
    k = pam.shape[-1]
    if k < 2:
        return 0.0
    diag = pam_diagonal(pam).T  # [2, K]
    implied = diag[:, :, None] - diag[:, None, :]
    off = ~np.eye(k, dtype=bool)
    return float(np.abs(pam - implied)[:, off].mean())


# -- AlphaPose JSON ----------------------------------------------------------------


def _frame_index(image_id) -> int:
    if isinstance(image_id, int):
        return image_id
    m = re.search(r"(\d+)(?!.*\d)", str(image_id))
    if m is None:
        raise PoseFormatError(f"cannot derive a frame index from image_id {image_id!r}")
    return int(m.group(1))


def parse_alphapose_json(data: bytes | str, width: float, height: float, K: int = NUM_KEYPOINTS,
                         timestamps: dict[int, int] | None = None, fps: float = 20.0) -> list[PoseAnnotation]:
    """Parse AlphaPose result records into normalized poses, one per frame.

    The first record seen for a frame is kept; later ones (extra people) are
    dropped and counted. Frames without an entry in ``timestamps`` get a
    timestamp from their index at ``fps``.
    """
    if width <= 0 or height <= 0:
        raise PoseFormatError("frame width and height must be positive")
    try:
        records = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise PoseFormatError(f"malformed AlphaPose JSON: {exc}") from exc
    if not isinstance(records, list):
        raise PoseFormatError("AlphaPose JSON must be an array of records")
    by_frame: dict[int, PoseAnnotation] = {}
    dropped = clipped = 0
    for i, rec in enumerate(records):
        if not isinstance(rec, dict) or "keypoints" not in rec or "image_id" not in rec:
            raise PoseFormatError(f"record {i}: missing 'image_id' or 'keypoints'")
        kps = rec["keypoints"]
        if len(kps) != 3 * K:
            raise PoseFormatError(f"record {i} ({rec['image_id']}): expected {3 * K} keypoint values, got {len(kps)}")
        arr = np.asarray(kps, dtype=np.float64).reshape(K, 3)
        fi = _frame_index(rec["image_id"])
        if fi in by_frame:
            dropped += 1
            continue
        coords = arr[:, :2] / np.array([width, height])
        out_of_range = (coords < 0) | (coords > 1)
        clipped += int(out_of_range.any(axis=1).sum())
        coords = np.clip(coords, 0.0, 1.0)
        conf = np.clip(arr[:, 2], 0.0, 1.0)
        ts = timestamps[fi] if timestamps and fi in timestamps else int(round(fi * 1000.0 / fps))
        label = rec.get("class")
        by_frame[fi] = PoseAnnotation(coords, conf, timestamp=ts, class_label=label, frame_index=fi)
    if dropped:
        logger.warning("dropped %d extra-person records", dropped)
    if clipped:
        logger.warning("clipped %d keypoints outside the frame", clipped)
    return [by_frame[k] for k in sorted(by_frame)]


def to_alphapose_json(poses: list[PoseAnnotation], width: float, height: float) -> str:
    records = []
    for i, pose in enumerate(poses):
        fi = pose.frame_index if pose.frame_index is not None else i
        px = pose.coords * np.array([width, height])
        flat = np.column_stack([px, pose.confidence]).reshape(-1)
        records.append({
            "image_id": f"{fi}.jpg",
            "category_id": 1,
            "keypoints": [float(v) for v in flat],
            "score": float(pose.confidence.mean()),
        })
    return json.dumps(records)
