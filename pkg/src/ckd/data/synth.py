"""Synthetic cross-modal dataset: stick-figure frames paired with CSI.

Each class has a template pose; samples jitter it. The frame is a
rasterized stick figure of the jittered pose. The CSI is a fixed seeded
random map of the flattened keypoints:

    v   = 2 * coords - 1                    (flattened, [2K])
    |h| = 1 + 0.5 * tanh(G_mag @ v)
    arg = pi * tanh(G_phase @ v)
    h   = |h| * exp(i arg) + complex Gaussian noise (sigma per component)

Frames are stamped at ``fps`` and CSI at ``csi_rate_hz``; CSI samples that
fall between frames reuse the pose of the preceding frame with fresh noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..pam import KEYPOINT_NAMES, SKELETON, PoseAnnotation
from ..seeding import derive_seed
from .csi import CsiSample
from .sync import FrameRecord, SyncedPair

# rough standing figure in the 18-point layout, (x, y) with y downwards
_BASE_POSE = np.array([
    [0.50, 0.14], [0.50, 0.26],                    # nose, neck
    [0.40, 0.27], [0.36, 0.42], [0.34, 0.56],      # right arm
    [0.60, 0.27], [0.64, 0.42], [0.66, 0.56],      # left arm
    [0.44, 0.56], [0.43, 0.72], [0.42, 0.88],      # right leg
    [0.56, 0.56], [0.57, 0.72], [0.58, 0.88],      # left leg
    [0.48, 0.12], [0.52, 0.12], [0.46, 0.13], [0.54, 0.13],  # eyes, ears
])  # fmt: skip

# limbs swung per class: (joint, child chain) rotated about the joint
_LIMBS = (
    (2, (3, 4)), (3, (4,)),
    (5, (6, 7)), (6, (7,)),
    (8, (9, 10)), (9, (10,)),
    (11, (12, 13)), (12, (13,)),
)


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 8
    samples_per_class: int = 100
    noise_sigma: float = 0.3
    channel_mixing_seed: int = 0
    K: int = 18
    frame_size: tuple[int, int] = (32, 32)
    csi_shape: tuple[int, int, int] = (30, 3, 3)
    jitter: float = 0.015
    channel_gain: float = 3.0
    seed: int = 0
    fps: float = 20.0
    csi_rate_hz: float = 100.0
    start_ms: int = 1_600_000_000_000
    min_separation: float = field(default=5.0, repr=False)  # in units of jitter

    def __post_init__(self) -> None:
        object.__setattr__(self, "frame_size", tuple(int(v) for v in self.frame_size))
        object.__setattr__(self, "csi_shape", tuple(int(v) for v in self.csi_shape))
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if self.noise_sigma < 0 or self.jitter < 0:
            raise ValueError("noise_sigma and jitter must be >= 0")
        if self.K != len(KEYPOINT_NAMES):
            raise ValueError(f"the stick-figure model has {len(KEYPOINT_NAMES)} keypoints, got K={self.K}")
        if self.csi_rate_hz < self.fps:
            raise ValueError("CSI rate must be at least the frame rate")

    @property
    def num_pairs(self) -> int:
        return self.num_classes * self.samples_per_class


@dataclass
class SynthDataset:
    frames: list[FrameRecord]
    csi: list[CsiSample]
    pairs: list[SyncedPair]
    templates: np.ndarray  # [num_classes, K, 2]


def template_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean per-keypoint Euclidean distance between two [K, 2] poses."""
    return float(np.linalg.norm(a - b, axis=1).mean())


def _rotate(points: np.ndarray, center: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    d = points - center
    return center + d @ np.array([[c, s], [-s, c]])


def make_templates(cfg: SynthConfig, rng: np.random.Generator, max_tries: int = 1000) -> np.ndarray:
    """Class templates pairwise farther apart than ``min_separation * jitter``."""
    need = cfg.min_separation * cfg.jitter
    templates: list[np.ndarray] = []
    for _ in range(max_tries * cfg.num_classes):
        pose = _BASE_POSE.copy()
        for joint, chain in _LIMBS:
            idx = list(chain)
            pose[idx] = _rotate(pose[idx], pose[joint], rng.uniform(-1.2, 1.2))
        pose += rng.uniform(-0.08, 0.08, size=2)  # where the person stands
        pose = np.clip(pose, 0.03, 0.97)
        if all(template_distance(pose, t) > need for t in templates):
            templates.append(pose)
            if len(templates) == cfg.num_classes:
                break
    else:
        raise RuntimeError("could not draw sufficiently separated class templates")
    out = np.stack(templates)
    dmin = min(template_distance(out[i], out[j]) for i in range(len(out)) for j in range(i))
    assert dmin > need, (dmin, need)
    return out


_ARM = {2, 3, 4, 5, 6, 7}
_LEG = {8, 9, 10, 11, 12, 13}


def _edge_channel(a: int, b: int) -> int:
    if a in _ARM or b in _ARM:
        return 0
    if a in _LEG or b in _LEG:
        return 1
    return 2


def render_stick_figure(coords: np.ndarray, height: int, width: int, thickness: float = 0.9) -> np.ndarray:
    """Antialiased stick figure on a [3, H, W] canvas in [0, 1].

    Channel 0 draws arms, channel 1 legs, channel 2 head and torso.
    """
    ys, xs = np.mgrid[0:height, 0:width]
    px = np.stack([xs + 0.5, ys + 0.5], axis=-1).reshape(-1, 2)
    pts = coords * np.array([width, height])
    img = np.zeros((3, height * width))
    for a, b in SKELETON:
        chan = _edge_channel(a, b)
        p, q = pts[a], pts[b]
        d = q - p
        L2 = float(d @ d)
        t = np.zeros(len(px)) if L2 == 0 else np.clip((px - p) @ d / L2, 0, 1)
        dist = np.linalg.norm(px - (p + t[:, None] * d), axis=1)
        img[chan] = np.maximum(img[chan], np.clip(1.0 - dist / thickness, 0.0, 1.0))
    return img.reshape(3, height, width)


class ChannelModel:
    """Fixed random nonlinear map from keypoints to complex CSI."""

    def __init__(self, cfg: SynthConfig):
        rng = np.random.default_rng(cfg.channel_mixing_seed)
        m = int(np.prod(cfg.csi_shape))
        d = 2 * cfg.K
        scale = cfg.channel_gain / np.sqrt(d)
        self.G_mag = rng.normal(scale=scale, size=(m, d))
        self.G_phase = rng.normal(scale=scale, size=(m, d))
        self.shape = cfg.csi_shape

    def clean(self, coords: np.ndarray) -> np.ndarray:
        v = 2.0 * np.asarray(coords).reshape(-1) - 1.0
        mag = 1.0 + 0.5 * np.tanh(self.G_mag @ v)
        phase = np.pi * np.tanh(self.G_phase @ v)
        return (mag * np.exp(1j * phase)).reshape(self.shape)

    def __call__(self, coords: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
        h = self.clean(coords)
        if sigma > 0:
            h = h + sigma * (rng.normal(size=h.shape) + 1j * rng.normal(size=h.shape))
        return h


def synth_generate(cfg: SynthConfig) -> SynthDataset:
    """Generate frames, a CSI stream and their ground-truth alignment."""
    rng_t = np.random.default_rng(derive_seed(cfg.seed, "synth.templates"))
    rng_j = np.random.default_rng(derive_seed(cfg.seed, "synth.jitter"))
    rng_n = np.random.default_rng(derive_seed(cfg.seed, "synth.noise"))
    templates = make_templates(cfg, rng_t)
    channel = ChannelModel(cfg)
    H, W = cfg.frame_size
    frame_step = 1000.0 / cfg.fps
    csi_step = 1000.0 / cfg.csi_rate_hz
    per_frame = int(round(frame_step / csi_step))

    frames, csi, pairs = [], [], []
    for i in range(cfg.num_pairs):
        label = i // cfg.samples_per_class
        coords = np.clip(templates[label] + rng_j.normal(scale=cfg.jitter, size=templates[label].shape), 0.0, 1.0)
        t = cfg.start_ms + int(round(i * frame_step))
        pose = PoseAnnotation(coords, np.ones(cfg.K), timestamp=t, class_label=label, frame_index=i)
        fr = FrameRecord(t, render_stick_figure(coords, H, W), pose, label, i)
        frames.append(fr)
        row = len(csi)
        for k in range(per_frame):
            csi.append(CsiSample(t + int(round(k * csi_step)), channel(coords, cfg.noise_sigma, rng_n)))
        pairs.append(SyncedPair(fr, csi[row], 0, row))
    return SynthDataset(frames, csi, pairs, templates)
