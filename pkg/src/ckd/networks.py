"""Teacher and student network graphs.

The student maps a CSI tensor ``[S, TX, RX]`` (subcarriers as channels) to a
predicted PAM and class logits:

    nearest upsample -> 8 x (transposed conv, BN, ReLU)      encoder
    -> 4 stages x 2 residual blocks                          feature generator
    -> conv+BN+ReLU, conv -> affine -> [2, K, K]             decoder
    -> global average pool -> affine -> logits               class head

The teacher is a small frame classifier that supplies distillation logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np

from .numerics import ComputeGraph, ModelParameters, init_parameters
from .numerics.functional import transposed_output_size
from .pam import PoseAnnotation, encode_pam


class SpecError(ValueError):
    """Inconsistent network specification."""


@dataclass(frozen=True)
class ResidualBlockSpec:
    in_channels: int
    out_channels: int
    stride: int = 1
    has_downsample: bool = False

    def __post_init__(self) -> None:
        if self.stride < 1:
            raise SpecError("stride must be >= 1")
        if (self.in_channels != self.out_channels or self.stride > 1) and not self.has_downsample:
            raise SpecError("a block that changes channels or stride needs a downsample shortcut")

    @classmethod
    def make(cls, in_channels: int, out_channels: int, stride: int = 1) -> "ResidualBlockSpec":
        return cls(in_channels, out_channels, stride, in_channels != out_channels or stride > 1)


@dataclass(frozen=True)
class EncoderLayer:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    pad: int

    def out_size(self, size: int) -> int:
        return transposed_output_size(size, self.kernel, self.stride, self.pad)


# (stride, pad) options for 3x3 transposed convs; none of them shrinks the map
_TCONV_OPTIONS = ((1, 1), (1, 0), (2, 1), (2, 0))


def plan_encoder(start: int, target: int, layers: int = 8, kernel: int = 3) -> tuple[int, list[tuple[int, int]]]:
    """Pick the upsample size and per-layer (stride, pad) reaching ``target``.

    Preference order: most stride-2 layers, then the smallest upsample size
    (so the learned layers do as much of the growth as possible), then the
    lexicographically first layer sequence.
    """

    @lru_cache(maxsize=None)
    def best(size: int, left: int):
        if left == 0:
            return (0, ()) if size == target else None
        found = None
        for s, p in _TCONV_OPTIONS:
            nxt = transposed_output_size(size, kernel, s, p)
            if nxt > target:
                continue
            sub = best(nxt, left - 1)
            if sub is None:
                continue
            cand = (sub[0] - (s == 2), ((s, p),) + sub[1])
            if found is None or cand < found:
                found = cand
        return found

    choices = [(r[0], u, r[1]) for u in range(start, target + 1) if (r := best(u, layers)) is not None]
    if not choices:
        raise SpecError(f"no {layers}-layer transposed-conv plan maps {start} to {target}")
    _, u, combo = min(choices)
    return u, list(combo)


@dataclass(frozen=True)
class StudentNetworkSpec:
    csi_shape: tuple[int, int, int] = (30, 3, 3)
    feature_shape: tuple[int, int, int] = (64, 6, 6)
    encoder_depth: int = 8
    stage_blocks: tuple[int, ...] = (2, 2, 2, 2)
    decoder_channels: int = 16
    num_classes: int = 8
    K: int = 18

    @classmethod
    def paper(cls, num_classes: int = 8) -> "StudentNetworkSpec":
        return cls(feature_shape=(300, 18, 18), decoder_channels=64, num_classes=num_classes, K=18)

    def __post_init__(self) -> None:
        object.__setattr__(self, "csi_shape", tuple(int(v) for v in self.csi_shape))
        object.__setattr__(self, "feature_shape", tuple(int(v) for v in self.feature_shape))
        object.__setattr__(self, "stage_blocks", tuple(int(v) for v in self.stage_blocks))
        if len(self.csi_shape) != 3 or len(self.feature_shape) != 3:
            raise SpecError("csi_shape and feature_shape must have three entries")
        if self.num_classes < 2 or self.K < 1 or self.decoder_channels < 1:
            raise SpecError("num_classes >= 2, K >= 1 and decoder_channels >= 1 required")
        if self.feature_shape[1] != self.feature_shape[2] or self.csi_shape[1] != self.csi_shape[2]:
            raise SpecError("square spatial maps are required")
        if self.feature_shape[1] < self.csi_shape[1]:
            raise SpecError("feature map must be at least as large as the CSI map")

    @cached_property
    def encoder_plan(self) -> tuple[int, list[EncoderLayer]]:
        c0 = self.csi_shape[0]
        cf, hf, _ = self.feature_shape
        u, steps = plan_encoder(self.csi_shape[1], hf, self.encoder_depth)
        first = max(1, cf // 2)
        n = self.encoder_depth
        chans = [first + round((cf - first) * i / max(1, n - 1)) for i in range(n)]
        layers = []
        prev = c0
        for c, (s, p) in zip(chans, steps):
            layers.append(EncoderLayer(prev, c, 3, s, p))
            prev = c
        return u, layers

    @property
    def residual_blocks(self) -> list[ResidualBlockSpec]:
        cf = self.feature_shape[0]
        return [ResidualBlockSpec.make(cf, cf) for n in self.stage_blocks for _ in range(n)]


@dataclass(frozen=True)
class TeacherNetworkSpec:
    frame_shape: tuple[int, int, int] = (3, 32, 32)
    channels: tuple[int, ...] = (8, 16, 32)
    num_classes: int = 8

    def __post_init__(self) -> None:
        object.__setattr__(self, "frame_shape", tuple(int(v) for v in self.frame_shape))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        if self.num_classes < 2 or not self.channels:
            raise SpecError("teacher needs >= 2 classes and at least one conv stage")


# -- graph builders -------------------------------------------------------------------


def residual_block(g: ComputeGraph, x: int, name: str, spec: ResidualBlockSpec) -> int:
    """relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x))."""
    h = g.conv2d(x, f"{name}.conv1", spec.in_channels, spec.out_channels, 3, stride=spec.stride, pad=1)
    h = g.relu(g.batchnorm2d(h, f"{name}.bn1", spec.out_channels))
    h = g.conv2d(h, f"{name}.conv2", spec.out_channels, spec.out_channels, 3, pad=1)
    h = g.batchnorm2d(h, f"{name}.bn2", spec.out_channels)
    if spec.has_downsample:
        sc = g.conv2d(x, f"{name}.down", spec.in_channels, spec.out_channels, 1, stride=spec.stride)
        sc = g.batchnorm2d(sc, f"{name}.down_bn", spec.out_channels)
    else:
        sc = x
    return g.relu(g.add(h, sc))


def build_student(spec: StudentNetworkSpec) -> ComputeGraph:
    g = ComputeGraph()
    x = g.input("csi")
    u, layers = spec.encoder_plan
    h = g.upsample(x, u, u)
    size = u
    for i, layer in enumerate(layers):
        new = layer.out_size(size)
        if new < size:
            raise SpecError(f"encoder layer {i} shrinks the map ({size} -> {new})")
        size = new
        h = g.transposed_conv2d(h, f"enc{i}", layer.in_channels, layer.out_channels, layer.kernel,
                                stride=layer.stride, pad=layer.pad, bias=False)
        h = g.relu(g.batchnorm2d(h, f"enc{i}.bn", layer.out_channels))
    cf, hf, wf = spec.feature_shape
    if size != hf or layers[-1].out_channels != cf:
        raise SpecError(f"encoder ends at {layers[-1].out_channels}x{size}x{size}, expected {spec.feature_shape}")
    for i, block in enumerate(spec.residual_blocks):
        h = residual_block(g, h, f"res{i}", block)
    features = h
    d = spec.decoder_channels
    h = g.relu(g.batchnorm2d(g.conv2d(features, "dec0", cf, d, 3, pad=1), "dec0.bn", d))
    h = g.conv2d(h, "dec1", d, d, 3, pad=1, bias=True)
    k = spec.K
    pam = g.reshape(g.affine(g.flatten(h), "pam_head", d * hf * wf, 2 * k * k), (2, k, k))
    logits = g.affine(g.global_avg_pool(features), "cls_head", cf, spec.num_classes)
    g.set_output("pam", pam)
    g.set_output("logits", logits)
    return g


def build_teacher(spec: TeacherNetworkSpec) -> ComputeGraph:
    g = ComputeGraph()
    h = g.input("frame")
    c_prev = spec.frame_shape[0]
    size = spec.frame_shape[1]
    for i, c in enumerate(spec.channels):
        if size < 2:
            raise SpecError("frame too small for the number of stride-2 stages")
        h = g.relu(g.batchnorm2d(g.conv2d(h, f"conv{i}", c_prev, c, 3, stride=2, pad=1), f"bn{i}", c))
        c_prev, size = c, (size + 1) // 2
    g.set_output("logits", g.affine(g.global_avg_pool(h), "fc", c_prev, spec.num_classes))
    return g


# -- model wrappers -----------------------------------------------------------------------


@dataclass
class Network:
    spec: object
    graph: ComputeGraph = field(init=False)
    input_name: str = field(init=False)

    def init_params(self, seed: int) -> ModelParameters:
        return init_parameters(self.graph, np.random.default_rng(seed))

    def num_parameters(self) -> int:
        return int(sum(np.prod(s) for s in self.graph.param_shapes.values()))

    def _batch(self, x: np.ndarray, shape: tuple) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape == shape:
            return x[None], True
        if x.ndim != 4 or x.shape[1:] != shape:
            raise SpecError(f"{self.input_name}: expected {shape} or a batch of it, got {x.shape}")
        return x, False


class StudentNetwork(Network):
    def __init__(self, spec: StudentNetworkSpec):
        self.spec = spec
        self.graph = build_student(spec)
        self.input_name = "csi"

    def forward(self, params: ModelParameters, csi: np.ndarray, train: bool = False,
                update_stats: bool = True) -> tuple[np.ndarray, np.ndarray]:
        x, single = self._batch(csi, self.spec.csi_shape)
        out = self.graph.forward(params, {"csi": x}, train=train, update_stats=update_stats)
        if single:
            return out["pam"][0], out["logits"][0]
        return out["pam"], out["logits"]


class TeacherNetwork(Network):
    def __init__(self, spec: TeacherNetworkSpec):
        self.spec = spec
        self.graph = build_teacher(spec)
        self.input_name = "frame"

    def forward(self, params: ModelParameters, frame: np.ndarray, train: bool = False,
                update_stats: bool = True) -> np.ndarray:
        x, single = self._batch(frame, self.spec.frame_shape)
        logits = self.graph.forward(params, {"frame": x}, train=train, update_stats=update_stats)["logits"]
        return logits[0] if single else logits


def student_forward(net: StudentNetwork, csi: np.ndarray, params: ModelParameters) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode student prediction: (PAM, logits)."""
    return net.forward(params, csi, train=False, update_stats=False)


def residual_block_forward(x: np.ndarray, spec: ResidualBlockSpec, params: ModelParameters,
                           train: bool = False, name: str = "block") -> np.ndarray:
    """Evaluate a single residual block whose parameters are prefixed ``name``."""
    g = ComputeGraph()
    g.set_output("y", residual_block(g, g.input("x"), name, spec))
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    y = g.forward(params, {"x": x[None] if single else x}, train=train, update_stats=False)["y"]
    return y[0] if single else y


def residual_block_params(spec: ResidualBlockSpec, seed: int = 0, name: str = "block") -> ModelParameters:
    g = ComputeGraph()
    residual_block(g, g.input("x"), name, spec)
    return init_parameters(g, np.random.default_rng(seed))


def teacher_pam_supervision(annotation: PoseAnnotation) -> np.ndarray:
    return encode_pam(annotation)
