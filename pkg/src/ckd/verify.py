"""Finite-difference verification of every layer, the losses and the full networks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import loss as L
from .networks import StudentNetwork, StudentNetworkSpec, TeacherNetwork, TeacherNetworkSpec, residual_block
from .networks import ResidualBlockSpec
from .numerics import ComputeGraph, finite_diff_check, init_parameters, scalar_function_check

TOLERANCE = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error)) and self.max_error < self.tolerance


def _layer_graphs() -> dict[str, Callable[[ComputeGraph, int], int]]:
    return {
        "conv2d": lambda g, x: g.conv2d(x, "c", 3, 4, 3, stride=2, pad=1, bias=True),
        "transposed_conv2d": lambda g, x: g.transposed_conv2d(x, "t", 3, 2, 3, stride=2, pad=1),
        "batchnorm2d": lambda g, x: g.batchnorm2d(x, "bn", 3),
        "relu": lambda g, x: g.relu(g.conv2d(x, "c", 3, 3, 1, bias=True)),
        "upsample": lambda g, x: g.upsample(g.conv2d(x, "c", 3, 2, 1), 7, 9),
        "global_avg_pool": lambda g, x: g.global_avg_pool(g.conv2d(x, "c", 3, 2, 3, pad=1)),
        "affine": lambda g, x: g.affine(g.flatten(x), "fc", 3 * 5 * 5, 4),
        "residual_block": lambda g, x: residual_block(g, x, "rb", ResidualBlockSpec.make(3, 3)),
    }


def _random_selector(fault: bool, seed: int):
    rng = np.random.default_rng(seed)
    cache: dict = {}

    def select(out):
        y = out["y"]
        if "w" not in cache:
            cache["w"] = rng.normal(size=y.shape)
        w = cache["w"]
        return float((w * y).sum()), {"y": w * (1.01 if fault else 1.0)}

    return select


def check_layers(h: float = 1e-5, inject_fault: bool = False) -> list[CheckResult]:
    out = []
    for i, (name, build) in enumerate(_layer_graphs().items()):
        g = ComputeGraph()
        g.set_output("y", build(g, g.input("x")))
        params = init_parameters(g, np.random.default_rng(i))
        for k, v in params.tensors.items():
            if k.endswith((".gamma", ".beta")):
                v += np.random.default_rng(100 + i).normal(scale=0.3, size=v.shape)
        x = np.random.default_rng(50 + i).normal(size=(2, 3, 5, 5))
        err = finite_diff_check(g, params, _random_selector(inject_fault, i), h=h, inputs={"x": x},
                                samples_per_param=None, check_inputs=True)
        out.append(CheckResult(f"layer/{name}", err))
    return out


def check_losses(h: float = 1e-5, inject_fault: bool = False, cases: int = 5) -> list[CheckResult]:
    rng = np.random.default_rng(7)
    scale = 1.01 if inject_fault else 1.0
    out = []
    for mode in L.WEIGHT_MODES:
        for ts in L.TEMP_SCALE_MODES:
            cfg = L.CkdConfig(temperature=3.0, weight_mode=mode, temp_scale_mode=ts)
            worst = 0.0
            for _ in range(cases):
                n = int(rng.integers(3, 9))
                s, t, r = rng.normal(scale=2, size=n), rng.normal(scale=2, size=n), int(rng.integers(n))
                worst = max(worst, scalar_function_check(lambda z: L.ckd_loss(z, t, r, cfg).total,
                                                         lambda z: scale * L.ckd_loss_grad(z, t, r, cfg), s, h))
            out.append(CheckResult(f"loss/ckd[{mode},{ts}]", worst))
    worst_ce = worst_kd = worst_total = 0.0
    cfg = L.CkdConfig()
    for _ in range(cases):
        n = int(rng.integers(3, 9))
        s, t, r = rng.normal(size=n), rng.normal(size=n), int(rng.integers(n))
        worst_ce = max(worst_ce, scalar_function_check(lambda z: L.cross_entropy(z, r),
                                                       lambda z: scale * L.cross_entropy_grad(z, r), s, h))
        worst_kd = max(worst_kd, scalar_function_check(lambda z: L.kd_loss(z, t, 4.0),
                                                       lambda z: scale * L.kd_loss_grad(z, t, 4.0), s, h))
        worst_total = max(worst_total, scalar_function_check(
            lambda z: L.total_training_loss(z, t, r, 2, cfg),
            lambda z: scale * L.total_training_loss_grad(z, t, r, 2, cfg), s, h))
    out += [CheckResult("loss/cross_entropy", worst_ce), CheckResult("loss/kd", worst_kd),
            CheckResult("loss/total_with_warmup", worst_total)]
    return out


def check_networks(h: float = 1e-5, inject_fault: bool = False) -> list[CheckResult]:
    rng = np.random.default_rng(11)
    spec = StudentNetworkSpec(csi_shape=(4, 2, 2), feature_shape=(4, 4, 4), encoder_depth=8,
                              stage_blocks=(1, 1, 1, 1), decoder_channels=2, num_classes=3, K=4)
    net = StudentNetwork(spec)
    params = net.init_params(3)
    x = rng.normal(size=(3, 4, 2, 2))
    target = rng.normal(size=(3, 2, 4, 4))
    teacher = rng.normal(size=(3, 3))
    labels = [0, 2, 1]
    cfg = L.CkdConfig(temperature=2.0)
    scale = 1.01 if inject_fault else 1.0

    def selector(out):
        d = out["pam"] - target
        z = out["logits"]
        val = (d**2).mean() + sum(L.ckd_loss(z[i], teacher[i], labels[i], cfg).total for i in range(3))
        g = np.stack([L.ckd_loss_grad(z[i], teacher[i], labels[i], cfg) for i in range(3)])
        return val, {"pam": scale * 2 * d / d.size, "logits": scale * g}

    res = [CheckResult("network/student", finite_diff_check(net.graph, params, selector, h=h, inputs={"csi": x},
                                                            samples_per_param=2, check_inputs=True))]
    tnet = TeacherNetwork(TeacherNetworkSpec(frame_shape=(3, 8, 8), channels=(2, 3), num_classes=3))
    tparams = tnet.init_params(4)
    frames = rng.uniform(size=(2, 3, 8, 8))
    w = rng.normal(size=(2, 3))

    def tsel(out):
        return float((out["logits"] * w).sum()), {"logits": scale * w}

    res.append(CheckResult("network/teacher", finite_diff_check(tnet.graph, tparams, tsel, h=h,
                                                                inputs={"frame": frames}, samples_per_param=4)))
    return res


def run_gradchecks(h: float = 1e-5, inject_fault: bool = False) -> list[CheckResult]:
    return check_layers(h, inject_fault) + check_losses(h, inject_fault) + check_networks(h, inject_fault)
