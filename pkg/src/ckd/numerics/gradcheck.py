"""Central finite-difference verification of graph gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .graph import ComputeGraph, ModelParameters

# Maps graph outputs to (scalar loss, gradient seeds for those outputs).
LossSelector = Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]]


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(numeric))


def _scalar(value) -> float:
    arr = np.asarray(value)
    if arr.size != 1:
        raise ValueError(f"loss must be scalar, got shape {arr.shape}")
    return float(arr.reshape(()))


def finite_diff_check(
    graph: ComputeGraph,
    params: ModelParameters,
    loss_selector: LossSelector,
    h: float = 1e-5,
    inputs: dict[str, np.ndarray] | None = None,
    train: bool = True,
    samples_per_param: int | None = 6,
    seed: int = 0,
    check_inputs: bool = False,
) -> float:
    """Max relative error between backprop and central differences.

    ``samples_per_param`` entries of each parameter tensor are probed (all of
    them when None). Running statistics are never updated during the check.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    inputs = {} if inputs is None else {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    rng = np.random.default_rng(seed)

    def loss_at() -> float:
        out = graph.forward(params, inputs, train=train, update_stats=False)
        return _scalar(loss_selector(out)[0])

    out = graph.forward(params, inputs, train=train, update_stats=False)
    value, seeds = loss_selector(out)
    _scalar(value)
    analytic = graph.backward(params, seeds)
    analytic_inputs = {k: v.copy() for k, v in graph.input_grads.items()}

    targets = [(params.tensors[name], analytic[name]) for name in graph.param_shapes]
    if check_inputs:
        targets += [(inputs[name], analytic_inputs[name]) for name in graph.input_names]

    worst = 0.0
    for arr, grad in targets:
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        if samples_per_param is None or samples_per_param >= flat.size:
            idxs = np.arange(flat.size)
        else:
            idxs = rng.choice(flat.size, size=samples_per_param, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_at()
            flat[i] = orig - h
            down = loss_at()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            worst = max(worst, relative_error(float(gflat[i]), numeric))
    return worst


def scalar_function_check(f: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray],
                          x: np.ndarray, h: float = 1e-5) -> float:
    """Finite-difference check of a plain function of a vector."""
    x = np.array(x, dtype=np.float64)
    g = grad(x)
    worst = 0.0
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        numeric = (f(x + e) - f(x - e)) / (2 * h)
        worst = max(worst, relative_error(float(g.flat[i]), numeric))
    return worst
