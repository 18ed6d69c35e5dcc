"""Static compute graphs over named parameters.

A :class:`ComputeGraph` is an ordered list of op records. Nodes are appended
in topological order by construction (an op may only reference earlier
nodes), so evaluation is a single forward sweep and :meth:`ComputeGraph.backward`
a single reverse sweep over the cached intermediates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import functional as F
from .tensor import DTYPE, ShapeError, check_finite


class GraphError(RuntimeError):
    """Raised for malformed graphs or out-of-order evaluation."""


@dataclass
class ModelParameters:
    """Trainable tensors plus non-trainable buffers (batchnorm running stats)."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelParameters":
        return ModelParameters(
            {k: v.copy() for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}


GradientMap = dict[str, np.ndarray]


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    params: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)
    name: str = ""


class ComputeGraph:
    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.input_names: dict[str, int] = {}
        self.outputs: dict[str, int] = {}
        self.param_shapes: dict[str, tuple[int, ...]] = {}
        self._cache: list | None = None
        self._values: list | None = None
        self._pending_stats: dict[str, np.ndarray] = {}

    # -- construction -----------------------------------------------------------

    def _add(self, op: str, inputs: Iterable[int], params: Iterable[str] = (), name: str = "", **attrs) -> int:
        inputs = tuple(inputs)
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"{op}: input node {i} does not exist yet")
        self.nodes.append(Node(op, inputs, tuple(params), attrs, name))
        return len(self.nodes) - 1

    def _param(self, name: str, shape: tuple[int, ...]) -> str:
        if name in self.param_shapes:
            raise GraphError(f"duplicate parameter {name!r}")
        self.param_shapes[name] = tuple(shape)
        return name

    def input(self, name: str) -> int:
        node = self._add("input", (), name=name)
        self.input_names[name] = node
        return node

    def conv2d(self, x: int, name: str, c_in: int, c_out: int, k: int, stride=1, pad=0, bias=False) -> int:
        params = [self._param(f"{name}.weight", (c_out, c_in, k, k))]
        if bias:
            params.append(self._param(f"{name}.bias", (c_out,)))
        return self._add("conv2d", (x,), params, name, stride=stride, pad=pad)

    def transposed_conv2d(self, x: int, name: str, c_in: int, c_out: int, k: int, stride=1, pad=0, bias=True) -> int:
        params = [self._param(f"{name}.weight", (c_in, c_out, k, k))]
        if bias:
            params.append(self._param(f"{name}.bias", (c_out,)))
        return self._add("tconv2d", (x,), params, name, stride=stride, pad=pad)

    def batchnorm2d(self, x: int, name: str, channels: int) -> int:
        params = [self._param(f"{name}.gamma", (channels,)), self._param(f"{name}.beta", (channels,))]
        return self._add("batchnorm2d", (x,), params, name, channels=channels)

    def relu(self, x: int) -> int:
        return self._add("relu", (x,))

    def add(self, a: int, b: int) -> int:
        return self._add("add", (a, b))

    def upsample(self, x: int, target_h: int, target_w: int) -> int:
        return self._add("upsample", (x,), target_h=target_h, target_w=target_w)

    def global_avg_pool(self, x: int) -> int:
        return self._add("gap", (x,))

    def flatten(self, x: int) -> int:
        return self._add("flatten", (x,))

    def reshape(self, x: int, shape: tuple[int, ...]) -> int:
        return self._add("reshape", (x,), shape=tuple(shape))

    def affine(self, x: int, name: str, n_in: int, n_out: int) -> int:
        params = [self._param(f"{name}.weight", (n_out, n_in)), self._param(f"{name}.bias", (n_out,))]
        return self._add("affine", (x,), params, name)

    def set_output(self, name: str, node: int) -> None:
        self.outputs[name] = node

    def batchnorm_buffers(self) -> list[str]:
        return [n.name for n in self.nodes if n.op == "batchnorm2d"]

    # -- evaluation ---------------------------------------------------------------

    def validate(self, params: ModelParameters) -> None:
        for name, shape in self.param_shapes.items():
            if name not in params.tensors:
                raise GraphError(f"parameter {name!r} missing from ModelParameters")
            if params.tensors[name].shape != shape:
                raise ShapeError(f"parameter {name!r}: expected {shape}, got {params.tensors[name].shape}")
        for bn in self.batchnorm_buffers():
            for suffix in ("running_mean", "running_var"):
                if f"{bn}.{suffix}" not in params.buffers:
                    raise GraphError(f"buffer {bn}.{suffix} missing from ModelParameters")

    def forward(self, params: ModelParameters, inputs: dict[str, np.ndarray], train: bool = False,
                update_stats: bool = True) -> dict[str, np.ndarray]:
        """Evaluate all nodes and cache intermediates for :meth:`backward`.

        In train mode batchnorm uses batch statistics; when ``update_stats`` is
        set the running statistics in ``params.buffers`` are updated in place.
        """
        self.validate(params)
        missing = set(self.input_names) - set(inputs)
        if missing:
            raise GraphError(f"missing graph inputs: {sorted(missing)}")
        values: list = [None] * len(self.nodes)
        cache: list = [None] * len(self.nodes)
        new_stats: dict[str, np.ndarray] = {}
        P = params.tensors
        for idx, node in enumerate(self.nodes):
            args = [values[i] for i in node.inputs]
            op = node.op
            if op == "input":
                out = np.asarray(inputs[node.name], dtype=DTYPE)
            elif op == "conv2d":
                b = P[node.params[1]] if len(node.params) > 1 else None
                out, cache[idx] = F.conv2d_forward(args[0], P[node.params[0]], b, **node.attrs)
            elif op == "tconv2d":
                b = P[node.params[1]] if len(node.params) > 1 else None
                out, cache[idx] = F.transposed_conv2d_forward(args[0], P[node.params[0]], b, **node.attrs)
            elif op == "batchnorm2d":
                stats = F.BatchNormStats(
                    params.buffers[f"{node.name}.running_mean"], params.buffers[f"{node.name}.running_var"]
                )
                out, cache[idx], updated = F.batchnorm2d_forward(
                    args[0], P[node.params[0]], P[node.params[1]], stats, train
                )
                if updated is not None:
                    new_stats[f"{node.name}.running_mean"] = updated.mean
                    new_stats[f"{node.name}.running_var"] = updated.var
            elif op == "relu":
                out, cache[idx] = F.relu_forward(args[0])
            elif op == "add":
                if args[0].shape != args[1].shape:
                    raise ShapeError(f"add: {args[0].shape} vs {args[1].shape}")
                out = args[0] + args[1]
            elif op == "upsample":
                out, cache[idx] = F.upsample_forward(args[0], node.attrs["target_h"], node.attrs["target_w"])
            elif op == "gap":
                out, cache[idx] = F.global_avg_pool_forward(args[0])
            elif op == "flatten":
                cache[idx] = args[0].shape
                out = args[0].reshape(args[0].shape[0], -1)
            elif op == "reshape":
                cache[idx] = args[0].shape
                out = args[0].reshape((args[0].shape[0],) + node.attrs["shape"])
            elif op == "affine":
                out, cache[idx] = F.affine_forward(args[0], P[node.params[0]], P[node.params[1]])
            else:
                raise GraphError(f"unknown op {op!r}")
            values[idx] = check_finite(out, f"node {idx} ({op} {node.name})")
        if update_stats:
            params.buffers.update(new_stats)
        self._values, self._cache = values, cache
        return {name: values[i] for name, i in self.outputs.items()}

    def backward(self, params: ModelParameters, output_grads: dict[str, np.ndarray]) -> GradientMap:
        """Reverse sweep from seeded output gradients.

        Returns gradients for every parameter (zeros for parameters the seeds
        do not reach). Input gradients are kept in :attr:`input_grads`.
        """
        if self._values is None:
            raise GraphError("backward called before forward")
        grads: list = [None] * len(self.nodes)
        for name, g in output_grads.items():
            idx = self.outputs[name]
            g = np.asarray(g, dtype=DTYPE)
            if g.shape != self._values[idx].shape:
                raise ShapeError(f"seed for {name!r}: expected {self._values[idx].shape}, got {g.shape}")
            grads[idx] = g if grads[idx] is None else grads[idx] + g
        pgrads = params.zeros_like()
        P = params.tensors

        def accum(i: int, g: np.ndarray) -> None:
            grads[i] = g if grads[i] is None else grads[i] + g

        for idx in range(len(self.nodes) - 1, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            node = self.nodes[idx]
            op, c = node.op, self._cache[idx]
            if op == "input":
                continue
            if op == "conv2d":
                dx, dw, db = F.conv2d_backward(g, c)
            elif op == "tconv2d":
                dx, dw, db = F.transposed_conv2d_backward(g, c)
            elif op == "batchnorm2d":
                dx, dw, db = F.batchnorm2d_backward(g, c)
            elif op == "affine":
                dx, dw, db = F.affine_backward(g, c, P[node.params[0]])
            else:
                dw = db = None
                if op == "relu":
                    dx = F.relu_backward(g, c)
                elif op == "add":
                    accum(node.inputs[0], g)
                    accum(node.inputs[1], g)
                    continue
                elif op == "upsample":
                    dx = F.upsample_backward(g, c)
                elif op == "gap":
                    dx = F.global_avg_pool_backward(g, c)
                elif op in ("flatten", "reshape"):
                    dx = g.reshape(c)
                else:
                    raise GraphError(f"unknown op {op!r}")
            if dw is not None:
                pgrads[node.params[0]] += dw
            if db is not None:
                pgrads[node.params[1]] += db
            accum(node.inputs[0], dx)
        self.input_grads = {
            name: (grads[i] if grads[i] is not None else np.zeros_like(self._values[i]))
            for name, i in self.input_names.items()
        }
        return pgrads


def init_parameters(graph: ComputeGraph, rng: np.random.Generator) -> ModelParameters:
    """Uniform(+-sqrt(1/fan_in)) weights and biases; batchnorm gamma=1, beta=0."""
    tensors: dict[str, np.ndarray] = {}
    for name, shape in graph.param_shapes.items():
        if name.endswith(".gamma"):
            tensors[name] = np.ones(shape)
        elif name.endswith(".beta"):
            tensors[name] = np.zeros(shape)
        else:
            layer = name.rsplit(".", 1)[0]
            wshape = graph.param_shapes[f"{layer}.weight"]
            node = next(n for n in graph.nodes if n.name == layer)
            if node.op == "tconv2d":
                fan_in = wshape[0] * wshape[2] * wshape[3]
            else:
                fan_in = int(np.prod(wshape[1:]))
            bound = np.sqrt(1.0 / fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    buffers: dict[str, np.ndarray] = {}
    for bn in graph.batchnorm_buffers():
        c = graph.param_shapes[f"{bn}.gamma"][0]
        buffers[f"{bn}.running_mean"] = np.zeros(c)
        buffers[f"{bn}.running_var"] = np.ones(c)
    return ModelParameters(tensors, buffers)


def backward(graph: ComputeGraph, params: ModelParameters, seed_output_grad, output: str | None = None) -> GradientMap:
    """Functional form of :meth:`ComputeGraph.backward` for a single output."""
    if output is None:
        if len(graph.outputs) != 1:
            raise GraphError("graph has several outputs; name the one to seed")
        output = next(iter(graph.outputs))
    return graph.backward(params, {output: seed_output_grad})
