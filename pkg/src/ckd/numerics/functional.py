"""Layer primitives with explicit forward/backward pairs.

Every ``*_forward`` function takes batched operands (leading batch axis) and
returns ``(output, cache)``; the matching ``*_backward`` consumes the upstream
gradient and that cache. The unbatched wrappers at the bottom of the module
(``conv2d``, ``transposed_conv2d``, ...) accept a single ``[C, H, W]`` sample
as well as a batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, ShapeError, as_tensor

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def transposed_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size - 1) * stride - 2 * pad + k


def _check_conv_args(x: np.ndarray, w: np.ndarray, stride: int, pad: int, transposed: bool) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv expects 4-d input and kernel, got {x.shape} and {w.shape}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ShapeError(f"pad must be >= 0, got {pad}")
    c_in = x.shape[1]
    expected = w.shape[0] if transposed else w.shape[1]
    if c_in != expected:
        axis = 0 if transposed else 1
        raise ShapeError(
            f"input has {c_in} channels but kernel dim {axis} is {expected} (kernel shape {w.shape})"
        )
    kh, kw = w.shape[2:]
    if not transposed:
        h, wd = x.shape[2:]
        if kh > h + 2 * pad or kw > wd + 2 * pad:
            raise ShapeError(
                f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}"
            )


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Sliding windows of a padded batch, shape (N, C, Ho, Wo, kh, kw)."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _crop(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return x[:, :, pad:-pad, pad:-pad]


# -- convolution ---------------------------------------------------------------


def _conv_core(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> tuple[np.ndarray, np.ndarray]:
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    win = _windows(_pad(x, pad), kh, kw, stride, ho, wo)
    # (N, Ho, Wo, C*kh*kw) @ (C*kh*kw, O)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    out = cols @ w.reshape(o, -1).T
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2), cols


def _conv_input_grad(dy: np.ndarray, w: np.ndarray, stride: int, pad: int, in_hw: tuple) -> np.ndarray:
    n, o, ho, wo = dy.shape
    _, c, kh, kw = w.shape
    # (C, kh, kw, N, Ho, Wo): each kernel tap is a contiguous (C, N, Ho, Wo) block
    taps = np.tensordot(w, dy, axes=([0], [1]))
    hp, wp = in_hw[0] + 2 * pad, in_hw[1] + 2 * pad
    out = np.zeros((c, n, hp, wp), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += taps[:, i, j]
    return np.ascontiguousarray(_crop(out.transpose(1, 0, 2, 3), pad))


def conv2d_forward(x, w, b=None, stride=1, pad=0):
    _check_conv_args(x, w, stride, pad, transposed=False)
    out, cols = _conv_core(x, w, stride, pad)
    if b is not None:
        out = out + b[None, :, None, None]
    return np.ascontiguousarray(out), (x.shape, w, cols, stride, pad, b is not None)


def conv2d_backward(dy, cache):
    x_shape, w, cols, stride, pad, has_bias = cache
    o = w.shape[0]
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (dy_mat.T @ cols).reshape(w.shape)
    dx = _conv_input_grad(dy, w, stride, pad, x_shape[2:])
    db = dy.sum(axis=(0, 2, 3)) if has_bias else None
    return dx, dw, db


def transposed_conv2d_forward(x, w, b=None, stride=1, pad=0):
    """Transposed convolution; kernel layout ``[C_in, C_out, kh, kw]``.

    Implemented as the input-gradient operator of conv2d with the same kernel,
    which makes it the exact adjoint of ``conv2d_forward``.
    """
    _check_conv_args(x, w, stride, pad, transposed=True)
    kh, kw = w.shape[2:]
    h, wd = x.shape[2:]
    ho = transposed_output_size(h, kh, stride, pad)
    wo = transposed_output_size(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"transposed conv output would be {ho}x{wo}")
    out = _conv_input_grad(x, w, stride, pad, (ho, wo))
    if b is not None:
        out = out + b[None, :, None, None]
    return np.ascontiguousarray(out), (x, w, stride, pad, b is not None)


def transposed_conv2d_backward(dy, cache):
    x, w, stride, pad, has_bias = cache
    dx, cols = _conv_core(dy, w, stride, pad)
    # dx spatial size equals x by construction of the output-size formula.
    n, ci, h, wd = x.shape
    x_mat = x.transpose(1, 0, 2, 3).reshape(ci, -1)
    dw = (x_mat @ cols).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3)) if has_bias else None
    return np.ascontiguousarray(dx), dw, db


# -- batch normalisation ---------------------------------------------------------


@dataclass
class BatchNormStats:
    mean: np.ndarray
    var: np.ndarray


def batchnorm2d_forward(x, gamma, beta, stats: BatchNormStats, train: bool, eps=BN_EPS, momentum=BN_MOMENTUM):
    """Returns ``(out, cache, new_stats)``; ``new_stats`` is None in eval mode."""
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        count = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * count / (count - 1) if count > 1 else var
        new_stats = BatchNormStats(
            mean=(1 - momentum) * stats.mean + momentum * mean,
            var=(1 - momentum) * stats.var + momentum * unbiased,
        )
    else:
        mean, var = stats.mean, stats.var
        new_stats = None
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, inv_std, gamma, train), new_stats


def batchnorm2d_backward(dy, cache):
    xhat, inv_std, gamma, train = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    if train:
        m = dy.shape[0] * dy.shape[2] * dy.shape[3]
        dx = (
            inv_std[None, :, None, None]
            / m
            * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
        )
    else:
        dx = dxhat * inv_std[None, :, None, None]
    return dx, dgamma, dbeta


# -- pointwise / reshaping -----------------------------------------------------------


def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(dy, mask):
    return np.where(mask, dy, 0.0)


def nearest_indices(src: int, dst: int) -> np.ndarray:
    return (np.arange(dst) * src) // dst


def upsample_forward(x, target_h: int, target_w: int):
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"upsample target must be >= 1, got {target_h}x{target_w}")
    h, w = x.shape[2:]
    ri = nearest_indices(h, target_h)
    ci = nearest_indices(w, target_w)
    return x[:, :, ri[:, None], ci[None, :]], (x.shape, ri, ci)


def upsample_backward(dy, cache):
    shape, ri, ci = cache
    dx = np.zeros(shape, dtype=DTYPE)
    np.add.at(dx, (slice(None), slice(None), ri[:, None], ci[None, :]), dy)
    return dx


def affine_forward(x, w, b):
    """``x`` is (N, N_in); ``w`` is (N_out, N_in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"affine: input {x.shape}, weight {w.shape}, bias {b.shape}")
    return x @ w.T + b, x


def affine_backward(dy, x, w):
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def global_avg_pool_forward(x):
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dy, shape):
    n, c, h, w = shape
    return np.broadcast_to(dy[:, :, None, None] / (h * w), shape).copy()


# -- unbatched convenience wrappers ---------------------------------------------------


def _batched(x):
    x = as_tensor(x, "input")
    if x.ndim == 3:
        return x[None], True
    return x, False


def conv2d(input, kernel, stride: int = 1, pad: int = 0, bias=None) -> np.ndarray:
    x, single = _batched(input)
    out, _ = conv2d_forward(x, as_tensor(kernel, "kernel"), None if bias is None else as_tensor(bias), stride, pad)
    return out[0] if single else out


def transposed_conv2d(input, kernel, stride: int = 1, pad: int = 0, bias=None) -> np.ndarray:
    x, single = _batched(input)
    out, _ = transposed_conv2d_forward(
        x, as_tensor(kernel, "kernel"), None if bias is None else as_tensor(bias), stride, pad
    )
    return out[0] if single else out


def batchnorm2d(input, gamma, beta, running_mean, running_var, train: bool = True, eps: float = BN_EPS,
                momentum: float = BN_MOMENTUM):
    """Returns ``(output, stats)`` where ``stats`` are the updated running statistics."""
    x, single = _batched(input)
    stats = BatchNormStats(as_tensor(running_mean), as_tensor(running_var))
    out, _, new_stats = batchnorm2d_forward(x, as_tensor(gamma), as_tensor(beta), stats, train, eps, momentum)
    return (out[0] if single else out), (new_stats if new_stats is not None else stats)


def relu(input) -> np.ndarray:
    return relu_forward(as_tensor(input))[0]


def interpolate_upsample(input, target_h: int, target_w: int, mode: str = "nearest") -> np.ndarray:
    if mode != "nearest":
        raise ValueError(f"unsupported interpolation mode {mode!r}")
    x, single = _batched(input)
    out, _ = upsample_forward(x, target_h, target_w)
    return out[0] if single else out


def affine(input, weight, bias) -> np.ndarray:
    x = as_tensor(input)
    single = x.ndim == 1
    out, _ = affine_forward(x[None] if single else x, as_tensor(weight), as_tensor(bias))
    return out[0] if single else out
