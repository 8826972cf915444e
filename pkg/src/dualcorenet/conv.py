"""Spatial operators on NCHW tensors: convolution, pooling and resampling.

Convolutions use the cross-correlation convention and are evaluated by
shift-and-accumulate: one contraction per kernel offset, summed in row-major
offset order starting from zeros.  A depthwise filter computes exactly the
same per-offset products in the same order, which is what makes the
separable convolution bitwise equal to a composition of plain ``conv2d``
calls.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, _make, _note_branch, as_tensor, matmul, reshape


def _pad_amount(k: int, padding: str) -> int:
    if padding == "same":
        if k % 2 == 0:
            raise ConfigError(f"'same' padding needs an odd kernel, got {k}")
        return (k - 1) // 2
    if padding == "valid":
        return 0
    raise ConfigError(f"unknown padding mode {padding!r}")


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _check_rank4(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects an NCHW tensor, got shape {x.shape}")


def conv2d(x, kernel, stride: int = 1, padding: str = "same", bias=None) -> Tensor:
    """2-D cross-correlation of ``x`` (N,C,H,W) with ``kernel`` (O,C,K,K)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_rank4(x, "conv2d input")
    _check_rank4(kernel, "conv2d kernel")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {ci}")
    if kh != kw:
        raise ShapeError(f"conv2d expects square kernels, got {kh}x{kw}")
    if stride < 1:
        raise ConfigError(f"stride must be positive, got {stride}")
    pad = _pad_amount(kh, padding)
    ho, wo = _out_extent(h, kh, stride, pad), _out_extent(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel {kh} larger than padded input {h}x{w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    wd = kernel.data

    out = np.zeros((o, n, ho, wo), dtype=x.dtype)
    for di in range(kh):
        for dj in range(kw):
            xs = xp[:, :, di:di + span_h:stride, dj:dj + span_w:stride]
            out += np.tensordot(wd[:, :, di, dj], xs, axes=([1], [1]))
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def bw(g):
        gt = g.transpose(1, 0, 2, 3)  # O,N,Ho,Wo
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for di in range(kh):
            for dj in range(kw):
                xs = xp[:, :, di:di + span_h:stride, dj:dj + span_w:stride]
                gw[:, :, di, dj] = np.tensordot(gt, xs, axes=([1, 2, 3], [0, 2, 3]))
                gxp[:, :, di:di + span_h:stride, dj:dj + span_w:stride] += np.tensordot(
                    gt, wd[:, :, di, dj], axes=([0], [0])).transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gw

    y = _make(out, (x, kernel), bw, "conv2d")
    if bias is not None:
        y = y + reshape(as_tensor(bias), (1, o, 1, 1))
    return y


def depthwise_conv2d(x, kernel) -> Tensor:
    """Per-channel 'same' cross-correlation; ``kernel`` has shape (C,1,K,K)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_rank4(x, "depthwise input")
    _check_rank4(kernel, "depthwise kernel")
    n, c, h, w = x.shape
    if kernel.shape[0] != c or kernel.shape[1] != 1:
        raise ShapeError(f"depthwise kernel {kernel.shape} does not match {c} input channels")
    k = kernel.shape[2]
    pad = _pad_amount(k, "same")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wd = kernel.data

    out = np.zeros((n, c, h, w), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            out += xp[:, :, di:di + h, dj:dj + w] * wd[:, 0, di, dj][None, :, None, None]

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for di in range(k):
            for dj in range(k):
                gw[:, 0, di, dj] = (g * xp[:, :, di:di + h, dj:dj + w]).sum(axis=(0, 2, 3))
                gxp[:, :, di:di + h, dj:dj + w] += g * wd[:, 0, di, dj][None, :, None, None]
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gw

    return _make(out, (x, kernel), bw, "depthwise_conv2d")


def depthwise_separable_conv(x, depth_kernel, point_kernel, bias=None) -> Tensor:
    """Depthwise 'same' filter (C,1,K,K) followed by a 1x1 projection (O,C,1,1)."""
    x = as_tensor(x)
    point_kernel = as_tensor(point_kernel)
    if point_kernel.ndim != 4 or point_kernel.shape[1] != x.shape[1] or point_kernel.shape[2:] != (1, 1):
        raise ShapeError(f"point kernel {point_kernel.shape} does not match {x.shape[1]} input channels")
    return conv2d(depthwise_conv2d(x, depth_kernel), point_kernel, 1, "same", bias)


def maxpool2d(x, factor: int) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first maximum."""
    x = as_tensor(x)
    _check_rank4(x, "maxpool2d")
    n, c, h, w = x.shape
    f = int(factor)
    if f < 1:
        raise ConfigError(f"pool factor must be positive, got {factor}")
    if h % f or w % f:
        raise ShapeError(f"maxpool2d extents {h}x{w} not divisible by {f}")
    win = x.data.reshape(n, c, h // f, f, w // f, f).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // f, w // f, f * f)
    arg = win.argmax(axis=-1)
    _note_branch(arg)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        return (gw.reshape(n, c, h // f, w // f, f, f).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _make(out, (x,), bw, "maxpool2d")


def upsample2d(x, factor: int) -> Tensor:
    """Nearest-neighbour replication by ``factor`` along both spatial axes."""
    x = as_tensor(x)
    _check_rank4(x, "upsample2d")
    f = int(factor)
    if f < 1:
        raise ConfigError(f"upsample factor must be positive, got {factor}")
    if f == 1:
        return x
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)
    return _make(out, (x,), lambda g: (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),), "upsample2d")


def nearest_index(n_in: int, n_out: int) -> np.ndarray:
    """Source index ``floor(i * n_in / n_out)`` for each output position."""
    return (np.arange(n_out) * n_in) // n_out


def resize_nearest(x, out_h: int, out_w: int, axes: tuple = (2, 3)) -> Tensor:
    """Resize two spatial axes to a target size by coordinate mapping.

    Output pixel ``i`` reads source pixel ``floor(i * in / out)``; the backward
    pass scatters gradients back with accumulation.
    """
    x = as_tensor(x)
    ah, aw = axes
    h, w = x.shape[ah], x.shape[aw]
    if (h, w) == (out_h, out_w):
        return x
    ri, ci = nearest_index(h, out_h), nearest_index(w, out_w)
    out = np.take(np.take(x.data, ri, axis=ah), ci, axis=aw)

    def bw(g):
        gh = np.zeros(g.shape[:aw] + (w,) + g.shape[aw + 1:], dtype=g.dtype)
        _add_along(gh, ci, g, aw)
        gx = np.zeros(x.shape, dtype=g.dtype)
        _add_along(gx, ri, gh, ah)
        return (gx,)

    return _make(out, (x,), bw, "resize_nearest")


def _add_along(target: np.ndarray, index: np.ndarray, values: np.ndarray, axis: int) -> None:
    moved_t = np.moveaxis(target, axis, 0)
    np.add.at(moved_t, index, np.moveaxis(values, axis, 0))


def global_avg_pool(x) -> Tensor:
    """Mean over the spatial axes: (N,C,H,W) -> (N,C)."""
    x = as_tensor(x)
    _check_rank4(x, "global_avg_pool")
    return x.mean(axis=(2, 3))


def dense(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return y + bias if bias is not None else y


__all__ = [
    "conv2d", "depthwise_conv2d", "depthwise_separable_conv", "maxpool2d", "upsample2d",
    "resize_nearest", "nearest_index", "global_avg_pool", "dense",
]
