"""Differentiable operators on NCHW tensors.

Convolution reductions accumulate in float64 and round back to float32.
Padding is zero-fill everywhere.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, ShapeError, Tensor, make_result, note_branch

ACC = np.float64


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _require_4d(x: Tensor, name: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} expects a 4-D NCHW tensor, got shape {x.shape}")


def _pad(a: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """Strided view of shape (N, C, Ho, Wo, kh, kw) over a padded input."""
    span_h = dilation * (kh - 1) + 1
    span_w = dilation * (kw - 1) + 1
    v = sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
    return v[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride, ::dilation, ::dilation]


def _scatter_windows(
    gcols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, padding: int, dilation: int
) -> np.ndarray:
    """Adjoint of ``_windows``: add (N, C, kh, kw, Ho, Wo) back into an input-shaped array."""
    n, c, h, w = shape
    ho, wo = gcols.shape[-2:]
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            out[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride] += gcols[
                :, :, i, j
            ]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-D cross-correlation, lowered to a single matrix product per batch."""
    _require_4d(x, "conv2d")
    n, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    if c != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {cin}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1, dilation >= 1, padding >= 0")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(wd, kw, stride, padding, dilation)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output would be {ho}x{wo}")

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        cols = x.data.reshape(n, c, h * wd).astype(ACC)
    else:
        win = _windows(_pad(x.data, padding), kh, kw, stride, dilation, ho, wo)
        # (N, C, kh, kw, Ho, Wo) -> (N, C*kh*kw, Ho*Wo)
        cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3), dtype=ACC).reshape(n, c * kh * kw, ho * wo)
    wmat = w.data.reshape(cout, -1).astype(ACC)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.data.astype(ACC)[None, :, None]
    out = out.reshape(n, cout, ho, wo).astype(DTYPE)

    def backward(g):
        g2 = g.reshape(n, cout, ho * wo).astype(ACC)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2)
            if kh == 1 and kw == 1 and stride == 1 and padding == 0:
                gx = gcols.reshape(n, c, h, wd)
            else:
                gcols = gcols.reshape(n, c, kh, kw, ho, wo)
                gx = _scatter_windows(gcols, x.shape, kh, kw, stride, padding, dilation)
            gx = gx.astype(DTYPE)
        if w.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1))
            gw = (gw[0] if n == 1 else gw.sum(axis=0)).reshape(w.shape).astype(DTYPE)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=(0, 2)).astype(DTYPE)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, backward, "conv2d")


def avgpool2d(x: Tensor, kernel: int, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    """Mean over each zero-padded window; padded zeros count toward the mean."""
    _require_4d(x, "avgpool2d")
    if kernel < 1:
        raise ValueError("avgpool2d kernel must be >= 1")
    stride = kernel if stride is None else stride
    n, c, h, wd = x.shape
    ho = conv_output_size(h, kernel, stride, padding, 1)
    wo = conv_output_size(wd, kernel, stride, padding, 1)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"avgpool2d output would be {ho}x{wo}")
    win = _windows(_pad(x.data, padding), kernel, kernel, stride, 1, ho, wo)
    scale = 1.0 / (kernel * kernel)
    out = (win.sum(axis=(4, 5), dtype=ACC) * scale).astype(DTYPE)

    def backward(g):
        gcols = np.broadcast_to((g * scale)[:, :, None, None], (n, c, kernel, kernel, ho, wo))
        return (_scatter_windows(gcols, x.shape, kernel, kernel, stride, padding, 1).astype(DTYPE),)

    return make_result(out, (x,), backward, "avgpool2d")


def global_avgpool(x: Tensor) -> Tensor:
    _require_4d(x, "global_avgpool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True, dtype=ACC).astype(DTYPE)

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(DTYPE),)

    return make_result(out, (x,), backward, "global_avgpool")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    note_branch(mask)
    out = np.where(mask, x.data, 0).astype(x.data.dtype)

    def backward(g):
        return (g * mask,)

    return make_result(out, (x,), backward, "relu", dtype=None)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)

    def backward(g):
        return (g * out * (1.0 - out),)

    return make_result(out, (x,), backward, "sigmoid", dtype=None)


def _same_shape(x: Tensor, y: Tensor, op: str) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"{op} shape mismatch: {x.shape} vs {y.shape}")


def add(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "add")
    out = x.data + y.data

    def backward(g):
        return g, g

    return make_result(out, (x, y), backward, "add", dtype=None)


def sub(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "sub")
    out = x.data - y.data

    def backward(g):
        return g, -g

    return make_result(out, (x, y), backward, "sub", dtype=None)


def mul(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "mul")
    out = x.data * y.data

    def backward(g):
        return g * y.data, g * x.data

    return make_result(out, (x, y), backward, "mul", dtype=None)


def add_scalar(x: Tensor, s: float) -> Tensor:
    out = x.data + x.data.dtype.type(s)

    def backward(g):
        return (g,)

    return make_result(out, (x,), backward, "add_scalar", dtype=None)


def mul_scalar(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = x.data * x.data.dtype.type(s)

    def backward(g):
        return (g * s,)

    return make_result(out, (x,), backward, "mul_scalar", dtype=None)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every channel of ``x`` by the matching entry of ``s`` (N, C, 1, 1)."""
    _require_4d(x, "scale_channels")
    n, c = x.shape[:2]
    if s.shape != (n, c, 1, 1):
        raise ShapeError(f"scale_channels expects scales of shape {(n, c, 1, 1)}, got {s.shape}")
    out = x.data * s.data

    def backward(g):
        return g * s.data, (g * x.data).sum(axis=(2, 3), keepdims=True, dtype=ACC).astype(DTYPE)

    return make_result(out, (x, s), backward, "scale_channels")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    for t in xs:
        _require_4d(t, "concat_channels")
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels spatial mismatch: {xs[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(g):
        return [g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs))]

    return make_result(out, xs, backward, "concat_channels")


def _bilinear_matrix(size: int) -> np.ndarray:
    """(2*size, size) interpolation matrix, half-pixel centres, edge-clamped."""
    m = np.zeros((2 * size, size), dtype=ACC)
    for i in range(2 * size):
        src = max((i + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def upsample2x(x: Tensor, mode: str = "nearest") -> Tensor:
    _require_4d(x, "upsample2x")
    n, c, h, w = x.shape
    if mode == "nearest":
        out = x.data.repeat(2, axis=2).repeat(2, axis=3)

        def backward(g):
            return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    elif mode == "bilinear":
        my = _bilinear_matrix(h)
        mx = _bilinear_matrix(w)
        out = np.einsum("ih,nchw,jw->ncij", my, x.data.astype(ACC), mx, optimize=True).astype(DTYPE)

        def backward(g):
            return (np.einsum("ih,ncij,jw->nchw", my, g.astype(ACC), mx, optimize=True).astype(DTYPE),)

    else:
        raise ValueError(f"unknown upsample mode {mode!r}")
    return make_result(out, (x,), backward, f"upsample2x_{mode}")


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error, returned as a float64 scalar."""
    _same_shape(a, b, "mse_loss")
    diff = a.data.astype(ACC) - b.data.astype(ACC)
    numel = diff.size
    out = np.array(np.mean(diff * diff))

    def backward(g):
        ga = (2.0 / numel) * float(np.reshape(g, -1)[0]) * diff
        return ga, -ga

    return make_result(out, (a, b), backward, "mse_loss", dtype=ACC)


def sum_all(x: Tensor) -> Tensor:
    """Scalar float64 sum; handy for building test losses."""
    out = np.array(x.data.sum(dtype=ACC))

    def backward(g):
        return (np.full(x.shape, float(np.reshape(g, -1)[0]), dtype=ACC),)

    return make_result(out, (x,), backward, "sum_all", dtype=ACC)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar float64 ``sum(weights * x)`` with fixed weights."""
    weights = np.asarray(weights, dtype=ACC)
    out = np.array(np.sum(weights * x.data.astype(ACC)))

    def backward(g):
        return (float(np.reshape(g, -1)[0]) * weights,)

    return make_result(out, (x,), backward, "weighted_sum", dtype=ACC)


def conv2d_reference(x, w, b=None, stride: int = 1, padding: int = 0, dilation: int = 1) -> np.ndarray:
    """Slow float64 convolution by per-tap shift-and-accumulate (no im2col).

    Used as an independent oracle; plain arrays in, plain array out.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(wd, kw, stride, padding, dilation)
    xp = _pad(x, padding)
    out = np.zeros((n, cout, ho, wo))
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dilation, j * dilation
            patch = xp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride]
            out += np.einsum("oc,nchw->nohw", w[:, :, i, j], patch)
    if b is not None:
        out += np.asarray(b, dtype=np.float64)[None, :, None, None]
    return out
