"""Deformable convolution with learned sampling offsets.

Offset field layout: shape (N, 2*kh*kw, Ho, Wo). Kernel points are taken in
row-major order; channel 2j is the vertical displacement and channel 2j+1
the horizontal displacement of kernel point j. Sampling is bilinear with
zero extension outside the image, and offsets are never clamped.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from scipy import sparse

from .ops import ACC, ShapeError, conv_output_size
from .tensor import DTYPE, Tensor, make_result, note_branch


def bilinear_sample(x, n: int, c: int, py: float, px: float) -> float:
    """Bilinearly interpolate ``x[n, c]`` at a fractional (row, col) position.

    Corners outside the image read as zero, so anything beyond
    ``(-1, H) x (-1, W)`` returns 0.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    h, w = arr.shape[2:]
    y0 = math.floor(py)
    x0 = math.floor(px)
    ly = py - y0
    lx = px - x0
    total = 0.0
    for yy, wy in ((y0, 1.0 - ly), (y0 + 1, ly)):
        for xx, wx in ((x0, 1.0 - lx), (x0 + 1, lx)):
            if 0 <= yy < h and 0 <= xx < w:
                total += wy * wx * float(arr[n, c, yy, xx])
    return total


def bilinear_sample_grad(x, n: int, c: int, py: float, px: float):
    """Derivatives of :func:`bilinear_sample`.

    Returns ``(d_x, d_py, d_px)`` where ``d_x`` has the shape of ``x[n, c]``.
    At lattice lines the one-sided derivative from above is used.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    h, w = arr.shape[2:]
    y0 = math.floor(py)
    x0 = math.floor(px)
    ly = py - y0
    lx = px - x0
    d_x = np.zeros((h, w))
    d_py = d_px = 0.0
    for yy, wy, sy in ((y0, 1.0 - ly, -1.0), (y0 + 1, ly, 1.0)):
        for xx, wx, sx in ((x0, 1.0 - lx, -1.0), (x0 + 1, lx, 1.0)):
            if 0 <= yy < h and 0 <= xx < w:
                v = float(arr[n, c, yy, xx])
                d_x[yy, xx] += wy * wx
                d_py += sy * wx * v
                d_px += wy * sx * v
    return d_x, d_py, d_px


def _sample_grid(offsets: np.ndarray, kh, kw, stride, padding, dilation, ho, wo):
    """Absolute sampling rows/cols, contiguous with shape (N, Ho*Wo, K)."""
    n = offsets.shape[0]
    k = kh * kw
    off = offsets.astype(ACC).reshape(n, k, 2, ho * wo).transpose(0, 3, 1, 2)
    ki, kj = np.divmod(np.arange(k), kw)
    oy, ox = np.divmod(np.arange(ho * wo), wo)
    base_y = (oy * stride - padding)[:, None] + (ki * dilation)[None, :]
    base_x = (ox * stride - padding)[:, None] + (kj * dilation)[None, :]
    py = base_y[None] + off[..., 0]
    px = base_x[None] + off[..., 1]
    return py, px


def _interp_matrices(py, px, n, h, w):
    """Sparse bilinear interpolation operators for every sample position.

    Returns three CSR matrices of shape (N*L*K, N*(H*W+1)) sharing one
    sparsity pattern: the interpolation weights and their derivatives with
    respect to the sample row and column. Each row has exactly four entries
    (the corners). Columns address a flattened pixel buffer holding one extra
    zero row per batch item; corners outside the image point there.
    """
    rows = py.size
    py = py.reshape(rows)
    px = px.reshape(rows)
    y0f = np.floor(py)
    x0f = np.floor(px)
    ly = py - y0f
    lx = px - x0f
    hy = 1.0 - ly
    hx = 1.0 - lx
    y0 = y0f.astype(np.int64)
    x0 = x0f.astype(np.int64)
    stride = h * w + 1
    base = np.repeat(np.arange(n, dtype=np.int64) * stride, rows // n)
    indices = np.empty((rows, 4), dtype=np.int64)
    wgt = np.empty((rows, 4))
    dwy = np.empty((rows, 4))
    dwx = np.empty((rows, 4))
    corner = 0
    for dy, wy, sy in ((0, hy, -1.0), (1, ly, 1.0)):
        yy = y0 + dy
        row_ok = (yy >= 0) & (yy < h)
        for dx, wx, sx in ((0, hx, -1.0), (1, lx, 1.0)):
            xx = x0 + dx
            valid = row_ok & (xx >= 0) & (xx < w)
            indices[:, corner] = base + np.where(valid, yy * w + xx, h * w)
            wgt[:, corner] = wy * wx
            dwy[:, corner] = sy * wx
            dwx[:, corner] = wy * sx
            corner += 1
    index_dtype = np.int32 if n * stride < 2**31 else np.int64
    indices = indices.reshape(-1).astype(index_dtype)
    indptr = np.arange(0, 4 * rows + 1, 4, dtype=index_dtype)
    shape = (rows, n * stride)

    def build(data):
        return sparse.csr_matrix((data.reshape(-1), indices, indptr), shape=shape, copy=False)

    return build(wgt), build(dwy), build(dwx)


def _pixel_buffer(xd: np.ndarray) -> np.ndarray:
    n, c, h, w = xd.shape
    buf = np.zeros((n, h * w + 1, c), dtype=ACC)
    buf[:, :-1] = xd.reshape(n, c, h * w).transpose(0, 2, 1)
    return buf.reshape(n * (h * w + 1), c)


def _deform_forward(xd, off, w, kh, kw, stride, padding, dilation, ho, wo):
    n, c, h, wd = xd.shape
    py, px = _sample_grid(off, kh, kw, stride, padding, dilation, ho, wo)
    note_branch(np.floor(py))
    note_branch(np.floor(px))
    interp, d_row, d_col = _interp_matrices(py, px, n, h, wd)
    buf = _pixel_buffer(xd)
    l = ho * wo
    k = kh * kw
    cols = np.asarray(interp @ buf).reshape(n, l, k * c)
    # weight reordered to (Cout, K, C) to match the gathered layout
    wmat = w.transpose(0, 2, 3, 1).reshape(w.shape[0], k * c).astype(ACC)
    out = np.matmul(cols, wmat.T)  # (N, L, Cout)
    saved = dict(interp=interp, d_row=d_row, d_col=d_col, buf=buf, cols=cols, wmat=wmat)
    return out, saved


def _deform_backward(g, saved, x_shape, w_shape, need_x, need_w, need_off):
    """Backward pass of ``deform_conv2d``; each gradient is computed only when needed."""
    n, c, h, wd = x_shape
    cout, _, kh, kw = w_shape
    cols, wmat = saved["cols"], saved["wmat"]
    l = cols.shape[1]
    k = kh * kw
    gflat = g.reshape(n, cout, l).transpose(0, 2, 1).astype(ACC)  # (N, L, Cout)
    gx = gw = goff = None
    if need_w:
        gw = np.tensordot(gflat, cols, axes=([0, 1], [0, 1]))
        gw = gw.reshape(cout, kh, kw, c).transpose(0, 3, 1, 2).astype(DTYPE)
    if need_x or need_off:
        gcols = np.matmul(gflat, wmat).reshape(n * l * k, c)
    if need_x:
        gbuf = np.asarray(saved["interp"].T @ gcols).reshape(n, h * wd + 1, c)[:, :-1]
        gx = gbuf.transpose(0, 2, 1).reshape(x_shape).astype(DTYPE)
    if need_off:
        buf = saved["buf"]
        gy = np.einsum("rc,rc->r", gcols, np.asarray(saved["d_row"] @ buf))
        gxo = np.einsum("rc,rc->r", gcols, np.asarray(saved["d_col"] @ buf))
        goff = np.stack([gy.reshape(n, l, k), gxo.reshape(n, l, k)], axis=-1)  # (N, L, K, 2)
        goff = goff.transpose(0, 2, 3, 1).reshape(n, 2 * k, *g.shape[2:]).astype(DTYPE)
    return gx, gw, goff


def deform_conv2d(
    x: Tensor,
    offsets: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Convolution whose kernel taps are displaced per output pixel by ``offsets``."""
    if x.ndim != 4:
        raise ShapeError(f"deform_conv2d expects NCHW input, got {x.shape}")
    n, c, h, wd = x.shape
    cout, cin, kh, kw = weight.shape
    if c != cin:
        raise ShapeError(f"deform_conv2d channel mismatch: input has {c}, weight expects {cin}")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(wd, kw, stride, padding, dilation)
    expected = (n, 2 * kh * kw, ho, wo)
    if offsets.shape != expected:
        raise ShapeError(f"offset field must have shape {expected}, got {offsets.shape}")

    out, saved = _deform_forward(x.data, offsets.data, weight.data, kh, kw, stride, padding, dilation, ho, wo)
    if bias is not None:
        out += bias.data.astype(ACC)
    out = out.transpose(0, 2, 1).reshape(n, cout, ho, wo).astype(DTYPE)

    def backward(g):
        gx, gw, goff = _deform_backward(
            g, saved, x.shape, weight.shape, x.requires_grad, weight.requires_grad, offsets.requires_grad
        )
        grads = [gx, goff, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3), dtype=ACC).astype(DTYPE) if bias.requires_grad else None)
        return grads

    parents = (x, offsets, weight) if bias is None else (x, offsets, weight, bias)
    return make_result(out, parents, backward, "deform_conv2d")
