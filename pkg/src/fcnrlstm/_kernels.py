"""Hot inner loops: patch extraction, patch scatter, max pooling, Gaussian splatting.

Every kernel exists twice, once as a numba ``@njit`` loop nest and once as a
vectorised numpy routine. The two paths agree bit-for-bit on the gather
kernels and to rounding on the scatter kernels. Selection happens once at
import time:

    FCNRLSTM_BACKEND=numpy   force the numpy fallback
    FCNRLSTM_BACKEND=numba   require numba (ImportError if missing)

Unset, numba is used when importable.
"""

from __future__ import annotations

import math
import os

import numpy as np

_requested = os.environ.get("FCNRLSTM_BACKEND", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise ValueError(f"FCNRLSTM_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    if _requested == "numba":
        raise
    NUMBA_AVAILABLE = False

BACKEND = "numpy" if (_requested == "numpy" or not NUMBA_AVAILABLE) else "numba"


# ---------------------------------------------------------------------------
# numpy fallback
# ---------------------------------------------------------------------------


def _tap_slice(offset, stride, count):
    return slice(offset, offset + stride * (count - 1) + 1, stride)


def im2col_numpy(x, kh, kw, stride, pad, dil, ho, wo):
    n, c, _, _ = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        rows = _tap_slice(i * dil, stride, ho)
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, rows, _tap_slice(j * dil, stride, wo)]
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im_numpy(cols, n, c, h, w, kh, kw, stride, pad, dil, ho, wo):
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        rows = _tap_slice(i * dil, stride, ho)
        for j in range(kw):
            xp[:, :, rows, _tap_slice(j * dil, stride, wo)] += cols[:, :, i, j]
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])
    return xp


def maxpool_forward_numpy(x, k, stride, ho, wo):
    n, c, h, w = x.shape
    windows = np.empty((n, c, k * k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            windows[:, :, i * k + j] = x[:, :, _tap_slice(i, stride, ho), _tap_slice(j, stride, wo)]
    local = windows.argmax(axis=2)  # first maximum wins ties
    out = np.take_along_axis(windows, local[:, :, None], axis=2)[:, :, 0]
    di, dj = np.divmod(local, k)
    ys = np.arange(ho)[:, None] * stride
    xs = np.arange(wo)[None, :] * stride
    argmax = (ys + di) * w + (xs + dj)
    return out, argmax.astype(np.int64)


def maxpool_backward_numpy(grad_out, argmax, h, w):
    n, c = grad_out.shape[:2]
    base = (np.arange(n * c, dtype=np.int64) * (h * w)).reshape(n, c, 1, 1)
    flat = np.bincount((argmax + base).ravel(), weights=grad_out.ravel().astype(np.float64),
                       minlength=n * c * h * w)
    return flat.reshape(n, c, h, w).astype(grad_out.dtype)


def splat_gaussian_numpy(out, cx, cy, sigma, radius):
    h, w = out.shape
    y0, y1 = max(0, int(math.floor(cy - radius))), min(h - 1, int(math.ceil(cy + radius)))
    x0, x1 = max(0, int(math.floor(cx - radius))), min(w - 1, int(math.ceil(cx + radius)))
    if y0 > y1 or x0 > x1:
        return
    dy = np.arange(y0, y1 + 1, dtype=np.float64) - cy
    dx = np.arange(x0, x1 + 1, dtype=np.float64) - cx
    r2 = dy[:, None] ** 2 + dx[None, :] ** 2
    patch = np.exp(-r2 / (2.0 * sigma * sigma)) / (2.0 * math.pi * sigma * sigma)
    patch[r2 > radius * radius] = 0.0
    out[y0:y1 + 1, x0:x1 + 1] += patch


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

if NUMBA_AVAILABLE:

    @njit(cache=True)
    def im2col_numba(x, kh, kw, stride, pad, dil, ho, wo):
        n, c, h, w = x.shape
        cols = np.empty((n, c * kh * kw, ho * wo), dtype=x.dtype)
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for y in range(ho):
                            iy = y * stride - pad + i * dil
                            inside_y = 0 <= iy < h
                            for xo in range(wo):
                                ix = xo * stride - pad + j * dil
                                if inside_y and 0 <= ix < w:
                                    cols[b, row, y * wo + xo] = x[b, ch, iy, ix]
                                else:
                                    cols[b, row, y * wo + xo] = 0.0
        return cols

    @njit(cache=True)
    def col2im_numba(cols, n, c, h, w, kh, kw, stride, pad, dil, ho, wo):
        out = np.zeros((n, c, h, w), dtype=cols.dtype)
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for y in range(ho):
                            iy = y * stride - pad + i * dil
                            if iy < 0 or iy >= h:
                                continue
                            for xo in range(wo):
                                ix = xo * stride - pad + j * dil
                                if 0 <= ix < w:
                                    out[b, ch, iy, ix] += cols[b, row, y * wo + xo]
        return out

    @njit(cache=True)
    def maxpool_forward_numba(x, k, stride, ho, wo):
        n, c, h, w = x.shape
        out = np.empty((n, c, ho, wo), dtype=x.dtype)
        argmax = np.empty((n, c, ho, wo), dtype=np.int64)
        for b in range(n):
            for ch in range(c):
                for y in range(ho):
                    for xo in range(wo):
                        y0 = y * stride
                        x0 = xo * stride
                        best = x[b, ch, y0, x0]
                        best_idx = y0 * w + x0
                        for i in range(k):
                            for j in range(k):
                                v = x[b, ch, y0 + i, x0 + j]
                                if v > best:
                                    best = v
                                    best_idx = (y0 + i) * w + x0 + j
                        out[b, ch, y, xo] = best
                        argmax[b, ch, y, xo] = best_idx
        return out, argmax

    @njit(cache=True)
    def maxpool_backward_numba(grad_out, argmax, h, w):
        n, c, ho, wo = grad_out.shape
        acc = np.zeros((n, c, h * w), dtype=np.float64)
        for b in range(n):
            for ch in range(c):
                for y in range(ho):
                    for xo in range(wo):
                        acc[b, ch, argmax[b, ch, y, xo]] += grad_out[b, ch, y, xo]
        return acc.reshape(n, c, h, w).astype(grad_out.dtype)

    @njit(cache=True)
    def splat_gaussian_numba(out, cx, cy, sigma, radius):
        h, w = out.shape
        y0 = max(0, int(math.floor(cy - radius)))
        y1 = min(h - 1, int(math.ceil(cy + radius)))
        x0 = max(0, int(math.floor(cx - radius)))
        x1 = min(w - 1, int(math.ceil(cx + radius)))
        norm = 1.0 / (2.0 * math.pi * sigma * sigma)
        r_sq = radius * radius
        for yy in range(y0, y1 + 1):
            dy = yy - cy
            for xx in range(x0, x1 + 1):
                dx = xx - cx
                r2 = dy * dy + dx * dx
                if r2 <= r_sq:
                    out[yy, xx] += math.exp(-r2 / (2.0 * sigma * sigma)) * norm


if BACKEND == "numba":
    im2col = im2col_numba
    col2im = col2im_numba
    maxpool_forward = maxpool_forward_numba
    maxpool_backward = maxpool_backward_numba
    splat_gaussian = splat_gaussian_numba
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    maxpool_forward = maxpool_forward_numpy
    maxpool_backward = maxpool_backward_numpy
    splat_gaussian = splat_gaussian_numpy

__all__ = [
    "BACKEND",
    "NUMBA_AVAILABLE",
    "im2col",
    "col2im",
    "maxpool_forward",
    "maxpool_backward",
    "splat_gaussian",
]
