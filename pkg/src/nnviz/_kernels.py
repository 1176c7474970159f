"""Convolution kernels: BLAS-backed numpy default, numba loops via env flag.

Backend selection is driven by the NNVIZ_BACKEND environment variable:
"numpy" (the default) runs im2col/col2im batched matmuls, "numba" swaps in
jitted explicit loops. At the small multi-channel shapes this package
trains on, sgemm wins by a wide margin (see benchmarks/bench_kernels.py,
which reports timings and the cross-backend deviation); the numba path
exists for wide single-channel sweeps and as an independent second
implementation the parity tests check against.

Both paths are deterministic within a process; they may differ in the
last float32 bits because summation order differs. The numba kernels
parallelize so every output element is accumulated by exactly one thread
in a fixed order, keeping results bit-reproducible run to run.
"""

import os
import warnings

import numpy as np

# Avoid the noisy TBB version probe; workqueue is always available.
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

_requested = os.environ.get("NNVIZ_BACKEND", "numpy").strip().lower()
if _requested not in ("numba", "numpy"):
    warnings.warn(f"NNVIZ_BACKEND={_requested!r} not recognized, using numpy")
    _requested = "numpy"

HAVE_NUMBA = False
try:
    import numba

    HAVE_NUMBA = True
except ImportError:
    if _requested == "numba":
        warnings.warn("NNVIZ_BACKEND=numba but numba is not importable; "
                      "falling back to numpy kernels")

USE_NUMBA = HAVE_NUMBA and _requested == "numba"


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"


def _out_hw(h, w, kh, kw, stride, pad):
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


# ---------------------------------------------------------------- numpy path
# im2col/col2im with batched BLAS matmuls; the dy/dx loops only move views.

def _im2col(x, kh, kw, stride, pad):
    n, ci, h, w = x.shape
    ho, wo = _out_hw(h, w, kh, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, ci, kh, kw, ho, wo), dtype=np.float32)
    for dy in range(kh):
        for dx in range(kw):
            cols[:, :, dy, dx] = xp[:, :, dy:dy + stride * ho:stride,
                                    dx:dx + stride * wo:stride]
    return cols, ho, wo


def conv2d_forward_np(x, k, b, stride, pad):
    n, ci, h, w = x.shape
    co, _, kh, kw = k.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    out = k.reshape(co, ci * kh * kw) @ cols.reshape(n, ci * kh * kw, ho * wo)
    return np.ascontiguousarray(
        out.reshape(n, co, ho, wo) + b.reshape(1, co, 1, 1), dtype=np.float32)


def conv2d_backward_input_np(g, k, stride, pad, h, w):
    n, co, ho, wo = g.shape
    _, ci, kh, kw = k.shape
    kmat = k.reshape(co, ci * kh * kw)
    dcols = (kmat.T @ g.reshape(n, co, ho * wo)).reshape(
        n, ci, kh, kw, ho, wo)
    dxp = np.zeros((n, ci, h + 2 * pad, w + 2 * pad), dtype=np.float32)
    for dy in range(kh):
        for dx in range(kw):
            dxp[:, :, dy:dy + stride * ho:stride,
                dx:dx + stride * wo:stride] += dcols[:, :, dy, dx]
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + w])
    return dxp


def conv2d_backward_kernel_np(g, x, kh, kw, stride, pad):
    n, co, ho, wo = g.shape
    ci = x.shape[1]
    cols, _, _ = _im2col(x, kh, kw, stride, pad)
    gr = g.reshape(n, co, ho * wo)
    cr = cols.reshape(n, ci * kh * kw, ho * wo)
    dk = np.matmul(gr, cr.transpose(0, 2, 1)).sum(axis=0)
    return np.ascontiguousarray(dk.reshape(co, ci, kh, kw), dtype=np.float32)


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @numba.njit(cache=True, inline="always")
    def _valid_xx(off, stride, w, wo):
        """Output-x window [lo, hi) whose source column xx*stride+off is in
        [0, w); hoists the bounds check out of the inner loops."""
        lo = 0
        if off < 0:
            lo = (-off + stride - 1) // stride
        hi = wo
        top = w - 1 - off
        if top < 0:
            hi = 0
        elif top // stride + 1 < wo:
            hi = top // stride + 1
        if lo > hi:
            lo = hi
        return lo, hi

    @numba.njit(cache=True, parallel=True)
    def _conv2d_forward_nb(x, k, b, stride, pad):
        n, ci, h, w = x.shape
        co, _, kh, kw = k.shape
        ho = (h + 2 * pad - kh) // stride + 1
        wo = (w + 2 * pad - kw) // stride + 1
        out = np.empty((n, co, ho, wo), dtype=np.float32)
        for ni in numba.prange(n):
            for oi in range(co):
                for y in range(ho):
                    row = out[ni, oi, y]
                    for xx in range(wo):
                        row[xx] = b[oi]
                    for ii in range(ci):
                        for dy in range(kh):
                            sy = y * stride + dy - pad
                            if sy < 0 or sy >= h:
                                continue
                            xrow = x[ni, ii, sy]
                            for dx in range(kw):
                                kv = k[oi, ii, dy, dx]
                                off = dx - pad
                                lo, hi = _valid_xx(off, stride, w, wo)
                                for xx in range(lo, hi):
                                    row[xx] += xrow[xx * stride + off] * kv
        return out

    @numba.njit(cache=True, parallel=True)
    def _conv2d_backward_input_nb(g, k, stride, pad, h, w):
        n, co, ho, wo = g.shape
        ci = k.shape[1]
        kh, kw = k.shape[2], k.shape[3]
        dx_ = np.zeros((n, ci, h, w), dtype=np.float32)
        for ni in numba.prange(n):
            for oi in range(co):
                for y in range(ho):
                    grow = g[ni, oi, y]
                    for ii in range(ci):
                        for dy in range(kh):
                            sy = y * stride + dy - pad
                            if sy < 0 or sy >= h:
                                continue
                            drow = dx_[ni, ii, sy]
                            for dxk in range(kw):
                                kv = k[oi, ii, dy, dxk]
                                off = dxk - pad
                                lo, hi = _valid_xx(off, stride, w, wo)
                                for xx in range(lo, hi):
                                    drow[xx * stride + off] += grow[xx] * kv
        return dx_

    @numba.njit(cache=True, parallel=True)
    def _conv2d_backward_kernel_nb(g, x, kh, kw, stride, pad):
        n, co, ho, wo = g.shape
        ci = x.shape[1]
        h, w = x.shape[2], x.shape[3]
        dk = np.zeros((co, ci, kh, kw), dtype=np.float32)
        for oi in numba.prange(co):
            for ni in range(n):
                for y in range(ho):
                    grow = g[ni, oi, y]
                    for ii in range(ci):
                        for dy in range(kh):
                            sy = y * stride + dy - pad
                            if sy < 0 or sy >= h:
                                continue
                            xrow = x[ni, ii, sy]
                            for dxk in range(kw):
                                off = dxk - pad
                                lo, hi = _valid_xx(off, stride, w, wo)
                                acc = np.float32(0.0)
                                for xx in range(lo, hi):
                                    acc += grow[xx] * xrow[xx * stride + off]
                                dk[oi, ii, dy, dxk] += acc
        return dk

    def conv2d_forward_nb(x, k, b, stride, pad):
        return _conv2d_forward_nb(x, k, b, stride, pad)

    def conv2d_backward_input_nb(g, k, stride, pad, h, w):
        return _conv2d_backward_input_nb(
            np.ascontiguousarray(g), k, stride, pad, h, w)

    def conv2d_backward_kernel_nb(g, x, kh, kw, stride, pad):
        return _conv2d_backward_kernel_nb(
            np.ascontiguousarray(g), x, kh, kw, stride, pad)


if USE_NUMBA:
    conv2d_forward = conv2d_forward_nb
    conv2d_backward_input = conv2d_backward_input_nb
    conv2d_backward_kernel = conv2d_backward_kernel_nb
else:
    conv2d_forward = conv2d_forward_np
    conv2d_backward_input = conv2d_backward_input_np
    conv2d_backward_kernel = conv2d_backward_kernel_np
