"""Hot numeric kernels behind the convolution layer.

Convolution is lowered to im2col + one BLAS matmul; the gather (im2col) and
scatter-add (col2im) loops are the only parts BLAS cannot do and are jitted
with numba by default.  Set ``DENSEDET_NO_NUMBA=1`` to select the pure-numpy
path (stride-tricks gather, slice-accumulate scatter); the numpy path is also
used automatically when numba is unavailable.

``benchmarks/bench_kernels.py`` compares the two paths at the tensor shapes
the detector actually uses.
"""

import os

import numpy as np

_WANT_NUMBA = os.environ.get("DENSEDET_NO_NUMBA", "0") not in ("1", "true", "yes")

if _WANT_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - mirror image always has numba
        _WANT_NUMBA = False

BACKEND = "numba" if _WANT_NUMBA else "numpy"


def conv_out_size(n, kernel, stride, pad):
    """Output length of a 1-d convolution window sweep."""
    return (n + 2 * pad - kernel) // stride + 1


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def _im2col_numpy(x, kh, kw, stride, pad):
    b, c, h, w = x.shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    # [b, oh*ow, c*kh*kw] so the matmul with the flattened kernel is one gemm
    return np.ascontiguousarray(cols.transpose(0, 4, 5, 1, 2, 3)).reshape(b, oh * ow, c * kh * kw)


def _col2im_numpy(cols, h, w, kh, kw, stride, pad):
    b, n, ckk = cols.shape
    c = ckk // (kh * kw)
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    grad = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            grad[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    if pad > 0:
        grad = grad[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(grad)


# ---------------------------------------------------------------------------
# numba path (no padded copy; serial loops keep results deterministic)
# ---------------------------------------------------------------------------

if _WANT_NUMBA:

    @njit(cache=True, fastmath=True)
    def _im2col_numba(x, kh, kw, stride, pad, oh, ow):
        b, c, h, w = x.shape
        cols = np.zeros((b, oh * ow, c * kh * kw), dtype=x.dtype)
        for bi in range(b):
            for oy in range(oh):
                iy0 = oy * stride - pad
                for ox in range(ow):
                    ix0 = ox * stride - pad
                    row = oy * ow + ox
                    for ci in range(c):
                        base = ci * kh * kw
                        for i in range(kh):
                            iy = iy0 + i
                            if iy < 0 or iy >= h:
                                continue
                            for j in range(kw):
                                ix = ix0 + j
                                if 0 <= ix < w:
                                    cols[bi, row, base + i * kw + j] = x[bi, ci, iy, ix]
        return cols

    @njit(cache=True, fastmath=True)
    def _col2im_numba(cols, c, h, w, kh, kw, stride, pad, oh, ow):
        b = cols.shape[0]
        grad = np.zeros((b, c, h, w), dtype=cols.dtype)
        for bi in range(b):
            for oy in range(oh):
                iy0 = oy * stride - pad
                for ox in range(ow):
                    ix0 = ox * stride - pad
                    row = oy * ow + ox
                    for ci in range(c):
                        base = ci * kh * kw
                        for i in range(kh):
                            iy = iy0 + i
                            if iy < 0 or iy >= h:
                                continue
                            for j in range(kw):
                                ix = ix0 + j
                                if 0 <= ix < w:
                                    grad[bi, ci, iy, ix] += cols[bi, row, base + i * kw + j]
        return grad


def im2col(x, kh, kw, stride, pad):
    """Gather conv windows of ``x`` [b,c,h,w] into [b, oh*ow, c*kh*kw]."""
    if _WANT_NUMBA:
        oh = conv_out_size(x.shape[2], kh, stride, pad)
        ow = conv_out_size(x.shape[3], kw, stride, pad)
        return _im2col_numba(x, kh, kw, stride, pad, oh, ow)
    return _im2col_numpy(x, kh, kw, stride, pad)


def col2im(cols, c, h, w, kh, kw, stride, pad):
    """Scatter-add column gradients back to the input layout [b,c,h,w]."""
    if _WANT_NUMBA:
        oh = conv_out_size(h, kh, stride, pad)
        ow = conv_out_size(w, kw, stride, pad)
        return _col2im_numba(cols, c, h, w, kh, kw, stride, pad, oh, ow)
    return _col2im_numpy(cols, h, w, kh, kw, stride, pad)
