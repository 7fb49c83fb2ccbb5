# cython: boundscheck=False, wraparound=False, cdivision=True
"""Cython implementations of the convolution data-movement kernels.

Same layout contract as ``numpy_backend``; single-threaded by design so
results are reproducible bit for bit.
"""

import numpy as np

cimport cython

ctypedef fused real:
    float
    double


def _out_size(Py_ssize_t size, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    span = size + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ValueError(
            f"spatial size {size} with kernel {k}, stride {stride}, pad {pad} "
            f"does not tile evenly"
        )
    return span // stride + 1


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _im2col_impl(real[:, :, :, ::1] x, real[:, :, ::1] cols,
                       Py_ssize_t kh, Py_ssize_t kw,
                       Py_ssize_t stride, Py_ssize_t pad,
                       Py_ssize_t oh, Py_ssize_t ow) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t b, ch, i, j, oy, ox, iy, ix, row
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for oy in range(oh):
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(ow):
                            ix = ox * stride + j - pad
                            if 0 <= ix < w:
                                cols[b, row, oy * ow + ox] = x[b, ch, iy, ix]


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _col2im_impl(real[:, :, ::1] cols, real[:, :, :, ::1] x,
                       Py_ssize_t kh, Py_ssize_t kw,
                       Py_ssize_t stride, Py_ssize_t pad,
                       Py_ssize_t oh, Py_ssize_t ow) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t b, ch, i, j, oy, ox, iy, ix, row
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for oy in range(oh):
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(ow):
                            ix = ox * stride + j - pad
                            if 0 <= ix < w:
                                x[b, ch, iy, ix] += cols[b, row, oy * ow + ox]


def im2col(x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    """Unfold (N,C,H,W) into (N, C*kh*kw, OH*OW) patch columns."""
    cdef Py_ssize_t oh = _out_size(x.shape[2], kh, stride, pad)
    cdef Py_ssize_t ow = _out_size(x.shape[3], kw, stride, pad)
    x = np.ascontiguousarray(x)
    cols = np.zeros((x.shape[0], x.shape[1] * kh * kw, oh * ow), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col_impl[float](x, cols, kh, kw, stride, pad, oh, ow)
    elif x.dtype == np.float64:
        _im2col_impl[double](x, cols, kh, kw, stride, pad, oh, ow)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return cols


def col2im(cols, x_shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    """Fold patch columns back onto an (N,C,H,W) grid, summing overlaps."""
    cdef Py_ssize_t oh = _out_size(x_shape[2], kh, stride, pad)
    cdef Py_ssize_t ow = _out_size(x_shape[3], kw, stride, pad)
    cols = np.ascontiguousarray(cols)
    x = np.zeros(tuple(x_shape), dtype=cols.dtype)
    if cols.dtype == np.float32:
        _col2im_impl[float](cols, x, kh, kw, stride, pad, oh, ow)
    elif cols.dtype == np.float64:
        _col2im_impl[double](cols, x, kh, kw, stride, pad, oh, ow)
    else:
        raise TypeError(f"unsupported dtype {cols.dtype}")
    return x
