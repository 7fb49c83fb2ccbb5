"""Numpy implementations of the convolution data-movement kernels.

Layout contract (shared with the native backend):

    cols[n, c*kh*kw + i*kw + j, oy*ow + ox] = xpad[n, c, oy*stride + i, ox*stride + j]

where ``xpad`` is ``x`` zero-padded by ``pad`` on both spatial sides.
"""

import numpy as np


def conv_out_size(size, k, stride, pad):
    span = size + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ValueError(
            f"spatial size {size} with kernel {k}, stride {stride}, pad {pad} "
            f"does not tile evenly"
        )
    return span // stride + 1


def im2col(x, kh, kw, stride, pad):
    """Unfold (N,C,H,W) into (N, C*kh*kw, OH*OW) patch columns."""
    n, c, h, w = x.shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    sn, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(n, c * kh * kw, oh * ow)


def col2im(cols, x_shape, kh, kw, stride, pad):
    """Fold patch columns back onto an (N,C,H,W) grid, summing overlaps.

    Adjoint of :func:`im2col`; used for the gradient w.r.t. the conv input.
    """
    n, c, h, w = x_shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    xpad = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xpad[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += cols[
                :, :, i, j
            ]
    if pad:
        return np.ascontiguousarray(xpad[:, :, pad : pad + h, pad : pad + w])
    return xpad
