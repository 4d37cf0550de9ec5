"""Pure numpy convolution kernels.

Fallback used when the compiled extension is not built. Layouts: inputs are
NCHW, weights are OIHW, padding is symmetric zero padding, stride is a
positive integer applied to both spatial axes.
"""

import numpy as np


def _out_size(size, ksize, stride, pad):
    return (size + 2 * pad - ksize) // stride + 1


def _windows(xp, kh, kw, stride, oh, ow):
    # (n, c, oh, ow, kh, kw) view of all receptive fields
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, :: stride, :: stride][:, :, :oh, :ow]


def conv2d_forward(x, w, stride=1, pad=0):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    oh = _out_size(h, kh, stride, pad)
    ow = _out_size(wd, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _windows(xp, kh, kw, stride, oh, ow)
    return np.einsum("ncijkl,fckl->nfij", win, w, optimize=True)


def conv2d_backward_input(gout, w, stride, pad, h, wd):
    n, f, oh, ow = gout.shape
    _, c, kh, kw = w.shape
    gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=gout.dtype)
    for i in range(kh):
        for j in range(kw):
            tap = np.einsum("nfij,fc->ncij", gout, w[:, :, i, j], optimize=True)
            gxp[:, :, i : i + stride * (oh - 1) + 1 : stride,
                j : j + stride * (ow - 1) + 1 : stride] += tap
    if pad:
        return np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + wd])
    return gxp


def conv2d_backward_weight(gout, x, stride, pad, kh, kw):
    n, f, oh, ow = gout.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _windows(xp, kh, kw, stride, oh, ow)
    return np.einsum("ncijkl,nfij->fckl", win, gout, optimize=True)
