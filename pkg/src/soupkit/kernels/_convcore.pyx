# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled convolution kernels.

NCHW convolution with symmetric zero padding, specialized for float32 and
float64 via a fused type. Internally the batch axis is moved last (CHW-N),
so the hot inner loops run over contiguous length-n rows with all index
arithmetic hoisted out; valid tap ranges are computed analytically, keeping
the loops branch-free. Results match numpy_backend up to floating point
summation order.
"""

import numpy as np

ctypedef fused floating:
    float
    double


cdef inline Py_ssize_t _lo(Py_ssize_t pad, Py_ssize_t k, Py_ssize_t stride):
    # smallest output index whose tap k lands inside the unpadded input
    if pad - k <= 0:
        return 0
    return (pad - k + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t size, Py_ssize_t k, Py_ssize_t pad,
                           Py_ssize_t stride, Py_ssize_t limit):
    # one past the largest valid output index, clamped to the output size
    cdef Py_ssize_t top = size - 1 - k + pad
    if top < 0:
        return 0
    top = top // stride + 1
    return limit if top > limit else top


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                   Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t f = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (wd + 2 * pad - kw) // stride + 1
    xt_arr = np.ascontiguousarray(np.transpose(np.asarray(x), (1, 2, 3, 0)))
    if floating is float:
        out_arr = np.zeros((f, oh, ow, n), dtype=np.float32)
    else:
        out_arr = np.zeros((f, oh, ow, n), dtype=np.float64)
    cdef floating[:, :, :, ::1] xt = xt_arr
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, g, ci, ki, kj, i, j, i0, i1, j0, j1, ih, iw
    cdef floating wval
    for g in range(f):
        for ci in range(c):
            for ki in range(kh):
                i0 = _lo(pad, ki, stride)
                i1 = _hi(h, ki, pad, stride, oh)
                for kj in range(kw):
                    j0 = _lo(pad, kj, stride)
                    j1 = _hi(wd, kj, pad, stride, ow)
                    wval = w[g, ci, ki, kj]
                    for i in range(i0, i1):
                        ih = i * stride + ki - pad
                        for j in range(j0, j1):
                            iw = j * stride + kj - pad
                            for b in range(n):
                                out[g, i, j, b] += wval * xt[ci, ih, iw, b]
    return np.ascontiguousarray(np.transpose(out_arr, (3, 0, 1, 2)))


def conv2d_backward_input(floating[:, :, :, ::1] gout, floating[:, :, :, ::1] w,
                          Py_ssize_t stride, Py_ssize_t pad,
                          Py_ssize_t h, Py_ssize_t wd):
    cdef Py_ssize_t n = gout.shape[0], f = gout.shape[1]
    cdef Py_ssize_t oh = gout.shape[2], ow = gout.shape[3]
    cdef Py_ssize_t c = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    gt_arr = np.ascontiguousarray(np.transpose(np.asarray(gout), (1, 2, 3, 0)))
    if floating is float:
        gx_arr = np.zeros((c, h, wd, n), dtype=np.float32)
    else:
        gx_arr = np.zeros((c, h, wd, n), dtype=np.float64)
    cdef floating[:, :, :, ::1] gt = gt_arr
    cdef floating[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, g, ci, ki, kj, i, j, i0, i1, j0, j1, ih, iw
    cdef floating wval
    for g in range(f):
        for ci in range(c):
            for ki in range(kh):
                i0 = _lo(pad, ki, stride)
                i1 = _hi(h, ki, pad, stride, oh)
                for kj in range(kw):
                    j0 = _lo(pad, kj, stride)
                    j1 = _hi(wd, kj, pad, stride, ow)
                    wval = w[g, ci, ki, kj]
                    for i in range(i0, i1):
                        ih = i * stride + ki - pad
                        for j in range(j0, j1):
                            iw = j * stride + kj - pad
                            for b in range(n):
                                gx[ci, ih, iw, b] += wval * gt[g, i, j, b]
    return np.ascontiguousarray(np.transpose(gx_arr, (3, 0, 1, 2)))


def conv2d_backward_weight(floating[:, :, :, ::1] gout, floating[:, :, :, ::1] x,
                           Py_ssize_t stride, Py_ssize_t pad,
                           Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t n = gout.shape[0], f = gout.shape[1]
    cdef Py_ssize_t oh = gout.shape[2], ow = gout.shape[3]
    cdef Py_ssize_t c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    xt_arr = np.ascontiguousarray(np.transpose(np.asarray(x), (1, 2, 3, 0)))
    gt_arr = np.ascontiguousarray(np.transpose(np.asarray(gout), (1, 2, 3, 0)))
    if floating is float:
        gw_arr = np.zeros((f, c, kh, kw), dtype=np.float32)
    else:
        gw_arr = np.zeros((f, c, kh, kw), dtype=np.float64)
    if floating is float:
        lanes_arr = np.zeros(n, dtype=np.float32)
    else:
        lanes_arr = np.zeros(n, dtype=np.float64)
    cdef floating[:, :, :, ::1] xt = xt_arr
    cdef floating[:, :, :, ::1] gt = gt_arr
    cdef floating[:, :, :, ::1] gw = gw_arr
    cdef floating[::1] lanes = lanes_arr
    cdef Py_ssize_t b, g, ci, ki, kj, i, j, i0, i1, j0, j1, ih, iw
    cdef floating acc
    for g in range(f):
        for ci in range(c):
            for ki in range(kh):
                i0 = _lo(pad, ki, stride)
                i1 = _hi(h, ki, pad, stride, oh)
                for kj in range(kw):
                    j0 = _lo(pad, kj, stride)
                    j1 = _hi(wd, kj, pad, stride, ow)
                    # independent per-example lanes keep the inner loop
                    # vectorizable without reassociating float sums
                    for b in range(n):
                        lanes[b] = 0
                    for i in range(i0, i1):
                        ih = i * stride + ki - pad
                        for j in range(j0, j1):
                            iw = j * stride + kj - pad
                            for b in range(n):
                                lanes[b] += gt[g, i, j, b] * xt[ci, ih, iw, b]
                    acc = 0
                    for b in range(n):
                        acc = acc + lanes[b]
                    gw[g, ci, ki, kj] = acc
    return gw_arr
