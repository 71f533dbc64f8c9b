# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels: C-level im2col/col2im gathers around BLAS matmuls.

The expensive part of small-tensor convolution is patch movement, not the
matmul, so the patch matrix is laid out as (C*k*k, B*Ho*Wo): the innermost
loop then reads and writes contiguous runs, and the dense product is handed
to numpy's BLAS.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef void _gather(double[:, :, :, :] x, double[:, :] cols,
                  Py_ssize_t k, Py_ssize_t stride, Py_ssize_t padding,
                  Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t n, ci, ky, kx, oy, ox, iy, ix, row, base
    for ci in range(c):
        for ky in range(k):
            for kx in range(k):
                row = (ci * k + ky) * k + kx
                for n in range(b):
                    for oy in range(ho):
                        iy = oy * stride + ky - padding
                        base = (n * ho + oy) * wo
                        if iy < 0 or iy >= h:
                            for ox in range(wo):
                                cols[row, base + ox] = 0.0
                            continue
                        for ox in range(wo):
                            ix = ox * stride + kx - padding
                            if ix < 0 or ix >= w:
                                cols[row, base + ox] = 0.0
                            else:
                                cols[row, base + ox] = x[n, ci, iy, ix]


cdef void _scatter(double[:, :] dcols, double[:, :, :, :] dx,
                   Py_ssize_t k, Py_ssize_t stride, Py_ssize_t padding,
                   Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t b = dx.shape[0], c = dx.shape[1], h = dx.shape[2], w = dx.shape[3]
    cdef Py_ssize_t n, ci, ky, kx, oy, ox, iy, ix, row, base
    for ci in range(c):
        for ky in range(k):
            for kx in range(k):
                row = (ci * k + ky) * k + kx
                for n in range(b):
                    for oy in range(ho):
                        iy = oy * stride + ky - padding
                        if iy < 0 or iy >= h:
                            continue
                        base = (n * ho + oy) * wo
                        for ox in range(wo):
                            ix = ox * stride + kx - padding
                            if 0 <= ix < w:
                                dx[n, ci, iy, ix] += dcols[row, base + ox]


def _cols(x, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t padding):
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * padding - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * padding - k) // stride + 1
    cols = np.empty((c * k * k, b * ho * wo), dtype=np.float64)
    _gather(x, cols, k, stride, padding, ho, wo)
    return cols, ho, wo


def conv2d_forward(x, w, int stride, int padding):
    w = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t cout = w.shape[0], k = w.shape[2]
    cols, ho, wo = _cols(x, k, stride, padding)
    out = w.reshape(cout, -1) @ cols  # (Cout, B*Ho*Wo)
    return np.ascontiguousarray(
        out.reshape(cout, x.shape[0], ho, wo).transpose(1, 0, 2, 3)
    )


def conv2d_backward_weight(x, dout, tuple w_shape, int stride, int padding):
    dout = np.ascontiguousarray(dout, dtype=np.float64)
    cdef Py_ssize_t cout = w_shape[0], k = w_shape[2]
    cols, ho, wo = _cols(x, k, stride, padding)
    dmat = np.ascontiguousarray(dout.transpose(1, 0, 2, 3)).reshape(cout, -1)
    return np.asarray(dmat @ cols.T).reshape(w_shape)


def conv2d_backward_input(w, dout, tuple x_shape, int stride, int padding):
    w = np.ascontiguousarray(w, dtype=np.float64)
    dout = np.ascontiguousarray(dout, dtype=np.float64)
    cdef Py_ssize_t cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t ho = dout.shape[2], wo = dout.shape[3]
    dmat = np.ascontiguousarray(dout.transpose(1, 0, 2, 3)).reshape(cout, -1)
    dcols = np.ascontiguousarray(w.reshape(cout, -1).T @ dmat)
    dx = np.zeros(x_shape, dtype=np.float64)
    _scatter(dcols, dx, k, stride, padding, ho, wo)
    return dx


def maxpool_forward(x, int k, int stride, int padding):
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, :, :] xv = x
    cdef Py_ssize_t b = xv.shape[0], c = xv.shape[1], h = xv.shape[2], wd = xv.shape[3]
    cdef Py_ssize_t ho = (h + 2 * padding - k) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * padding - k) // stride + 1
    out_arr = np.empty((b, c, ho, wo), dtype=np.float64)
    arg_arr = np.zeros((b, c, ho, wo), dtype=np.int64)
    cdef double[:, :, :, :] out = out_arr
    cdef long long[:, :, :, :] arg = arg_arr
    cdef Py_ssize_t n, ci, oy, ox, ky, kx, iy, ix
    cdef double best, v
    cdef long long besti
    cdef double NEG_INF = -np.inf
    with nogil:
        for n in range(b):
            for ci in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        best = NEG_INF
                        besti = 0
                        for ky in range(k):
                            iy = oy * stride + ky - padding
                            for kx in range(k):
                                ix = ox * stride + kx - padding
                                if iy < 0 or iy >= h or ix < 0 or ix >= wd:
                                    v = NEG_INF
                                else:
                                    v = xv[n, ci, iy, ix]
                                if v > best:
                                    best = v
                                    besti = ky * k + kx
                        out[n, ci, oy, ox] = best
                        arg[n, ci, oy, ox] = besti
    return out_arr, arg_arr


def maxpool_backward(dout, arg, tuple x_shape, int k, int stride, int padding):
    dout = np.ascontiguousarray(dout, dtype=np.float64)
    arg = np.ascontiguousarray(arg, dtype=np.int64)
    cdef double[:, :, :, :] dv = dout
    cdef long long[:, :, :, :] av = arg
    dx_arr = np.zeros(x_shape, dtype=np.float64)
    cdef double[:, :, :, :] dx = dx_arr
    cdef Py_ssize_t b = dx.shape[0], c = dx.shape[1], h = dx.shape[2], wd = dx.shape[3]
    cdef Py_ssize_t ho = dv.shape[2], wo = dv.shape[3]
    cdef Py_ssize_t n, ci, oy, ox, iy, ix
    cdef long long a
    with nogil:
        for n in range(b):
            for ci in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        a = av[n, ci, oy, ox]
                        iy = oy * stride + (a // k) - padding
                        ix = ox * stride + (a % k) - padding
                        if 0 <= iy < h and 0 <= ix < wd:
                            dx[n, ci, iy, ix] += dv[n, ci, oy, ox]
    return dx_arr
