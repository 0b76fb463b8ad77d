# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled 3x3 'same' convolution kernels (stride 1, zero padding 1).

Patch extraction (im2col) and its adjoint run as C loops without the GIL; the
channel contraction is a single BLAS matrix product. For a fixed shape every
sum is evaluated in the same order, so results are run-to-run reproducible.
"""
import numpy as np
cimport cython

ctypedef fused real:
    float
    double


def im2col(const real[:, :, :, ::1] x):
    """[N, C, H, W] -> [N*H*W, C*9] patch matrix of the zero-padded input."""
    cdef Py_ssize_t n = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t i, ci, r, c, dr, dc, rr, cc, row
    dtype = np.float32 if real is float else np.float64
    cols_arr = np.zeros((n * h * wd, cin * 9), dtype=dtype)
    cdef real[:, ::1] cols = cols_arr
    with nogil:
        for i in range(n):
            for r in range(h):
                for c in range(wd):
                    row = (i * h + r) * wd + c
                    for ci in range(cin):
                        for dr in range(3):
                            rr = r + dr - 1
                            if rr < 0 or rr >= h:
                                continue
                            for dc in range(3):
                                cc = c + dc - 1
                                if 0 <= cc < wd:
                                    cols[row, ci * 9 + dr * 3 + dc] = x[i, ci, rr, cc]
    return cols_arr


def col2im(const real[:, ::1] cols, Py_ssize_t n, Py_ssize_t cin, Py_ssize_t h, Py_ssize_t wd):
    """Adjoint of :func:`im2col`: scatter-add patch rows back to [N, C, H, W]."""
    cdef Py_ssize_t i, ci, r, c, dr, dc, rr, cc, row
    dtype = np.float32 if real is float else np.float64
    x_arr = np.zeros((n, cin, h, wd), dtype=dtype)
    cdef real[:, :, :, ::1] x = x_arr
    with nogil:
        for i in range(n):
            for r in range(h):
                for c in range(wd):
                    row = (i * h + r) * wd + c
                    for ci in range(cin):
                        for dr in range(3):
                            rr = r + dr - 1
                            if rr < 0 or rr >= h:
                                continue
                            for dc in range(3):
                                cc = c + dc - 1
                                if 0 <= cc < wd:
                                    x[i, ci, rr, cc] += cols[row, ci * 9 + dr * 3 + dc]
    return x_arr


def conv3x3_forward(x, w, b):
    n, _, h, wd = x.shape
    cout = w.shape[0]
    cols = im2col(x)
    out = cols @ w.reshape(cout, -1).T
    out += b
    return np.ascontiguousarray(out.reshape(n, h, wd, cout).transpose(0, 3, 1, 2))


def conv3x3_backward(x, w, dout):
    """Return (dx, dw, db) for :func:`conv3x3_forward`."""
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    cols = im2col(x)
    d2 = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(-1, cout)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dx = col2im(np.ascontiguousarray(d2 @ w.reshape(cout, -1)), n, cin, h, wd)
    return dx, np.ascontiguousarray(dw), db
