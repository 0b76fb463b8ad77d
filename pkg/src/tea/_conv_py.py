"""Pure-numpy 3x3 'same' convolution, used when the compiled kernel is absent."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _patches(x):
    # [N, C, H, W] -> [N, C, H, W, 3, 3] view over the zero-padded input
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return sliding_window_view(xp, (3, 3), axis=(2, 3))


def conv3x3_forward(x, w, b):
    out = np.einsum("nchwij,ocij->nohw", _patches(x), w, optimize=True)
    out += b[None, :, None, None]
    return np.ascontiguousarray(out, dtype=x.dtype)


def conv3x3_backward(x, w, dout):
    """Return (dx, dw, db) for :func:`conv3x3_forward`."""
    db = dout.sum(axis=(0, 2, 3))
    dw = np.einsum("nchwij,nohw->ocij", _patches(x), dout, optimize=True)
    # the input gradient is a full correlation of dout with the flipped kernel
    dx = np.einsum("nohwij,ocij->nchw", _patches(dout), w[:, :, ::-1, ::-1], optimize=True)
    return (np.ascontiguousarray(dx, dtype=x.dtype),
            np.ascontiguousarray(dw, dtype=x.dtype),
            np.ascontiguousarray(db, dtype=x.dtype))
