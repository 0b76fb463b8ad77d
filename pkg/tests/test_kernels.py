import os
import subprocess
import sys

import numpy as np
import pytest

from tea import kernels

compiled = kernels.compiled_kernels()
needs_compiled = pytest.mark.skipif(compiled is None, reason="extension not built")
SHAPES = [(2, 1, 4, 4, 3), (3, 4, 6, 2, 5), (1, 2, 1, 1, 1)]  # n, cin, h, w, cout


def _case(shape, dtype, seed=0):
    n, cin, h, w, cout = shape
    g = np.random.default_rng(seed)
    return (g.standard_normal((n, cin, h, w)).astype(dtype),
            g.standard_normal((cout, cin, 3, 3)).astype(dtype),
            g.standard_normal(cout).astype(dtype),
            g.standard_normal((n, cout, h, w)).astype(dtype))


def _direct(x, w, b):
    """Loop oracle: zero-padded 3x3 cross-correlation."""
    n, cin, h, wd = x.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, w.shape[0], h, wd))
    for i in range(h):
        for j in range(wd):
            patch = xp[:, :, i:i + 3, j:j + 3]
            out[:, :, i, j] = np.einsum("ncuv,ocuv->no", patch, w) + b
    return out


@pytest.mark.parametrize("shape", SHAPES)
def test_python_matches_loop_oracle(shape):
    x, w, b, _ = _case(shape, np.float64)
    np.testing.assert_allclose(kernels.python_kernels().conv3x3_forward(x, w, b), _direct(x, w, b),
                               rtol=1e-12, atol=1e-12)


@needs_compiled
@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-4)])
def test_backends_agree(shape, dtype, tol):
    x, w, b, dout = _case(shape, dtype)
    py, cy = kernels.python_kernels(), compiled
    yp, yc = py.conv3x3_forward(x, w, b), cy.conv3x3_forward(x, w, b)
    assert yc.dtype == dtype and yc.shape == yp.shape
    np.testing.assert_allclose(yc, yp, rtol=tol, atol=tol)
    for gp, gc in zip(py.conv3x3_backward(x, w, dout), cy.conv3x3_backward(x, w, dout)):
        assert gc.dtype == dtype and gc.shape == gp.shape
        np.testing.assert_allclose(gc, gp, rtol=tol, atol=tol)


@needs_compiled
def test_compiled_is_reproducible():
    x, w, b, dout = _case((4, 3, 5, 5, 2), np.float32, seed=3)
    a = compiled.conv3x3_backward(x, w, dout)
    c = compiled.conv3x3_backward(x, w, dout)
    assert all(p.tobytes() == q.tobytes() for p, q in zip(a, c))


@pytest.mark.parametrize("flag,expected", [("1", "python"), ("", None)])
def test_env_selects_backend(flag, expected):
    env = dict(os.environ, TEA_PURE_PYTHON=flag)
    out = subprocess.run([sys.executable, "-c", "from tea import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True).stdout.strip()
    assert out == (expected or ("cython" if compiled is not None else "python"))
