"""Kernel backend selection.

The compiled Cython extension ``tea._conv`` is used when it imports; otherwise
the numpy implementation in ``tea._conv_py`` is used. Setting the environment
variable ``TEA_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _conv_py

BACKEND = "python"
_impl = _conv_py

if os.environ.get("TEA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _conv as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"


def conv3x3_forward(x, w, b):
    return _impl.conv3x3_forward(x, w, b)


def conv3x3_backward(x, w, dout):
    return _impl.conv3x3_backward(x, w, dout)


def python_kernels():
    return _conv_py


def compiled_kernels():
    """The compiled module, or None when it is not available."""
    try:
        from . import _conv
    except ImportError:
        return None
    return _conv
