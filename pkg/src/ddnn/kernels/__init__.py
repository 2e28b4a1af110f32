"""Hot numeric kernels with two interchangeable backends.

The backend is picked once at import from the ``DDNN_BACKEND`` environment
variable (``numba`` or ``numpy``). ``numba`` is the default when it imports;
``set_backend`` switches at runtime, which the tests and the benchmark use.

Kernel contract (all arrays float32, C-contiguous, NCHW):

* ``conv3x3_forward(x, w)``: stride 1, zero padding 1, ``w`` is (F, C, 3, 3).
* ``conv3x3_backward_input(g, w)`` / ``conv3x3_backward_weight(x, g)``.
* ``maxpool3x3s2_forward(x)`` returns ``(out, idx)`` where ``idx`` holds the
  flat ``y * W + x`` position of the first maximum in row-major window order.
* ``maxpool3x3s2_backward(g, idx, H, W)`` scatters ``g`` back through ``idx``.
"""

import os

from . import _numpy

try:
    from . import _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

BACKENDS = ("numba", "numpy")

_impl = None


def set_backend(name):
    global _impl
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; expected one of {BACKENDS}")
    if name == "numba" and _numba is None:
        raise RuntimeError("numba backend requested but numba is not importable")
    _impl = _numba if name == "numba" else _numpy


def get_backend():
    return "numba" if _impl is _numba else "numpy"


def _default_backend():
    env = os.environ.get("DDNN_BACKEND", "").strip().lower()
    if env:
        return env
    return "numba" if _numba is not None else "numpy"


set_backend(_default_backend())


def conv3x3_forward(x, w):
    return _impl.conv3x3_forward(x, w)


def conv3x3_backward_input(g, w):
    return _impl.conv3x3_backward_input(g, w)


def conv3x3_backward_weight(x, g):
    return _impl.conv3x3_backward_weight(x, g)


def maxpool3x3s2_forward(x):
    return _impl.maxpool3x3s2_forward(x)


def maxpool3x3s2_backward(g, idx, h, w):
    return _impl.maxpool3x3s2_backward(g, idx, h, w)
