"""Hot kernels with a compiled core and a numpy fallback.

The compiled extension is used when it imports; otherwise the numpy
implementation takes over transparently. ``use()`` switches explicitly, which
the tests and the benchmark rely on to compare both.
"""
import logging

from hive3d._kernels import _fallback

try:
    from hive3d._kernels import _native
except ImportError:  # extension not built
    _native = None
    logging.getLogger(__name__).debug("compiled kernels unavailable, using numpy fallback")

_BACKENDS = {"python": _fallback}
if _native is not None:
    _BACKENDS["native"] = _native

_active = _native if _native is not None else _fallback


def available():
    return sorted(_BACKENDS)


def backend():
    return _active.NAME


def use(name):
    """Select a backend by name; returns the previously active name."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown or unavailable kernel backend {name!r}; have {available()}")
    previous = _active.NAME
    _active = _BACKENDS[name]
    return previous


def vol2col(xp, kernel, stride, out_shape):
    return _active.vol2col(xp, kernel, stride, out_shape)


def col2vol(cols, padded_shape, kernel, stride, out_shape):
    return _active.col2vol(cols, tuple(padded_shape), kernel, stride, out_shape)


def maxpool3d_forward(x, window, stride, out_shape):
    return _active.maxpool3d_forward(x, window, stride, out_shape)


def maxpool3d_backward(grad_out, index, in_shape):
    return _active.maxpool3d_backward(grad_out, index, tuple(in_shape))


def stroke_segment(img, x0, y0, x1, y1, half_width, alpha):
    _active.stroke_segment(img, float(x0), float(y0), float(x1), float(y1), float(half_width), float(alpha))
