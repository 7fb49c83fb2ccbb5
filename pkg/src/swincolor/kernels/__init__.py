"""Convolution data-movement kernels (im2col / col2im).

Two interchangeable backends: a compiled Cython extension (``_native``) and a
pure numpy fallback.  The fastest available one is selected at import time;
``BACKEND`` records which.  Both produce bit-identical results, which the test
suite asserts.
"""

from . import numpy_backend

try:
    from . import _native

    im2col = _native.im2col
    col2im = _native.col2im
    BACKEND = "native"
except ImportError:
    im2col = numpy_backend.im2col
    col2im = numpy_backend.col2im
    BACKEND = "numpy"


def use_backend(name):
    """Force a backend ("native" or "numpy"); used by tests and benchmarks.

    Returns the module implementing it.  Raises ImportError if the native
    extension was requested but is not built.
    """
    global im2col, col2im, BACKEND
    if name == "numpy":
        mod = numpy_backend
    elif name == "native":
        from . import _native as mod
    else:
        raise ValueError(f"unknown kernel backend: {name!r}")
    im2col = mod.im2col
    col2im = mod.col2im
    BACKEND = name
    return mod
