"""Hot numeric kernels with backend selection at import time.

Two interchangeable backends provide the convolution and max-pool inner
loops:

* ``cython`` -- compiled direct loops (``splitee.kernels._cykernels``)
* ``numpy``  -- im2col / strided-window formulations

The default is the compiled backend when the extension imported cleanly,
falling back to numpy otherwise.  ``SPLITEE_KERNELS=numpy|cython`` forces
a backend; forcing ``cython`` when the extension is missing is an error.

Both backends compute in float64 with identical tie-breaking (first
maximum wins in pooling), so swapping them changes accumulation order at
most.
"""
import os

from . import numpy_backend

try:
    from . import _cykernels
except ImportError:
    _cykernels = None

_requested = os.environ.get("SPLITEE_KERNELS", "auto")
if _requested == "numpy":
    _impl = numpy_backend
elif _requested == "cython":
    if _cykernels is None:
        raise ImportError(
            "SPLITEE_KERNELS=cython but the compiled extension is not available"
        )
    _impl = _cykernels
elif _requested == "auto":
    _impl = _cykernels if _cykernels is not None else numpy_backend
else:
    raise ValueError(f"unknown SPLITEE_KERNELS value: {_requested!r}")

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward


def backend_name() -> str:
    return "cython" if _impl is _cykernels else "numpy"


def available_backends() -> list[str]:
    names = ["numpy"]
    if _cykernels is not None:
        names.append("cython")
    return names


def get_backend(name: str):
    """Return the backend module by name (used by the kernel benchmark)."""
    if name == "numpy":
        return numpy_backend
    if name == "cython":
        if _cykernels is None:
            raise ValueError("cython backend not built")
        return _cykernels
    raise ValueError(f"unknown backend: {name!r}")
