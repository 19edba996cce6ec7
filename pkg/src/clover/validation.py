"""Input validation helpers shared across the package.

All numeric state is carried by dense row-major float64 ndarrays. The
helpers here coerce inputs to that representation and enforce the
invariants the rest of the code relies on (finiteness, expected rank,
expected extents).
"""

import numpy as np

from .exceptions import ShapeError

__all__ = ["as_tensor", "check_finite", "check_square", "check_matrix"]


def as_tensor(x, name="array", ndim=None, shape=None, allow_empty=False):
    """Coerce ``x`` to a C-contiguous float64 ndarray and validate it.

    Parameters
    ----------
    name : label used in error messages.
    ndim : required number of dimensions, if any.
    shape : required exact shape, if any; ``None`` entries are wildcards.
    allow_empty : permit zero-length extents (used for rank-0 factor slabs).
    """
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name}: expected {ndim} dimensions, got shape {arr.shape}")
    if shape is not None:
        if len(shape) != arr.ndim or any(
            want is not None and want != got for want, got in zip(shape, arr.shape)
        ):
            raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
    if not allow_empty and arr.size == 0:
        raise ShapeError(f"{name}: empty array (shape {arr.shape})")
    check_finite(arr, name)
    return arr


def check_finite(arr, name="array"):
    if not np.isfinite(arr).all():
        raise ShapeError(f"{name}: contains non-finite values")
    return arr


def check_matrix(x, name="matrix"):
    """Validate a 2-d operand; returns the coerced array."""
    return as_tensor(x, name=name, ndim=2, allow_empty=True)


def check_square(x, name="matrix"):
    arr = check_matrix(x, name)
    if arr.shape[0] != arr.shape[1]:
        raise ShapeError(f"{name}: expected square, got {arr.shape}")
    return arr
