"""Input validation helpers shared across estimators and pipeline stages."""

import numpy as np


def check_vector(x, name="x", dim=None):
    """Coerce to a 1-D float array and verify finiteness (and dimension, if given)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"{name} must have dimension {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_matrix(x, name="x", dtype=np.float64):
    """Coerce to a 2-D array of the given dtype and verify finiteness."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_positive_int(value, name):
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_in_unit_interval(value, name, open_left=False):
    v = float(value)
    lo_ok = v > 0.0 if open_left else v >= 0.0
    if not (lo_ok and v <= 1.0):
        bound = "(0, 1]" if open_left else "[0, 1]"
        raise ValueError(f"{name} must lie in {bound}, got {value!r}")
    return v
