"""Input checks shared by the fitters."""

import numpy as np
from sklearn.utils.validation import check_array


def as_1d(values, name="x"):
    arr = check_array(values, ensure_2d=False, dtype=np.float64, ensure_all_finite=True, input_name=name)
    if arr.ndim == 2:
        if arr.shape[1] != 1:
            raise ValueError(f"{name} must be 1-D or a single column, got shape {arr.shape}")
        arr = arr[:, 0]
    return arr


def check_series(x, y, min_points, strictly_increasing=False):
    x = as_1d(x, "x")
    y = as_1d(y, "y")
    if x.shape != y.shape:
        raise ValueError(f"x and y lengths differ: {x.size} vs {y.size}")
    if x.size < min_points:
        raise ValueError(f"need at least {min_points} points, got {x.size}")
    if strictly_increasing and np.any(np.diff(x) <= 0):
        raise ValueError("x must be strictly increasing")
    return x, y


def poisson_weights(y):
    return 1.0 / np.maximum(y, 1.0)
