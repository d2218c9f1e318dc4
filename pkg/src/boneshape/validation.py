"""Input validation helpers used by the public functions and estimators."""
import numpy as np
from sklearn.utils import check_array

from .exceptions import ArgumentError, ValidationError


def check_points(points, name="points", min_points=1, dtype=np.float64):
    """Return ``points`` as a finite float array of shape (n, 3)."""
    try:
        arr = check_array(
            points,
            dtype=dtype,
            ensure_2d=True,
            ensure_all_finite=True,
            ensure_min_samples=min_points,
            copy=False,
        )
    except ValueError as exc:
        raise ValidationError(f"{name}: {exc}") from exc
    if arr.shape[1] != 3:
        raise ValidationError(f"{name} must have shape (n, 3), got {arr.shape}")
    return arr


def check_point(point, name="point"):
    arr = np.asarray(point, dtype=np.float64)
    if arr.shape != (3,):
        raise ValidationError(f"{name} must be a 3D point, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} has non-finite coordinates")
    return arr


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or int(value) != value:
        raise ArgumentError(f"{name} must be an integer, got {value!r}")
    value = int(value)
    if value < minimum:
        raise ArgumentError(f"{name} must be >= {minimum}, got {value}")
    return value


def frozen(arr):
    """Read-only view of ``arr`` (copies when it is not already contiguous)."""
    arr = np.ascontiguousarray(arr)
    if arr.flags.writeable:
        arr = arr.copy()
        arr.flags.writeable = False
    return arr
