"""Input validation helpers shared by the estimators and the functional API."""

from __future__ import annotations

import numpy as np


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition.

    ``field`` names the offending argument so callers (and the CLI) can
    report it in machine-readable form.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def check_array(value, field, shape=None, finite=True):
    """Convert ``value`` to a float array and check its shape and finiteness.

    ``shape`` entries set to ``None`` match any extent along that axis.
    """
    arr = np.asarray(value, dtype=float)
    if shape is not None:
        if arr.ndim != len(shape) or any(
            s is not None and a != s for a, s in zip(arr.shape, shape)
        ):
            raise ValidationError(field, f"expected shape {shape}, got {arr.shape}")
    if finite and not np.all(np.isfinite(arr)):
        raise ValidationError(field, "contains non-finite entries")
    return arr


def check_probability(p, field, low=0.0, high=1.0):
    p = float(p)
    if not (low < p < high) or not np.isfinite(p):
        raise ValidationError(field, f"must lie in ({low}, {high}), got {p}")
    return p


def check_positive(x, field):
    x = float(x)
    if not np.isfinite(x) or x <= 0:
        raise ValidationError(field, f"must be positive, got {x}")
    return x


def check_psd(mat, field, tol=1e-10):
    """Check a square matrix is symmetric positive semi-definite."""
    mat = check_array(mat, field)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValidationError(field, f"must be square, got shape {mat.shape}")
    scale = max(1.0, float(np.max(np.abs(mat), initial=0.0)))
    if not np.allclose(mat, mat.T, atol=1e-12 * scale, rtol=0.0):
        raise ValidationError(field, "must be symmetric")
    if mat.size and np.linalg.eigvalsh(mat).min() < -tol * scale:
        raise ValidationError(field, "must be positive semi-definite")
    return mat


def check_rotation(rot, field, tol=1e-9):
    rot = check_array(rot, field, shape=(3, 3))
    if not np.allclose(rot.T @ rot, np.eye(3), atol=tol, rtol=0.0):
        raise ValidationError(field, "rotation must be orthonormal")
    if abs(np.linalg.det(rot) - 1.0) > tol:
        raise ValidationError(field, "rotation must have determinant +1")
    return rot
