"""Small input-validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


class ValidationError(ValueError):
    """Input data violates a documented invariant."""


def check_array(name, arr, *, shape=None, ndim=None, finite=False):
    """Validate shape/ndim/finiteness of ``arr``; returns it unchanged."""
    arr = np.asarray(arr)
    if ndim is not None and arr.ndim != ndim:
        raise ValidationError(f"{name}: expected {ndim} dims, got {arr.ndim}")
    if shape is not None:
        expect = tuple(shape)
        if tuple(arr.shape) != expect:
            raise ValidationError(f"{name}: expected shape {expect}, got {arr.shape}")
    if finite and not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: contains non-finite values")
    return arr


def check_in_range(name, arr, lo, hi):
    arr = np.asarray(arr)
    amin, amax = float(arr.min()), float(arr.max())
    if amin < lo or amax > hi:
        raise ValidationError(
            f"{name}: values must lie in [{lo}, {hi}], got [{amin:.6g}, {amax:.6g}]"
        )
    return arr


def check_positive(name, value):
    if not value > 0:
        raise ValidationError(f"{name}: must be > 0, got {value}")
    return value


def check_unit_rows(name, mat, tol=1e-6):
    mat = np.asarray(mat)
    norms = np.linalg.norm(mat.reshape(-1, mat.shape[-1]), axis=-1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ValidationError(f"{name}: rows must be unit-norm within {tol}")
    return mat


def check_rotation(name, R, tol=1e-6):
    R = check_array(name, R, shape=(3, 3), finite=True)
    if not np.allclose(R.T @ R, np.eye(3), atol=tol):
        raise ValidationError(f"{name}: matrix is not orthonormal within {tol}")
    return R
