"""Estimator base class and array validation helpers.

The interpolators in this package follow the familiar fit/predict
convention: hyperparameters are constructor arguments, ``fit`` learns
state from data and stores it on attributes ending in an underscore,
``predict`` maps new coordinates to values. ``get_params`` and
``set_params`` round-trip the constructor arguments so estimators can
be cloned and configured generically. No sklearn dependency; the
convention is small enough to carry locally.
"""

from __future__ import annotations

import inspect

import numpy as np

from .errors import ShapeError, ValidationError


class BaseEstimator:
    """Minimal fit/predict estimator contract."""

    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        names = [p.name for p in sig.parameters.values()
                 if p.name != "self" and p.kind != p.VAR_KEYWORD]
        return sorted(names)

    def get_params(self) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "BaseEstimator":
        valid = self._param_names()
        for key, value in params.items():
            if key not in valid:
                raise ValidationError(
                    f"unknown parameter {key!r} for {type(self).__name__}; "
                    f"valid parameters are {valid}")
            setattr(self, key, value)
        return self

    def _check_fitted(self, *attrs: str) -> None:
        for attr in attrs:
            if getattr(self, attr, None) is None:
                raise ValidationError(
                    f"{type(self).__name__} is not fitted; call fit() first")


def check_coords(coords, name: str = "coords") -> np.ndarray:
    """Validate an (n, 2) array of latitude/longitude degrees."""
    arr = np.asarray(coords, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ShapeError(f"{name} must have shape (n, 2), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains non-finite entries")
    if np.abs(arr[:, 0]).max(initial=0.0) > 90.0:
        raise ValidationError(f"{name} latitude out of [-90, 90]")
    if np.abs(arr[:, 1]).max(initial=0.0) > 180.0:
        raise ValidationError(f"{name} longitude out of [-180, 180]")
    return arr


def check_values(values, n: int | None = None, name: str = "values") -> np.ndarray:
    """Validate a 1-d array of finite observations."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-d, got shape {arr.shape}")
    if arr.size == 0:
        raise ValidationError(f"{name} is empty; need at least one observation")
    if n is not None and arr.shape[0] != n:
        raise ShapeError(f"{name} has {arr.shape[0]} entries, expected {n}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains non-finite entries")
    return arr
