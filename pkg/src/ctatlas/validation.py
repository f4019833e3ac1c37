"""Input validation helpers shared by the estimator classes and functions."""
from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError

from .errors import ShapeMismatchError, ValidationError
from .geometry import geometry_allclose
from .volume import ImageVolume, LabelVolume


def check_image(vol, name: str = "volume") -> ImageVolume:
    if not isinstance(vol, ImageVolume):
        raise ValidationError(f"{name} must be an ImageVolume, got {type(vol).__name__}")
    return vol


def check_labels(vol, name: str = "labels") -> LabelVolume:
    if not isinstance(vol, LabelVolume):
        raise ValidationError(f"{name} must be a LabelVolume, got {type(vol).__name__}")
    return vol


def check_same_grid(a, b, names: tuple[str, str] = ("first", "second"), tol: float = 1e-6):
    """Require two volumes to live on the same grid (dims, spacing, pose)."""
    if a.geometry.dims != b.geometry.dims or not geometry_allclose(
        a.geometry, b.geometry, tol=tol
    ):
        raise ShapeMismatchError(
            f"{names[0]} grid {a.geometry.dims} does not match "
            f"{names[1]} grid {b.geometry.dims}"
        )


def check_positive(value, name: str, strict: bool = True) -> float:
    value = float(value)
    if not np.isfinite(value) or (value <= 0 if strict else value < 0):
        kind = "positive" if strict else "non-negative"
        raise ValidationError(f"{name} must be {kind}, got {value}")
    return value


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if int(value) != value or int(value) < minimum:
        raise ValidationError(f"{name} must be an integer >= {minimum}, got {value}")
    return int(value)


def check_is_fitted(estimator, attribute: str) -> None:
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first"
        )
