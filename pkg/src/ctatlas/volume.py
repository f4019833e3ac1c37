"""Volumetric data model: intensity and label volumes, reorientation, resampling."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import (
    ShapeMismatchError,
    UnsupportedOrientationError,
    ValidationError,
)
from .geometry import GridGeometry, geometry_allclose

DEFAULT_PADDING_HU = -1024.0  # air


@dataclass(frozen=True, eq=False)
class ImageVolume:
    """Dense scalar intensity volume (Hounsfield units, float32).

    Data is immutable after construction and shaped ``geometry.dims``.
    ``padding_value`` is the HU value reported for samples outside the
    volume's domain (defaults to air).
    """

    geometry: GridGeometry
    data: np.ndarray
    padding_value: float = DEFAULT_PADDING_HU

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.shape != self.geometry.dims:
            raise ShapeMismatchError(
                f"data shape {arr.shape} does not match dims {self.geometry.dims}"
            )
        if not np.isfinite(arr).all():
            raise ValidationError("intensity data must be finite")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "padding_value", float(self.padding_value))

    def with_data(self, data: np.ndarray) -> "ImageVolume":
        return replace(self, data=data)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Dense non-negative integer label volume; label 0 is background."""

    geometry: GridGeometry
    data: np.ndarray
    label_names: dict[int, str] | None = field(default=None)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.shape != self.geometry.dims:
            raise ShapeMismatchError(
                f"data shape {arr.shape} does not match dims {self.geometry.dims}"
            )
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.allclose(arr, np.round(arr)):
                raise ValidationError("label data must be integral")
            arr = np.round(arr)
        if arr.size and arr.min() < 0:
            raise ValidationError("labels must be non-negative")
        if arr.size and arr.max() > np.iinfo(np.uint16).max:
            raise ValidationError("labels must fit in uint16")
        arr = np.ascontiguousarray(arr.astype(np.uint16))
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    def labels_present(self) -> np.ndarray:
        return np.unique(self.data)

    def with_data(self, data: np.ndarray) -> "LabelVolume":
        return replace(self, data=data)


def _snap_direction(direction: np.ndarray, tol: float):
    """Closest signed permutation to ``direction``.

    Returns (perm, signs) where voxel axis j feeds world axis perm[j] with
    the given sign, or raises when no signed permutation is within ``tol``
    of every matrix entry.
    """
    perm = np.full(3, -1, dtype=int)
    signs = np.zeros(3)
    snapped = np.zeros((3, 3))
    for j in range(3):
        i = int(np.argmax(np.abs(direction[:, j])))
        perm[j] = i
        signs[j] = 1.0 if direction[i, j] >= 0 else -1.0
        snapped[i, j] = signs[j]
    if sorted(perm) != [0, 1, 2]:
        raise UnsupportedOrientationError(
            "direction matrix is not an axis-aligned signed permutation"
        )
    if np.max(np.abs(direction - snapped)) > tol:
        raise UnsupportedOrientationError(
            f"direction deviates from the nearest signed permutation by more "
            f"than {tol} per entry"
        )
    return perm, signs


def reorient_canonical(vol, tol: float = 0.2):
    """Permute/flip axes so the direction matrix becomes the identity (RAS).

    Works on :class:`ImageVolume` and :class:`LabelVolume`. Voxel values are
    only rearranged, never interpolated; each voxel keeps its world position
    (exactly so for exact signed-permutation inputs). Oblique volumes are
    rejected with :class:`UnsupportedOrientationError`.
    """
    geom = vol.geometry
    if geom.is_canonical():
        return vol
    perm, signs = _snap_direction(geom.direction, tol)

    # new array axis i <- old voxel axis j with perm[j] == i
    axes = [int(np.where(perm == i)[0][0]) for i in range(3)]
    data = np.transpose(vol.data, axes)
    corner = [0, 0, 0]
    for i, j in enumerate(axes):
        if signs[j] < 0:
            data = np.flip(data, axis=i)
            corner[j] = geom.dims[j] - 1
    new_origin = geom.voxel_to_world(corner)
    new_geom = GridGeometry(
        dims=tuple(geom.dims[j] for j in axes),
        spacing=tuple(geom.spacing[j] for j in axes),
        origin=tuple(new_origin),
        direction=np.eye(3),
    )
    return replace(vol, geometry=new_geom, data=np.ascontiguousarray(data))


def sample_at_voxels(vol, coords: np.ndarray, interp: str = "trilinear",
                     padding: str = "constant") -> np.ndarray:
    """Sample a volume at fractional voxel coordinates of its own grid.

    ``coords`` is (3, ...) in voxel units. Interpolation clamps at the grid
    edge; with ``padding="constant"`` coordinates outside ``[0, dim-1]`` on
    any axis return the padding value (background 0 for labels), while
    ``padding="replicate"`` keeps the clamped border sample. Replication
    adds no synthetic intensity edge at the domain boundary, which matters
    when self-similarity descriptors are computed on the result.
    """
    if interp not in ("trilinear", "nearest"):
        raise ValidationError(f"unknown interpolation {interp!r}")
    if padding not in ("constant", "replicate"):
        raise ValidationError(f"unknown padding mode {padding!r}")
    is_labels = isinstance(vol, LabelVolume)
    order = 0 if (interp == "nearest" or is_labels) else 1
    data = vol.data if not is_labels else vol.data.astype(np.float32)
    out = ndimage.map_coordinates(data, coords, order=order, mode="nearest")
    if padding == "constant":
        dims = np.array(vol.geometry.dims)
        inside = np.ones(coords.shape[1:], dtype=bool)
        for ax in range(3):
            inside &= (coords[ax] >= 0) & (coords[ax] <= dims[ax] - 1)
        pad = 0.0 if is_labels else vol.padding_value
        out = np.where(inside, out, pad)
    if is_labels:
        return np.round(out).astype(np.uint16)
    return out.astype(np.float32)


def resample(vol, target: GridGeometry, interp: str = "trilinear"):
    """Resample a volume onto ``target`` geometry by world position.

    Each output voxel is sampled at its world position from the input using
    trilinear or nearest interpolation; label volumes always use nearest.
    World positions outside the input domain receive the padding value.
    """
    if geometry_allclose(vol.geometry, target) and vol.geometry.dims == target.dims:
        return replace(vol, geometry=target)
    idx = np.indices(target.dims, dtype=np.float64)  # (3, X, Y, Z)
    world = target.voxel_to_world(np.moveaxis(idx, 0, -1))
    coords = np.moveaxis(vol.geometry.world_to_voxel(world), -1, 0)
    out = sample_at_voxels(vol, coords, interp=interp)
    return replace(vol, geometry=target, data=out)
