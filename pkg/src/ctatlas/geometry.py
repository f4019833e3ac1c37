"""Grid geometry: voxel lattices with physical spacing, origin and direction.

World coordinates are millimetres in a right-handed RAS frame. A voxel index
``(i, j, k)`` maps to world space as ``origin + direction @ (spacing * index)``.
Axial slices are indexed along the third axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

_ORTHO_TOL = 1e-6


def _as_tuple3(value, cast, name: str) -> tuple:
    vals = tuple(cast(v) for v in value)
    if len(vals) != 3:
        raise ValidationError(f"{name} must have exactly 3 entries, got {len(vals)}")
    return vals


@dataclass(frozen=True, eq=False)
class GridGeometry:
    """Physical geometry of a 3D voxel grid.

    Parameters
    ----------
    dims : tuple of 3 ints
        Number of voxels per axis, each >= 1.
    spacing : tuple of 3 floats
        Millimetres per voxel along each voxel axis, each > 0.
    origin : tuple of 3 floats
        World position (mm) of voxel (0, 0, 0).
    direction : (3, 3) array
        Orthonormal matrix mapping voxel axes to world axes.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "dims", _as_tuple3(self.dims, int, "dims"))
        object.__setattr__(self, "spacing", _as_tuple3(self.spacing, float, "spacing"))
        object.__setattr__(self, "origin", _as_tuple3(self.origin, float, "origin"))
        direction = np.array(self.direction, dtype=np.float64)
        if direction.shape != (3, 3):
            raise ValidationError(f"direction must be 3x3, got {direction.shape}")
        direction.flags.writeable = False
        object.__setattr__(self, "direction", direction)
        if any(d < 1 for d in self.dims):
            raise ValidationError(f"all dims must be >= 1, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ValidationError(f"all spacings must be > 0, got {self.spacing}")
        if not np.isfinite(direction).all() or not all(
            np.isfinite(v) for v in self.origin
        ):
            raise ValidationError("geometry entries must be finite")
        gram = direction.T @ direction
        if not np.allclose(gram, np.eye(3), atol=_ORTHO_TOL):
            raise ValidationError("direction columns must be orthonormal within 1e-6")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dims

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def affine(self) -> np.ndarray:
        """4x4 homogeneous voxel-index -> world-mm matrix."""
        mat = np.eye(4)
        mat[:3, :3] = self.direction @ np.diag(self.spacing)
        mat[:3, 3] = self.origin
        return mat

    def voxel_to_world(self, index) -> np.ndarray:
        """Map voxel indices (possibly fractional) to world mm.

        Accepts a single (3,) index or an (..., 3) array; returns the same
        leading shape with a trailing world coordinate axis.
        """
        idx = np.asarray(index, dtype=np.float64)
        scaled = idx * np.asarray(self.spacing)
        return scaled @ self.direction.T + np.asarray(self.origin)

    def world_to_voxel(self, world) -> np.ndarray:
        """Inverse of :meth:`voxel_to_world` (direction is orthonormal)."""
        pts = np.asarray(world, dtype=np.float64) - np.asarray(self.origin)
        return (pts @ self.direction) / np.asarray(self.spacing)

    def world_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned world bounding box over all eight grid corners."""
        corners = np.array(
            [[i, j, k] for i in (0, self.dims[0] - 1)
             for j in (0, self.dims[1] - 1)
             for k in (0, self.dims[2] - 1)],
            dtype=np.float64,
        )
        world = self.voxel_to_world(corners)
        return world.min(axis=0), world.max(axis=0)

    def is_canonical(self, tol: float = 1e-6) -> bool:
        return bool(np.allclose(self.direction, np.eye(3), atol=tol))


def voxel_to_world(geom: GridGeometry, index) -> np.ndarray:
    """World position (mm) of a voxel index: origin + direction @ (spacing * index)."""
    return geom.voxel_to_world(index)


def world_to_voxel(geom: GridGeometry, world) -> np.ndarray:
    """Voxel index of a world position (mm); exact inverse of voxel_to_world."""
    return geom.world_to_voxel(world)


def geometry_allclose(a: GridGeometry, b: GridGeometry, tol: float = 1e-6) -> bool:
    """True when two geometries have equal dims and metadata within tol."""
    return (
        a.dims == b.dims
        and np.allclose(a.spacing, b.spacing, atol=tol)
        and np.allclose(a.origin, b.origin, atol=tol)
        and np.allclose(a.direction, b.direction, atol=tol)
    )
