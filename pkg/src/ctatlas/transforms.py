"""Spatial transforms: affine maps, dense displacement fields, label transfer.

Everything follows the pull-back convention: the output voxel at position x
samples the input at the transformed position (A^-1 x for affines,
x + field(x) for displacement fields). Displacement fields store vectors in
voxel units of the fixed grid they were estimated on; unit conversions
happen only at the geometry boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (
    FormatError,
    NonInvertibleFieldError,
    ShapeMismatchError,
    SingularTransformError,
    UnsupportedShapeError,
    ValidationError,
)
from .geometry import GridGeometry, geometry_allclose
from .nifti import _geometry_from_affine, _read_raw, _write_raw
from .volume import ImageVolume, LabelVolume, sample_at_voxels

_DET_MIN = 0.2
_DET_MAX = 5.0


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """Homogeneous 4x4 world-mm to world-mm transform (12 degrees of freedom)."""

    matrix: np.ndarray

    def __post_init__(self):
        mat = np.array(self.matrix, dtype=np.float64)
        if mat.shape != (4, 4):
            raise ValidationError(f"affine matrix must be 4x4, got {mat.shape}")
        if not np.isfinite(mat).all():
            raise ValidationError("affine matrix must be finite")
        if not np.allclose(mat[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise ValidationError(f"affine bottom row must be (0,0,0,1), got {mat[3]}")
        mat[3] = [0.0, 0.0, 0.0, 1.0]
        det = abs(float(np.linalg.det(mat[:3, :3])))
        if not _DET_MIN <= det <= _DET_MAX:
            raise ValidationError(
                f"|det| of the linear part must lie in [{_DET_MIN}, {_DET_MAX}], "
                f"got {det:.6g}"
            )
        mat.flags.writeable = False
        object.__setattr__(self, "matrix", mat)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(matrix=np.eye(4))

    @classmethod
    def from_params(cls, translation=(0, 0, 0), rotation_deg=(0, 0, 0),
                    scale=(1, 1, 1), shear=(0, 0, 0), center=(0, 0, 0)
                    ) -> "AffineTransform":
        """12-DOF transform about ``center``: x -> R @ Sh @ S @ (x - c) + c + t.

        Rotations are extrinsic about the world x, y, z axes (applied in that
        order); shear entries fill the (xy, xz, yz) upper triangle.
        """
        rx, ry, rz = np.deg2rad(np.asarray(rotation_deg, dtype=np.float64))
        cx, sx = np.cos(rx), np.sin(rx)
        cy, sy = np.cos(ry), np.sin(ry)
        cz, sz = np.cos(rz), np.sin(rz)
        r_x = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        r_y = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        r_z = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        sh = np.eye(3)
        sh[0, 1], sh[0, 2], sh[1, 2] = shear
        lin = r_z @ r_y @ r_x @ sh @ np.diag(np.asarray(scale, dtype=np.float64))
        center = np.asarray(center, dtype=np.float64)
        mat = np.eye(4)
        mat[:3, :3] = lin
        mat[:3, 3] = np.asarray(translation, dtype=np.float64) + center - lin @ center
        return cls(matrix=mat)

    def inverse(self) -> "AffineTransform":
        return AffineTransform(matrix=_safe_inverse(self.matrix))

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """self after other: (self @ other)(x) = self(other(x))."""
        return AffineTransform(matrix=self.matrix @ other.matrix)

    def apply_points(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix[:3, :3].T + self.matrix[:3, 3]


def _safe_inverse(matrix: np.ndarray) -> np.ndarray:
    det = float(np.linalg.det(matrix[:3, :3]))
    if abs(det) < 1e-12:
        raise SingularTransformError(f"affine is singular (det={det:.3g})")
    return np.linalg.inv(matrix)


def save_affine(transform: AffineTransform, path) -> None:
    """Serialize as 16 numbers, row major, world-mm convention."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, transform.matrix, fmt="%.17g")


def load_affine(path) -> AffineTransform:
    try:
        values = np.loadtxt(path, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read affine from {path}: {exc}") from exc
    if values.size != 16:
        raise FormatError(f"{path}: expected 16 numbers, got {values.size}")
    return AffineTransform(matrix=values.reshape(4, 4))


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-node displacement vectors (voxel units of ``geometry``).

    ``resolution_tag`` distinguishes coarse control grids from dense
    per-voxel fields. Fields returned by ``invert_field`` carry the
    composed-residual statistics of the inversion.
    """

    geometry: GridGeometry
    vectors: np.ndarray
    resolution_tag: str = "dense"
    residual_mean: float | None = None
    residual_max: float | None = None

    def __post_init__(self):
        arr = np.asarray(self.vectors, dtype=np.float32)
        if arr.shape != self.geometry.dims + (3,):
            raise ShapeMismatchError(
                f"vector array shape {arr.shape} does not match "
                f"{self.geometry.dims + (3,)}"
            )
        if not np.isfinite(arr).all():
            raise ValidationError("displacement vectors must be finite")
        if self.resolution_tag not in ("dense", "control"):
            raise ValidationError(f"unknown resolution_tag {self.resolution_tag!r}")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "vectors", arr)

    @classmethod
    def zero(cls, geometry: GridGeometry) -> "DisplacementField":
        return cls(geometry=geometry,
                   vectors=np.zeros(geometry.dims + (3,), dtype=np.float32))

    def magnitudes(self) -> np.ndarray:
        return np.sqrt((self.vectors.astype(np.float64) ** 2).sum(axis=-1))


def write_field(field: DisplacementField, path) -> None:
    """Store a dense field as a 4D (x, y, z, 3) volume in the fixed geometry."""
    _write_raw(path, field.vectors.astype(np.float32), field.geometry)


def read_field(path) -> DisplacementField:
    hdr, arr = _read_raw(path)
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise UnsupportedShapeError(
            f"{path}: displacement field must be (x, y, z, 3), got {arr.shape}"
        )
    from .nifti import _affine_from_header

    geom = _geometry_from_affine(_affine_from_header(hdr), arr.shape[:3])
    return DisplacementField(geometry=geom, vectors=arr.astype(np.float32))


def _target_voxel_coords(target: GridGeometry) -> np.ndarray:
    return np.indices(target.dims, dtype=np.float64)


def _world_grid(target: GridGeometry) -> np.ndarray:
    idx = np.moveaxis(_target_voxel_coords(target), 0, -1)
    return target.voxel_to_world(idx)


def apply_affine(vol, transform: AffineTransform, target: GridGeometry | None = None,
                 interp: str = "trilinear", padding: str = "constant"):
    """Warp a volume by an affine: output(x) = input(A^-1 x), pull-back.

    ``target`` defaults to the input geometry. Labels always resample with
    nearest neighbour, so no new label values can appear.
    """
    target = target or vol.geometry
    inv = _safe_inverse(transform.matrix)
    world = _world_grid(target)
    src_world = world @ inv[:3, :3].T + inv[:3, 3]
    coords = np.moveaxis(vol.geometry.world_to_voxel(src_world), -1, 0)
    out = sample_at_voxels(vol, coords, interp=interp, padding=padding)
    return replace(vol, geometry=target, data=out)


def apply_field(vol, field: DisplacementField, interp: str = "trilinear",
                padding: str = "constant"):
    """Warp a volume by a dense field: output(i) = input(i + field(i))."""
    if field.resolution_tag != "dense":
        raise ValidationError("apply_field requires a dense displacement field")
    if vol.geometry.dims != field.geometry.dims or not geometry_allclose(
        vol.geometry, field.geometry
    ):
        raise ShapeMismatchError(
            f"volume grid {vol.geometry.dims} does not match field grid "
            f"{field.geometry.dims}"
        )
    coords = _target_voxel_coords(field.geometry)
    coords += np.moveaxis(field.vectors.astype(np.float64), -1, 0)
    out = sample_at_voxels(vol, coords, interp=interp, padding=padding)
    return replace(vol, data=out)


def _sample_vectors(vectors: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of a vector field at voxel coords (3, ...)."""
    return np.stack(
        [
            ndimage.map_coordinates(
                vectors[..., c].astype(np.float64), coords, order=1, mode="nearest"
            )
            for c in range(3)
        ],
        axis=-1,
    )


def compose_affine_field(transform: AffineTransform, field: DisplacementField,
                         target: GridGeometry | None = None) -> DisplacementField:
    """Single field psi with apply_field(v, psi) == apply_field(apply_affine(v, A), f).

    The identity A returns the field unchanged; a zero field returns the
    displacement form of A sampled at voxel centers.
    """
    if field.resolution_tag != "dense":
        raise ValidationError("compose_affine_field requires a dense field")
    target = target or field.geometry
    if not geometry_allclose(target, field.geometry):
        raise ShapeMismatchError("composition target must match the field geometry")
    inv = _safe_inverse(transform.matrix)
    idx = np.moveaxis(_target_voxel_coords(target), 0, -1)
    pulled = idx + field.vectors.astype(np.float64)
    world = target.voxel_to_world(pulled)
    src_world = world @ inv[:3, :3].T + inv[:3, 3]
    psi = target.world_to_voxel(src_world) - idx
    return DisplacementField(geometry=target, vectors=psi.astype(np.float32))


def warp_volume(vol, transform: AffineTransform | None,
                field: DisplacementField | None,
                target: GridGeometry | None = None, interp: str = "trilinear",
                padding: str = "constant"):
    """Warp through affine and/or field with a single interpolation.

    Equivalent to apply_affine followed by apply_field but samples the
    original volume once: output(i) = input(A^-1 world(i + f(i))).
    """
    if field is not None:
        target = target or field.geometry
        if not geometry_allclose(target, field.geometry):
            raise ShapeMismatchError("warp target must match the field geometry")
    elif target is None:
        target = vol.geometry
    idx = np.moveaxis(_target_voxel_coords(target), 0, -1)
    if field is not None:
        idx = idx + field.vectors.astype(np.float64)
    world = target.voxel_to_world(idx)
    if transform is not None:
        inv = _safe_inverse(transform.matrix)
        world = world @ inv[:3, :3].T + inv[:3, 3]
    coords = np.moveaxis(vol.geometry.world_to_voxel(world), -1, 0)
    out = sample_at_voxels(vol, coords, interp=interp, padding=padding)
    return replace(vol, geometry=target, data=out)


def invert_field(field: DisplacementField, max_iter: int = 30,
                 tol: float = 0.01) -> DisplacementField:
    """Fixed-point field inversion: g <- -f(x + g(x)).

    Iterates until the mean update falls below ``tol`` voxels or ``max_iter``
    is reached; the returned field carries the mean/max of the composition
    residual ||f(x + g(x)) + g(x)||. Divergence (mean residual increasing
    for 5 consecutive iterations) raises
    :class:`~ctatlas.errors.NonInvertibleFieldError`.
    """
    if field.resolution_tag != "dense":
        raise ValidationError("invert_field requires a dense displacement field")
    f = field.vectors.astype(np.float64)
    base = _target_voxel_coords(field.geometry)
    g = -f
    prev_residual = np.inf
    rising = 0
    for _ in range(max_iter):
        coords = base + np.moveaxis(g, -1, 0)
        f_at = _sample_vectors(field.vectors, coords)
        g_new = -f_at
        update = float(np.mean(np.linalg.norm(g_new - g, axis=-1)))
        residual = float(np.mean(np.linalg.norm(f_at + g_new, axis=-1)))
        g = g_new
        if residual > prev_residual + 1e-12:
            rising += 1
            if rising >= 5:
                res = _residual_stats(field, g, base)
                raise NonInvertibleFieldError(
                    "field inversion diverged (residual rose for 5 iterations)",
                    residual_mean=res[0], residual_max=res[1],
                )
        else:
            rising = 0
        prev_residual = residual
        if update < tol:
            break
    mean_r, max_r = _residual_stats(field, g, base)
    return DisplacementField(
        geometry=field.geometry, vectors=g.astype(np.float32),
        resolution_tag="dense", residual_mean=mean_r, residual_max=max_r,
    )


def _residual_stats(field: DisplacementField, g: np.ndarray,
                    base: np.ndarray) -> tuple[float, float]:
    coords = base + np.moveaxis(g, -1, 0)
    res = _sample_vectors(field.vectors, coords) + g
    norms = np.linalg.norm(res, axis=-1)
    return float(norms.mean()), float(norms.max())


def transfer_labels_inverse(atlas_labels: LabelVolume, transform: AffineTransform,
                            field: DisplacementField,
                            subject_geom: GridGeometry) -> LabelVolume:
    """Map atlas labels back to the subject grid through the inverse transform.

    The forward registration maps fixed-space points x to subject-space
    points A^-1 world(x + f(x)); labels travel the other way, so each
    subject voxel y looks up the atlas at w2v(A y) + f^-1(w2v(A y)).
    """
    if not geometry_allclose(atlas_labels.geometry, field.geometry):
        raise ShapeMismatchError("atlas labels must live on the field's grid")
    inverse = invert_field(field)
    idx = np.moveaxis(np.indices(subject_geom.dims, dtype=np.float64), 0, -1)
    world = subject_geom.voxel_to_world(idx)
    fixed_world = transform.apply_points(world)
    fixed_vox = field.geometry.world_to_voxel(fixed_world)
    coords = np.moveaxis(fixed_vox, -1, 0)
    atlas_vox = fixed_vox + _sample_vectors(inverse.vectors, coords)
    out = sample_at_voxels(atlas_labels, np.moveaxis(atlas_vox, -1, 0),
                           interp="nearest")
    return LabelVolume(geometry=subject_geom, data=out,
                       label_names=atlas_labels.label_names)
