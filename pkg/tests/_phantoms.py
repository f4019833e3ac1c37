"""Synthetic CT phantoms and cohorts shared across the test suite.

The base phantom is three anisotropic, rotated ellipsoids of distinct HU on
an air background, rendered analytically so that a volume under any world
map is exact (no resampling error in the ground truth). All renderers place
the bodies relative to the geometry's world bounds, so the same scene works
at any grid size.
"""
from __future__ import annotations

import json

import numpy as np

from ctatlas import GridGeometry, ImageVolume, LabelVolume
from ctatlas.nifti import write_volume

# (center frac, semi-axis frac, rotation deg, HU)
BODIES = [
    ((0.42, 0.40, 0.52), (0.30, 0.20, 0.14), (15, -25, 40), 60.0),
    ((0.62, 0.60, 0.38), (0.12, 0.19, 0.09), (-30, 10, -55), 700.0),
    ((0.38, 0.64, 0.62), (0.10, 0.075, 0.16), (50, 35, 20), -650.0),
]


def rot3(deg):
    rx, ry, rz = np.deg2rad(deg)
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def hu_at(world, lo, extent):
    """HU of the scene at world points; sigmoid shells, integer-quantized."""
    out = np.full(world.shape[:-1], -1000.0)
    for cf, sf, ang, hu in BODIES:
        center = lo + np.asarray(cf) * extent
        semi = np.asarray(sf) * extent
        local = (world - center) @ rot3(ang)
        rho = np.sqrt(((local / semi) ** 2).sum(-1) + 1e-12)
        out = out + (hu - out) / (1.0 + np.exp((rho - 1.0) * semi.mean() / 1.3))
    return np.round(out)


def labels_at(world, lo, extent):
    lab = np.zeros(world.shape[:-1], dtype=np.int16)
    for k, (cf, sf, ang, _hu) in enumerate(BODIES):
        center = lo + np.asarray(cf) * extent
        semi = np.asarray(sf) * extent
        local = (world - center) @ rot3(ang)
        lab[((local / semi) ** 2).sum(-1) <= 1.0] = k + 1
    return lab


def centered_geometry(dims, spacing=1.0):
    """Unit-spacing grid with the world origin at the volume center."""
    dims = (dims,) * 3 if np.isscalar(dims) else tuple(dims)
    origin = tuple(-(d - 1) * spacing / 2.0 for d in dims)
    return GridGeometry(dims=dims, spacing=(spacing,) * 3, origin=origin)


def world_grid(geom, matrix=None):
    idx = np.stack(
        np.meshgrid(*[np.arange(d) for d in geom.dims], indexing="ij"),
        axis=-1,
    ).astype(np.float64)
    world = idx * np.asarray(geom.spacing) + np.asarray(geom.origin)
    if matrix is not None:
        matrix = np.asarray(matrix, dtype=np.float64)
        world = world @ matrix[:3, :3].T + matrix[:3, 3]
    lo = np.asarray(geom.origin, dtype=np.float64)
    extent = np.asarray(geom.dims) * np.asarray(geom.spacing)
    return world, lo, extent


def render(geom, matrix=None):
    """Phantom on ``geom``; with ``matrix`` G the content is scene(G @ w),
    so registering (render(geom), render(geom, G)) must recover exactly G."""
    world, lo, extent = world_grid(geom, matrix)
    return ImageVolume(geometry=geom,
                       data=hu_at(world, lo, extent).astype(np.float32))


def render_labels(geom, matrix=None):
    world, lo, extent = world_grid(geom, matrix)
    return LabelVolume(geometry=geom, data=labels_at(world, lo, extent))


def draw_affine_params(rng):
    """Random 12-DOF map: rotations <= 10 deg, scales in [0.9, 1.1],
    translations <= 5 voxels (each axis >= 2 so the map is never trivial),
    shears <= 0.05, about the world origin (the volume center)."""
    return dict(
        translation=tuple(rng.uniform(2.0, 5.0, 3) * rng.choice([-1.0, 1.0], 3)),
        rotation_deg=tuple(rng.uniform(-10, 10, 3)),
        scale=tuple(rng.uniform(0.9, 1.1, 3)),
        shear=tuple(rng.uniform(-0.05, 0.05, 3)),
        center=(0.0, 0.0, 0.0),
    )


def sinusoid_field(rng, dims, amp_lo=3.0, amp_hi=3.45):
    """Smooth sinusoidal displacement (callable on world points, voxels).

    Each component rides a full-period sine along one driving axis; the
    amplitude vector keeps the pointwise magnitude below 6 voxels and the
    Jacobian well clear of folding.
    """
    period = float(max(dims))
    amp = rng.uniform(amp_lo, amp_hi, 3) * rng.choice([-1.0, 1.0], 3)
    phase = rng.uniform(0, 2 * np.pi, 3)
    drive = rng.permutation(3)

    def field(world):
        out = np.zeros_like(world)
        for c in range(3):
            out[..., c] = amp[c] * np.sin(
                2 * np.pi * world[..., drive[c]] / period + phase[c]
            )
        return out

    return field


def render_warped(geom, field):
    """Analytic render of scene(w + u(w)) plus its foreground mask."""
    world, lo, extent = world_grid(geom)
    moved = world + field(world)
    vol = ImageVolume(geometry=geom,
                      data=hu_at(moved, lo, extent).astype(np.float32))
    return vol, labels_at(moved, lo, extent) > 0


def write_scores(path, scores):
    path.write_text(json.dumps(
        {"scores": [float(s) for s in scores], "n_slices": len(scores)}
    ) + "\n")


def distractor_cohort(root, n_subjects=3, xy=48, abdomen=40, chest=60,
                      seed=11):
    """Extended-FOV cohort: abdomen bodies plus decoy copies in the chest.

    The template covers the abdomen only. Each subject stacks an affinely
    perturbed abdomen (slices [0, abdomen)) under a taller chest block
    holding decoy copies of the same bodies. Center initialization then
    puts the decoys much closer than the true abdomen, so an uncropped
    registration is drawn to the wrong block, while the score crop
    [-6, +5] keeps exactly the abdomen slab. Returns (template paths,
    subject manifest dicts).
    """
    from ctatlas.transforms import AffineTransform

    root.mkdir(parents=True, exist_ok=True)
    tpl_geom = centered_geometry((xy, xy, abdomen))
    tpl = render(tpl_geom)
    tpl_labels = render_labels(tpl_geom)
    write_volume(tpl, root / "template.nii.gz")
    write_volume(tpl_labels, root / "template_labels.nii.gz")

    nz = abdomen + chest
    geom = centered_geometry((xy, xy, nz))
    idx = np.stack(
        np.meshgrid(*[np.arange(d) for d in geom.dims], indexing="ij"),
        axis=-1,
    ).astype(np.float64)
    world = idx + np.asarray(geom.origin)
    lo = np.asarray(geom.origin) + np.array([0.0, 0.0, 0.0])
    abd_extent = np.array([float(xy), float(xy), float(abdomen)])
    chest_lo = lo + np.array([0.0, 0.0, float(abdomen)])
    # scores fall head-ward: abdomen spans (+5 -> -6), chest sits below -6
    scores = np.concatenate([
        np.linspace(5.0, -5.9, abdomen), np.linspace(-6.5, -12.0, chest)
    ])

    rng = np.random.default_rng(seed)
    subjects = []
    for k in range(n_subjects):
        params = draw_affine_params(rng)
        params["center"] = tuple(lo + abd_extent / 2.0)
        mat = AffineTransform.from_params(**params).matrix
        moved = world @ mat[:3, :3].T + mat[:3, 3]
        data = hu_at(moved, lo, abd_extent)
        lab = labels_at(moved, lo, abd_extent)
        # decoys: same scene one chest-height up, unlabeled
        decoy = hu_at(world, chest_lo, abd_extent)
        in_chest = world[..., 2] >= chest_lo[2] - 0.5
        data = np.where(in_chest, decoy, data)
        lab[in_chest] = 0
        vol = ImageVolume(geometry=geom, data=data.astype(np.float32))
        labels = LabelVolume(geometry=geom, data=lab)
        vol_path = root / f"subj{k}.nii.gz"
        lab_path = root / f"subj{k}_labels.nii.gz"
        scores_path = root / f"subj{k}.bpr.json"
        write_volume(vol, vol_path)
        write_volume(labels, lab_path)
        write_scores(scores_path, scores)
        subjects.append({
            "subject_id": f"subj{k}",
            "volume": str(vol_path),
            "labels": str(lab_path),
            "scores": str(scores_path),
        })
    return {
        "atlas": str(root / "template.nii.gz"),
        "atlas_labels": str(root / "template_labels.nii.gz"),
    }, subjects


def plain_cohort(root, n_subjects=2, n=32, seed=23):
    """Small full-FOV cohort (no distractor) for pipeline-level tests."""
    from ctatlas.transforms import AffineTransform

    root.mkdir(parents=True, exist_ok=True)
    geom = centered_geometry(n)
    write_volume(render(geom), root / "template.nii.gz")
    write_volume(render_labels(geom), root / "template_labels.nii.gz")
    rng = np.random.default_rng(seed)
    subjects = []
    for k in range(n_subjects):
        mat = AffineTransform.from_params(**draw_affine_params(rng)).matrix
        vol_path = root / f"subj{k}.nii.gz"
        lab_path = root / f"subj{k}_labels.nii.gz"
        write_volume(render(geom, mat), vol_path)
        write_volume(render_labels(geom, mat), lab_path)
        subjects.append({
            "subject_id": f"subj{k}",
            "volume": str(vol_path),
            "labels": str(lab_path),
        })
    return {
        "atlas": str(root / "template.nii.gz"),
        "atlas_labels": str(root / "template_labels.nii.gz"),
    }, subjects
