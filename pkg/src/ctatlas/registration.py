"""Two-stage hierarchical registration.

Stage 1 estimates a 12-degree-of-freedom affine by coarse-to-fine block
matching: control nodes on the fixed grid search a discrete displacement
window for the best descriptor match, and a weighted least-squares fit
turns the node correspondences into an affine update. Stage 2 refines
locally with multi-level dense displacement sampling: per control node the
discrete displacement space is enumerated, and the assignment minimizing
data cost plus a squared-difference smoothness term is found exactly by
dynamic programming over a minimum spanning tree of the control grid.

Both stages share one similarity: the L1 distance between self-similarity
context descriptors. Every step is deterministic; identical inputs give
identical transforms regardless of scheduling.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.stats import qmc
from sklearn.base import BaseEstimator

from .descriptor import (
    DescriptorParams,
    SSCDescriptorVolume,
    compute_ssc,
    descriptor_distance,
    mean_descriptor_distance,
)
from .errors import (
    ConfigError,
    DegenerateFitError,
    NoOverlapError,
    ShapeMismatchError,
    ValidationError,
)
from .geometry import GridGeometry, geometry_allclose
from .mst import grid_edges, mst_optimize
from .transforms import AffineTransform, DisplacementField, apply_affine, apply_field
from .validation import check_image, check_is_fitted
from .volume import ImageVolume

_OBJ_SLACK = 1e-9  # tolerance when comparing per-level objectives
_MAX_PATCH_SAMPLES = 64
_DEFAULT_NODE_CAP = 343  # affine stage: 7 nodes per axis
_LEVEL_MAX_ITERS = 4  # affine stage: matching passes per level
_MIN_STEP_VOX = 0.03  # affine stage: stop a level once corrections are tiny


def _interp_schedule(start: int, end: int, n: int) -> tuple[int, ...]:
    return tuple(int(v) for v in np.round(np.linspace(start, end, n)))


@dataclass(frozen=True)
class RegistrationLevels:
    """Coarse-to-fine level schedule shared by both stages.

    Defaults follow the five-level schedule: grid spacing 8..4 voxels,
    6..2 search steps of 5..1 voxels. Other level counts interpolate the
    same endpoints linearly. ``alpha`` weighs the smoothness term in units
    of the median node data-cost range per squared voxel.
    """

    n_levels: int = 5
    grid_spacing: tuple[int, ...] | None = None
    search_steps: tuple[int, ...] | None = None
    step_size: tuple[int, ...] | None = None
    alpha: float = 1.0

    def __post_init__(self):
        if int(self.n_levels) != self.n_levels or self.n_levels < 1:
            raise ConfigError(f"n_levels must be a positive integer, got "
                              f"{self.n_levels}")
        object.__setattr__(self, "n_levels", int(self.n_levels))
        defaults = {
            "grid_spacing": (8, 4),
            "search_steps": (6, 2),
            "step_size": (5, 1),
        }
        for name, (start, end) in defaults.items():
            value = getattr(self, name)
            if value is None:
                value = _interp_schedule(start, end, self.n_levels)
            value = tuple(int(v) for v in value)
            if len(value) != self.n_levels:
                raise ConfigError(
                    f"{name} must have {self.n_levels} entries, got {len(value)}"
                )
            if any(v < 1 for v in value):
                raise ConfigError(f"{name} entries must be >= 1, got {value}")
            if any(a < b for a, b in zip(value, value[1:])):
                raise ConfigError(f"{name} must be non-increasing, got {value}")
            object.__setattr__(self, name, value)
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        object.__setattr__(self, "alpha", float(self.alpha))

    @property
    def reachable_bound(self) -> int:
        """Max per-component displacement any output field can reach (voxels)."""
        return int(sum(s * t for s, t in zip(self.search_steps, self.step_size)))

    def to_dict(self) -> dict:
        return {
            "n_levels": self.n_levels,
            "grid_spacing": list(self.grid_spacing),
            "search_steps": list(self.search_steps),
            "step_size": list(self.step_size),
            "alpha": self.alpha,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "RegistrationLevels":
        payload = dict(payload)
        for key in ("grid_spacing", "search_steps", "step_size"):
            if key in payload and payload[key] is not None:
                payload[key] = tuple(payload[key])
        return cls(**payload)


def _axis_positions(dim: int, spacing: int, cap: int | None) -> np.ndarray:
    start = spacing // 2
    if start >= dim:
        start = dim // 2
    pos = np.arange(start, dim, spacing, dtype=np.int32)
    if pos.size == 0:
        pos = np.array([dim // 2], dtype=np.int32)
    if cap is not None and pos.size > cap:
        keep = np.unique(np.round(np.linspace(0, pos.size - 1, cap)).astype(int))
        pos = pos[keep]
    return pos


def _node_grid(dims, spacing: int, cap: int | None = None):
    """Control-node voxel positions: C-ordered cartesian grid per axis."""
    axis_cap = None
    if cap is not None:
        axis_cap = max(2, int(round(cap ** (1.0 / 3.0))))
    axes = [_axis_positions(d, spacing, axis_cap) for d in dims]
    grid_shape = tuple(len(a) for a in axes)
    mesh = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1).astype(np.int32)
    return nodes, grid_shape, axes


def _patch_offsets(spacing: int, max_samples: int = _MAX_PATCH_SAMPLES) -> np.ndarray:
    """Voxel offsets sampled within a node's grid-spacing cube.

    Small patches are taken whole; larger ones are subsampled with a fixed
    (unscrambled) Halton pattern so results are deterministic.
    """
    half = spacing // 2
    if spacing ** 3 <= max_samples:
        rng = np.arange(spacing, dtype=np.int32) - half
        mesh = np.meshgrid(rng, rng, rng, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)
    pts = qmc.Halton(d=3, scramble=False).random(4 * max_samples)
    offs = np.floor(pts * spacing).astype(np.int32) - half
    _, first = np.unique(offs, axis=0, return_index=True)
    offs = offs[np.sort(first)]
    return offs[:max_samples]


def _search_window(steps: int, step_size: int) -> np.ndarray:
    """Discrete displacement candidates ordered by magnitude, then lex.

    The ordering makes argmin's first-hit rule break ties toward the
    smaller displacement.
    """
    r = np.arange(-steps, steps + 1, dtype=np.int32) * step_size
    mesh = np.meshgrid(r, r, r, indexing="ij")
    grid = np.stack([m.ravel() for m in mesh], axis=1)
    mag = (grid.astype(np.int64) ** 2).sum(axis=1)
    order = np.lexsort((grid[:, 2], grid[:, 1], grid[:, 0], mag))
    return grid[order]


def _gather(flat: np.ndarray, pos: np.ndarray, dims) -> np.ndarray:
    """Descriptor rows at integer voxel positions (clamped to the grid)."""
    x = np.clip(pos[..., 0], 0, dims[0] - 1).astype(np.int64)
    y = np.clip(pos[..., 1], 0, dims[1] - 1)
    z = np.clip(pos[..., 2], 0, dims[2] - 1)
    lin = (x * dims[1] + y) * dims[2] + z
    return flat[lin]


def _node_costs(desc_f: SSCDescriptorVolume, desc_m: SSCDescriptorVolume,
                nodes: np.ndarray, sample_offsets: np.ndarray,
                candidates: np.ndarray, node_offsets: np.ndarray | None = None,
                metric: str = "l1") -> np.ndarray:
    """Data cost table (n_nodes, n_candidates).

    cost[i, c] is the mean channel distance between fixed descriptors at
    node i's sample voxels and moving descriptors at the same voxels
    displaced by node_offsets[i] + candidates[c].
    """
    dims = desc_f.geometry.dims
    n_ch = desc_f.n_channels
    flat_f = desc_f.channels.reshape(-1, n_ch)
    flat_m = desc_m.channels.reshape(-1, n_ch)
    pos = nodes[:, None, :].astype(np.int64) + sample_offsets[None, :, :]
    fixed = _gather(flat_f, pos, dims)  # (N, S, C)
    if node_offsets is not None:
        pos = pos + node_offsets[:, None, :].astype(np.int64)
    n_nodes, n_samples = pos.shape[:2]
    n_cand = len(candidates)
    costs = np.empty((n_nodes, n_cand), dtype=np.float64)
    chunk = max(1, int(2_000_000 // max(1, n_nodes * n_samples)))
    for lo in range(0, n_cand, chunk):
        cand = candidates[lo : lo + chunk].astype(np.int64)
        moved = pos[:, :, None, :] + cand[None, None, :, :]
        moving = _gather(flat_m, moved, dims)  # (N, S, L, C)
        diff = moving - fixed[:, :, None, :]
        if metric == "l1":
            np.abs(diff, out=diff)
            dist = diff.sum(axis=-1)
        else:
            np.square(diff, out=diff)
            dist = np.sqrt(diff.sum(axis=-1))
        costs[:, lo : lo + chunk] = dist.mean(axis=1, dtype=np.float64)
    return costs


def _edge_weights(fixed_data: np.ndarray, nodes: np.ndarray, spacing: int,
                  edges: np.ndarray) -> np.ndarray:
    """MST selection weights: 1 - exp(-|gradient difference| / mean).

    Edges joining nodes of similar local gradient magnitude get low weight,
    so the spanning tree follows coherent image structure.
    """
    grad = np.gradient(fixed_data.astype(np.float64))
    mag = np.sqrt(grad[0] ** 2 + grad[1] ** 2 + grad[2] ** 2)
    smooth = ndimage.uniform_filter(mag, size=spacing, mode="nearest")
    g = smooth[nodes[:, 0], nodes[:, 1], nodes[:, 2]]
    dg = np.abs(g[edges[:, 0]] - g[edges[:, 1]])
    scale = dg.mean() + 1e-12
    return 1.0 - np.exp(-dg / scale)


def _check_world_overlap(fixed, moving) -> None:
    lo_f, hi_f = fixed.geometry.world_bounds()
    lo_m, hi_m = moving.geometry.world_bounds()
    if np.any(hi_f < lo_m) or np.any(hi_m < lo_f):
        raise NoOverlapError(
            "fixed and moving volumes share no world extent; check origins"
        )


def _check_canonical(vol, name: str) -> None:
    if not vol.geometry.is_canonical():
        raise ValidationError(
            f"{name} volume must be in canonical orientation; "
            f"apply reorient_canonical first"
        )


def _fit_affine_map(points: np.ndarray, targets: np.ndarray,
                    weights: np.ndarray) -> np.ndarray:
    """Weighted 12-DOF least squares with one residual reweighting round.

    Solves B @ [p; 1] ~= t over world-mm correspondences. Node weights come
    in as the matching info weight (uninformative flat-region nodes get ~0),
    and the second round down-weights outlier correspondences.
    """
    design = np.hstack([points, np.ones((len(points), 1))])
    w = np.asarray(weights, dtype=np.float64)
    if w.max() <= 0:
        raise DegenerateFitError("all node correspondences are uninformative")
    w = w / w.max()
    sol = None
    for _ in range(2):
        sw = np.sqrt(w)[:, None]
        sol, _, rank, _ = np.linalg.lstsq(design * sw, targets * sw, rcond=None)
        if rank < 4:
            raise DegenerateFitError(
                f"correspondences are rank deficient (rank {rank} < 4)"
            )
        residual = np.linalg.norm(design @ sol - targets, axis=1)
        scale = 3.0 * np.median(residual) + 1e-9
        w = weights / weights.max() / (1.0 + (residual / scale) ** 2)
    mat = np.eye(4)
    mat[:3, :] = sol.T
    return mat


def _lerp_gather(flat: np.ndarray, pos: np.ndarray, dims) -> np.ndarray:
    """Descriptor rows at fractional voxel positions (trilinear, clamped)."""
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(np.int64)
    out = 0.0
    for corner in range(8):
        bits = np.array([(corner >> b) & 1 for b in (2, 1, 0)])
        w = np.prod(np.where(bits, frac, 1.0 - frac), axis=-1)
        out = out + w[..., None] * _gather(flat, lo + bits, dims)
    return out


def _fractional_refine(flat_m: np.ndarray, flat_f: np.ndarray,
                       pos_m: np.ndarray, pos_f: np.ndarray, dims,
                       metric: str) -> np.ndarray:
    """Continuous per-node refinement of matched displacements.

    Coordinate descent with shrinking probes around the window winner.
    Each candidate residual is split half onto each side: the warped
    descriptors are read at +d/2 and the fixed ones at -d/2, so both
    gathers carry the identical interpolation phase. A one-sided probe
    blurs only the moving side, and the cost minimum then drifts toward
    the unblurred integer grid instead of the true alignment.
    """
    disp = np.zeros((len(pos_m), 3))

    def cost_at(d):
        half = d[:, None, :] / 2.0
        moving = _lerp_gather(flat_m, pos_m + half, dims)
        fixed = _lerp_gather(flat_f, pos_f - half, dims)
        diff = moving - fixed
        if metric == "l1":
            dist = np.abs(diff).sum(axis=-1)
        else:
            dist = np.sqrt((diff ** 2).sum(axis=-1))
        return dist.mean(axis=1)

    c0 = cost_at(disp)
    for h in (1.0, 0.5, 0.25, 0.125):
        for ax in range(3):
            probe = np.zeros((1, 3))
            probe[0, ax] = h
            cm = cost_at(disp - probe)
            cp = cost_at(disp + probe)
            denom = cm - 2.0 * c0 + cp
            delta = np.where(cp < cm, h, -h)  # fallback: step downhill
            convex = denom > 1e-12
            delta[convex] = np.clip(
                0.5 * (cm[convex] - cp[convex]) / denom[convex] * h, -h, h
            )
            trial = disp.copy()
            trial[:, ax] += delta
            ct = cost_at(trial)
            better = ct < c0
            disp[better] = trial[better]
            c0 = np.where(better, ct, c0)
    return disp


def _map_to_moving(matrix: np.ndarray, geom_f: GridGeometry,
                   geom_m: GridGeometry, pts_f_vox: np.ndarray) -> np.ndarray:
    """Fixed-grid voxel positions mapped into moving-grid voxel positions.

    Pull-back convention: the warped image at fixed world x samples the
    moving image at inv(matrix) @ x.
    """
    shape = pts_f_vox.shape
    world = geom_f.voxel_to_world(pts_f_vox.reshape(-1, 3))
    inv = np.linalg.inv(matrix)
    mapped = world @ inv[:3, :3].T + inv[:3, 3]
    return geom_m.world_to_voxel(mapped).reshape(shape)


def _blur3(data: np.ndarray, weight) -> np.ndarray:
    """Separable symmetric three-tap blur [a, 1-2a, a] per axis.

    ``weight`` is a per-voxel-per-axis array (or scalar) of tap weights a,
    each adding variance 2a along its axis. Borders replicate.
    """
    out = np.asarray(data, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    for axis in range(3):
        a = weight if weight.ndim == 0 else weight[..., axis]
        lo = np.roll(out, 1, axis=axis)
        hi = np.roll(out, -1, axis=axis)
        # roll wraps around; replicate the border instead
        edge = [slice(None)] * 3
        edge[axis] = slice(0, 1)
        lo[tuple(edge)] = out[tuple(edge)]
        edge[axis] = slice(-1, None)
        hi[tuple(edge)] = out[tuple(edge)]
        out = out + a * (lo - 2.0 * out + hi)
    return out


def _border_taper(pos: np.ndarray, dims, support: int, spacing: int
                  ) -> np.ndarray:
    """Down-weight positions whose descriptor support clamps at the border.

    Gathers clamp out-of-grid indices, so matches that lean on the domain
    boundary are replication artifacts rather than evidence.
    """
    dist = np.minimum(pos, np.asarray(dims, dtype=np.float64) - 1 - pos)
    dist = dist.min(axis=-1)
    ramp = max(1.0, spacing // 2 + 1.0)
    return np.clip((dist - support) / ramp, 0.0, 1.0)


def _match_level(desc_f: SSCDescriptorVolume, desc_w: SSCDescriptorVolume,
                 spacing: int, steps: int, step_size: int, metric: str,
                 node_cap: int | None, support: int):
    """Block matching at one level: weighted node correspondences.

    The integer window search runs over the warped descriptor volume; the
    winner is then refined continuously by interpolating the warped
    channels at fractional displacements. Returns (points, targets,
    weights) in fixed voxel coordinates, anchored at the patch sample
    centroids (cost aggregates over the patch, so that is where the
    effective correspondence sits). The weight is patch salience (mean
    self-dissimilarity of the fixed descriptors; ~0 in structureless air)
    times the weakest axis-wise cost rise around the window winner,
    tapered to zero where either endpoint's support leaves the grid. The
    weakest axis matters because of the aperture problem: a node on a
    plain edge pins the normal direction but slides freely along the edge,
    and its global cost range is large even though the correspondence is
    one-third constrained.
    """
    dims = desc_f.geometry.dims
    # cost grows with the window cube; coarse levels only need correction
    # DIRECTION, so they run on fewer nodes and patch samples, while the
    # unit-step levels that set the final precision keep the full budget
    if step_size > 1:
        node_cap = 125 if node_cap is None else min(node_cap, 125)
        max_samples = 32
    else:
        max_samples = _MAX_PATCH_SAMPLES
    nodes, _, _ = _node_grid(dims, spacing, cap=node_cap)
    offsets = _patch_offsets(spacing, max_samples)
    window = _search_window(steps, step_size)
    costs = _node_costs(desc_f, desc_w, nodes, offsets, window, metric=metric)
    best = np.argmin(costs, axis=1)
    pos = nodes[:, None, :].astype(np.int64) + offsets[None, :, :]
    flat_f = desc_f.channels.reshape(-1, desc_f.n_channels)
    patch = _gather(flat_f, pos, dims)  # (N, S, C)
    flat_w = desc_w.channels.reshape(-1, desc_w.n_channels)
    # split the winner across the anchors too, so the refine probes stay
    # centered: total displacement w + r reads the warped side at +( w+r)/2
    # and the fixed side at -(w+r)/2
    half_w = window[best][:, None, :] / 2.0
    disp = window[best] + _fractional_refine(flat_w, flat_f, pos + half_w,
                                             pos - half_w, dims, metric)
    salience = (1.0 - patch).mean(axis=(1, 2))
    info = salience * _min_axis_rise(costs, window, best, step_size)
    points = nodes.astype(np.float64) + offsets.mean(axis=0)
    targets = points + disp
    info = info * _border_taper(points, dims, support, spacing)
    info = info * _border_taper(targets, dims, support, spacing)
    return points, targets, info


def _min_axis_rise(costs: np.ndarray, window: np.ndarray, best: np.ndarray,
                   step_size: int) -> np.ndarray:
    """Weakest-direction cost rise one window step away from each winner."""
    index = {tuple(d): i for i, d in enumerate(window)}
    n_nodes = len(best)
    rise = np.full(n_nodes, np.inf)
    best_cost = costs[np.arange(n_nodes), best]
    for axis in range(3):
        axis_rise = np.full(n_nodes, np.inf)
        for sign in (-1, 1):
            d = window[best].copy()
            d[:, axis] += sign * step_size
            cols = np.array([index.get(tuple(row), -1) for row in d])
            valid = cols >= 0
            r = np.full(n_nodes, np.inf)
            r[valid] = costs[np.nonzero(valid)[0], cols[valid]] - best_cost[valid]
            axis_rise = np.minimum(axis_rise, r)
        rise = np.minimum(rise, axis_rise)
    # a winner on the window hull has no neighbor on one side of some axis;
    # the remaining side still bounds its constraint
    return np.where(np.isfinite(rise), np.maximum(rise, 0.0), 0.0)


class AffineRegistration(BaseEstimator):
    """12-DOF affine registration by coarse-to-fine descriptor block matching.

    Parameters
    ----------
    params : DescriptorParams, optional
        Descriptor structure; defaults to the standard 12-channel setup.
    levels : RegistrationLevels, optional
        Coarse-to-fine schedule; defaults to the five-level schedule.
    node_cap : int
        Upper bound on control nodes per level for the affine fit. A global
        transform needs far fewer correspondences than a deformable field.

    Attributes
    ----------
    affine_ : AffineTransform
        World-mm transform mapping moving into fixed space (pull-back).
    fixed_geometry_ : GridGeometry
        Geometry of the fixed volume; default transform target.
    level_objectives_ : list of float
        Mean descriptor distance between the fixed and warped moving
        volumes, before registration and after each level, averaged over
        voxels with full descriptor support in both volumes. Non-increasing;
        a level that does not help is rolled back.
    """

    def __init__(self, params: DescriptorParams | None = None,
                 levels: RegistrationLevels | None = None,
                 node_cap: int = _DEFAULT_NODE_CAP):
        self.params = params
        self.levels = levels
        self.node_cap = node_cap

    def fit(self, fixed, moving) -> "AffineRegistration":
        params = self.params or DescriptorParams()
        levels = self.levels or RegistrationLevels()
        check_image(fixed, "fixed")
        check_image(moving, "moving")
        _check_canonical(fixed, "fixed")
        _check_canonical(moving, "moving")
        _check_world_overlap(fixed, moving)

        geom_f = fixed.geometry
        support = params.offset + params.patch_radius
        idx = np.stack(
            np.meshgrid(*[np.arange(d, dtype=np.float64) for d in geom_f.dims],
                        indexing="ij"),
            axis=-1,
        )
        # objective support: fixed-side voxels whose descriptor neighborhood
        # stays on the grid; the moving-side condition depends on the matrix
        core = np.zeros(geom_f.dims, dtype=bool)
        core[tuple(slice(support, d - support) for d in geom_f.dims)] = True
        dims_m = np.asarray(moving.geometry.dims, dtype=np.float64)
        corners = geom_f.voxel_to_world(
            np.array([[x, y, z] for x in (0, geom_f.dims[0] - 1)
                      for y in (0, geom_f.dims[1] - 1)
                      for z in (0, geom_f.dims[2] - 1)], dtype=np.float64)
        )
        mean_spacing = float(np.mean(geom_f.spacing))

        def correction_step(c_mat):
            moved = corners @ c_mat[:3, :3].T + c_mat[:3, 3]
            return float(np.abs(moved - corners).max()) / mean_spacing

        # trilinear resampling blurs with a phase-dependent kernel (per-axis
        # variance f(1-f), f the fractional position), and descriptors react
        # to blur as if it were displacement. Equalize instead of fighting
        # it: blur the fixed volume uniformly to variance 1/4 per axis, and
        # top the warped volume up to the same total with a = (f-1/2)^2 / 2.
        # Both sides then carry the same blur everywhere, so descriptor
        # differences mean misalignment, not resampling phase.
        desc_fb = compute_ssc(
            ImageVolume(geometry=geom_f,
                        data=_blur3(fixed.data, 0.125).astype(np.float32)),
            params,
        )

        def evaluate(matrix):
            # replicate padding: a constant fill would add a synthetic edge
            # at the domain boundary that block matching latches onto
            warped = apply_affine(moving, AffineTransform(matrix=matrix),
                                  geom_f, padding="replicate")
            pos_m = _map_to_moving(matrix, geom_f, moving.geometry, idx)
            frac = pos_m - np.floor(pos_m)
            topped = _blur3(warped.data, 0.5 * (frac - 0.5) ** 2)
            desc_w = compute_ssc(
                ImageVolume(geometry=geom_f, data=topped.astype(np.float32)),
                params,
            )
            # score only voxels whose descriptors see real data on both
            # sides; averaging over the replicated out-of-domain band
            # rewards transforms that shrink it, not ones that align
            dist = descriptor_distance(desc_fb.channels, desc_w.channels,
                                       metric=params.metric)
            inside = np.logical_and(
                pos_m >= support, pos_m <= dims_m - 1 - support
            ).all(axis=-1)
            mask = core & inside
            obj = float(dist[mask].mean()) if mask.any() else float("inf")
            return (desc_fb, desc_w), obj

        cur = np.eye(4)
        pair, obj = evaluate(cur)
        best_matrix, best_pair, best_obj = cur, pair, obj
        objectives = [best_obj]
        for level in range(levels.n_levels):
            # iterate corrections until they stop moving anything; residuals
            # larger than a level's window need several truncated steps, and
            # the objective alone is too flat to gate sub-voxel polishing
            for _ in range(_LEVEL_MAX_ITERS):
                points_vox, targets_vox, info = _match_level(
                    pair[0], pair[1],
                    levels.grid_spacing[level], levels.search_steps[level],
                    levels.step_size[level], params.metric, self.node_cap,
                    support,
                )
                points = geom_f.voxel_to_world(points_vox)
                targets = geom_f.voxel_to_world(targets_vox)
                correction = _fit_affine_map(points, targets, info)
                if correction_step(correction) < _MIN_STEP_VOX:
                    break
                cur = np.linalg.inv(correction) @ cur
                pair, obj = evaluate(cur)
            # levels never make the accepted state worse: roll back if this
            # one did not help
            if obj <= best_obj + _OBJ_SLACK:
                best_matrix, best_pair, best_obj = cur, pair, obj
            else:
                cur, pair, obj = best_matrix, best_pair, best_obj
            objectives.append(best_obj)
        try:
            self.affine_ = AffineTransform(matrix=best_matrix)
        except ValidationError as exc:
            raise DegenerateFitError(f"affine fit left sane bounds: {exc}") from exc
        self.fixed_geometry_ = fixed.geometry
        self.level_objectives_ = objectives
        return self

    def transform(self, vol, interp: str = "trilinear"):
        check_is_fitted(self, "affine_")
        return apply_affine(vol, self.affine_, self.fixed_geometry_, interp=interp)


class DeformableRegistration(BaseEstimator):
    """Multi-level dense displacement sampling with exact tree optimization.

    ``fit`` expects the moving volume already resampled into the fixed
    geometry (the affine stage's output). Each level optimizes total
    per-node displacements over a discrete window centered on the previous
    level's upsampled solution; a level whose full-volume objective would
    rise is rolled back, so the reported objectives never increase.

    Attributes
    ----------
    field_ : DisplacementField
        Dense per-voxel displacements (voxels, pull-back convention).
    level_objectives_ : list of float
        Mean descriptor distance before registration and after each level.
    """

    def __init__(self, params: DescriptorParams | None = None,
                 levels: RegistrationLevels | None = None):
        self.params = params
        self.levels = levels

    def fit(self, fixed, moving_affine) -> "DeformableRegistration":
        params = self.params or DescriptorParams()
        levels = self.levels or RegistrationLevels()
        check_image(fixed, "fixed")
        check_image(moving_affine, "moving_affine")
        _check_canonical(fixed, "fixed")
        if fixed.geometry.dims != moving_affine.geometry.dims or not geometry_allclose(
            fixed.geometry, moving_affine.geometry
        ):
            raise ShapeMismatchError(
                "moving volume must be resampled into the fixed geometry "
                "before deformable registration"
            )
        geom = fixed.geometry
        dims = geom.dims
        desc_f = compute_ssc(fixed, params)
        desc_m = compute_ssc(moving_affine, params)

        best_dense = np.zeros(dims + (3,), dtype=np.float64)
        best_obj = mean_descriptor_distance(desc_f, desc_m, metric=params.metric)
        objectives = [best_obj]
        for level in range(levels.n_levels):
            spacing = levels.grid_spacing[level]
            steps = levels.search_steps[level]
            step_size = levels.step_size[level]
            nodes, grid_shape, axes = _node_grid(dims, spacing)
            init = np.round(
                best_dense[nodes[:, 0], nodes[:, 1], nodes[:, 2]]
            ).astype(np.int32)
            window = _search_window(steps, step_size)
            # same budget rule as the affine stage: coarse levels with their
            # huge windows get fewer patch samples, unit-step levels keep all
            max_samples = 32 if step_size > 1 else _MAX_PATCH_SAMPLES
            offsets = _patch_offsets(spacing, max_samples)
            costs = _node_costs(desc_f, desc_m, nodes, offsets, window,
                                node_offsets=init, metric=params.metric)
            edges = grid_edges(grid_shape)
            cost_range = costs.max(axis=1) - costs.min(axis=1)
            alpha_eff = levels.alpha * float(np.median(cost_range))
            alpha_eff /= float(steps * step_size) ** 2
            if len(edges):
                weights = _edge_weights(fixed.data, nodes, spacing, edges)
                assign = mst_optimize(costs, window, edges, alpha_eff,
                                      edge_weights=weights, offsets=init)
            else:
                assign = np.argmin(costs, axis=1)
            totals = init + window[assign]
            dense = _upsample_nodes(totals, grid_shape, axes, dims)
            candidate_field = DisplacementField(
                geometry=geom, vectors=dense.astype(np.float32)
            )
            warped = apply_field(moving_affine, candidate_field,
                                 padding="replicate")
            obj = mean_descriptor_distance(desc_f, compute_ssc(warped, params),
                                           metric=params.metric)
            if obj <= best_obj + _OBJ_SLACK:
                best_dense, best_obj = dense, obj
            objectives.append(best_obj)
        self.field_ = DisplacementField(
            geometry=geom, vectors=best_dense.astype(np.float32)
        )
        self.level_objectives_ = objectives
        return self

    def transform(self, vol, interp: str = "trilinear"):
        check_is_fitted(self, "field_")
        return apply_field(vol, self.field_, interp=interp)


def _upsample_nodes(totals: np.ndarray, grid_shape, axes, dims) -> np.ndarray:
    """Trilinear upsampling of node displacements to a dense voxel field."""
    node_grid = totals.reshape(grid_shape + (3,)).astype(np.float64)
    coord_axes = []
    for axis, positions in enumerate(axes):
        if len(positions) == 1:
            coord_axes.append(np.zeros(dims[axis]))
            continue
        spacing = positions[1] - positions[0]
        coord_axes.append((np.arange(dims[axis]) - positions[0]) / spacing)
    coords = np.stack(np.meshgrid(*coord_axes, indexing="ij"))
    dense = np.empty(dims + (3,), dtype=np.float64)
    for c in range(3):
        dense[..., c] = ndimage.map_coordinates(
            node_grid[..., c], coords, order=1, mode="nearest"
        )
    return dense


class TwoStageRegistration(BaseEstimator):
    """Affine alignment followed by deformable refinement.

    Attributes
    ----------
    affine_ : AffineTransform
    field_ : DisplacementField
    similarity_ : float
        Negated final mean descriptor distance (higher is better); the
        pipeline's QA score.
    level_objectives_ : dict with "affine" and "deformable" objective traces.
    """

    def __init__(self, params: DescriptorParams | None = None,
                 levels: RegistrationLevels | None = None,
                 node_cap: int = _DEFAULT_NODE_CAP):
        self.params = params
        self.levels = levels
        self.node_cap = node_cap

    def fit(self, fixed, moving) -> "TwoStageRegistration":
        affine = AffineRegistration(params=self.params, levels=self.levels,
                                    node_cap=self.node_cap).fit(fixed, moving)
        # replicate padding keeps the affine resample free of synthetic
        # boundary edges that would mislead the deformable stage
        warped = apply_affine(moving, affine.affine_, fixed.geometry,
                              padding="replicate")
        deform = DeformableRegistration(params=self.params,
                                        levels=self.levels).fit(fixed, warped)
        self.affine_ = affine.affine_
        self.field_ = deform.field_
        self.fixed_geometry_ = fixed.geometry
        self.level_objectives_ = {
            "affine": affine.level_objectives_,
            "deformable": deform.level_objectives_,
        }
        self.similarity_ = -deform.level_objectives_[-1]
        return self

    def transform(self, vol, interp: str = "trilinear"):
        check_is_fitted(self, "field_")
        from .transforms import warp_volume

        return warp_volume(vol, self.affine_, self.field_, interp=interp)


def register_affine(fixed, moving, params: DescriptorParams | None = None,
                    levels: RegistrationLevels | None = None) -> AffineTransform:
    """Functional wrapper around :class:`AffineRegistration`."""
    return AffineRegistration(params=params, levels=levels).fit(fixed, moving).affine_


def register_deformable(fixed, moving_affine,
                        params: DescriptorParams | None = None,
                        levels: RegistrationLevels | None = None
                        ) -> DisplacementField:
    """Functional wrapper around :class:`DeformableRegistration`."""
    est = DeformableRegistration(params=params, levels=levels)
    return est.fit(fixed, moving_affine).field_
