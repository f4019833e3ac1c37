"""Self-similarity context descriptors driving both registration stages.

Every voxel gets a 12-channel descriptor: for each of the 12 ordered pairs
of its six face-neighbour patches, the channel is
``exp(-SSD(patch_a, patch_b) / q^2)`` where SSD is the sum of squared
intensity differences over cubic patches and ``q^2`` is a noise estimate.
The exponent is negative, so channels live in (0, 1] and decrease with
patch dissimilarity; SSDs of patch differences make the descriptor
invariant to additive intensity offsets, and the local mean noise rule
makes it robust to multiplicative rescaling as well.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InsufficientExtentError, ValidationError
from .geometry import GridGeometry
from .volume import ImageVolume

_Q2_FLOOR = 1e-6
NOISE_RULES = ("mean-of-pair-SSDs", "global-mean")
CHANNEL_METRICS = ("l1", "l2")


def _face_neighborhood(offset: int) -> np.ndarray:
    """The six face-neighbour offsets at the given distance, axis order."""
    eye = np.eye(3, dtype=int) * offset
    return np.concatenate([np.stack([eye[a], -eye[a]]) for a in range(3)])


def _orthogonal_pairs(neighborhood: np.ndarray) -> tuple[tuple[int, int], ...]:
    """All index pairs (i < j) of non-antipodal neighbours: 12 for 6 offsets."""
    pairs = []
    for i in range(len(neighborhood)):
        for j in range(i + 1, len(neighborhood)):
            if not np.array_equal(neighborhood[i], -neighborhood[j]):
                pairs.append((i, j))
    return tuple(pairs)


@dataclass(frozen=True)
class DescriptorParams:
    """Structure of the self-similarity descriptor.

    ``patch_radius`` is the half-width of the cubic comparison patches
    (radius 1 means 3x3x3), ``offset`` the face-neighbour distance in
    voxels. ``noise_rule`` selects how q^2 is estimated: per-voxel mean of
    the 12 pair SSDs, or one global mean. ``metric`` is the channel-space
    distance used during optimization.
    """

    patch_radius: int = 1
    offset: int = 2
    noise_rule: str = "mean-of-pair-SSDs"
    metric: str = "l1"

    def __post_init__(self):
        if int(self.patch_radius) != self.patch_radius or self.patch_radius < 1:
            raise ValidationError(f"patch_radius must be an integer >= 1, got "
                                  f"{self.patch_radius}")
        if int(self.offset) != self.offset or self.offset < 1:
            raise ValidationError(f"offset must be an integer >= 1, got {self.offset}")
        if self.noise_rule not in NOISE_RULES:
            raise ValidationError(f"noise_rule must be one of {NOISE_RULES}")
        if self.metric not in CHANNEL_METRICS:
            raise ValidationError(f"metric must be one of {CHANNEL_METRICS}")
        object.__setattr__(self, "patch_radius", int(self.patch_radius))
        object.__setattr__(self, "offset", int(self.offset))

    @property
    def neighborhood(self) -> np.ndarray:
        return _face_neighborhood(self.offset)

    @property
    def pair_set(self) -> tuple[tuple[int, int], ...]:
        return _orthogonal_pairs(self.neighborhood)

    @property
    def n_channels(self) -> int:
        return len(self.pair_set)

    def min_extent(self) -> int:
        return 2 * (self.patch_radius + self.offset)

    def to_dict(self) -> dict:
        return {
            "patch_radius": self.patch_radius,
            "offset": self.offset,
            "noise_rule": self.noise_rule,
            "metric": self.metric,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "DescriptorParams":
        return cls(**payload)


@dataclass(frozen=True, eq=False)
class SSCDescriptorVolume:
    """Per-voxel 12-channel descriptors on a volume's grid, channels in (0, 1]."""

    geometry: GridGeometry
    channels: np.ndarray
    params: DescriptorParams = field(default_factory=DescriptorParams)

    def __post_init__(self):
        arr = np.asarray(self.channels, dtype=np.float32)
        expected = self.geometry.dims + (self.params.n_channels,)
        if arr.shape != expected:
            raise ValidationError(
                f"channel array shape {arr.shape} does not match {expected}"
            )
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "channels", arr)

    @property
    def n_channels(self) -> int:
        return self.channels.shape[-1]


def _shift_clamped(data: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """data evaluated at voxel + offset, with indices clamped to the grid."""
    out = data
    for axis, step in enumerate(offset):
        step = int(step)
        if step == 0:
            continue
        n = data.shape[axis]
        idx = np.clip(np.arange(n) + step, 0, n - 1)
        out = np.take(out, idx, axis=axis)
    return out


def compute_ssc(vol: ImageVolume, params: DescriptorParams | None = None
                ) -> SSCDescriptorVolume:
    """Compute the 12-channel self-similarity descriptor volume."""
    params = params or DescriptorParams()
    min_extent = params.min_extent()
    if any(d <= min_extent for d in vol.geometry.dims):
        raise InsufficientExtentError(
            f"volume dims {vol.geometry.dims} too small for descriptors "
            f"(every axis must exceed {min_extent})"
        )
    data = vol.data.astype(np.float32)
    size = 2 * params.patch_radius + 1
    patch_voxels = size ** 3
    neigh = params.neighborhood
    shifted = [_shift_clamped(data, off) for off in neigh]
    ssd = np.empty(vol.geometry.dims + (params.n_channels,), dtype=np.float32)
    for c, (i, j) in enumerate(params.pair_set):
        diff_sq = (shifted[i] - shifted[j]) ** 2
        # box mean * patch volume = clamped-patch SSD
        ssd[..., c] = ndimage.uniform_filter(diff_sq, size=size, mode="nearest")
    ssd *= patch_voxels
    # the box filter can go sub-zero by float error; channels must stay <= 1
    np.maximum(ssd, 0.0, out=ssd)
    if params.noise_rule == "mean-of-pair-SSDs":
        q2 = ssd.mean(axis=-1, keepdims=True)
    else:
        q2 = np.float32(ssd.mean())
    q2 = np.maximum(q2, np.float32(_Q2_FLOOR))
    channels = np.exp(-ssd / q2)
    return SSCDescriptorVolume(geometry=vol.geometry, channels=channels, params=params)


def descriptor_distance(a: np.ndarray, b: np.ndarray, metric: str = "l1") -> np.ndarray:
    """Distance between descriptor channel vectors (last axis = channels).

    Returns a scalar for single vectors, an array for stacked inputs.
    """
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.shape[-1] != b.shape[-1]:
        raise ValidationError(
            f"channel counts differ: {a.shape[-1]} vs {b.shape[-1]}"
        )
    if metric == "l1":
        out = np.abs(a - b).sum(axis=-1)
    elif metric == "l2":
        out = np.sqrt(((a - b) ** 2).sum(axis=-1))
    else:
        raise ValidationError(f"metric must be one of {CHANNEL_METRICS}")
    if out.ndim == 0:
        return float(out)
    return out


def mean_descriptor_distance(a: SSCDescriptorVolume, b: SSCDescriptorVolume,
                             metric: str = "l1") -> float:
    """Mean channel distance over all voxels; the registration objective."""
    if a.channels.shape != b.channels.shape:
        raise ValidationError("descriptor volumes have different shapes")
    return float(np.mean(descriptor_distance(a.channels, b.channels, metric=metric)))


def dump_channels(desc: SSCDescriptorVolume, out_dir) -> list:
    """Debug dump: write each channel as its own volume. Returns the paths."""
    from pathlib import Path

    from .nifti import write_volume

    out_dir = Path(out_dir)
    paths = []
    for c in range(desc.n_channels):
        vol = ImageVolume(geometry=desc.geometry, data=desc.channels[..., c])
        path = out_dir / f"ssc_channel_{c:02d}.nii.gz"
        write_volume(vol, path)
        paths.append(path)
    return paths
