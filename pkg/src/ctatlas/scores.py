"""Per-slice anatomical scores and score-based field-of-view cropping.

Each axial slice carries a score in [-12, +12] locating it along the body
(-12 upper chest, -5 diaphragm / upper liver, +4 lower retroperitoneum,
+6 pelvis). Scores decrease toward the head along the canonical superior
(+z) axis. They come either from a sidecar file written by an external
scoring network or from a rough intensity heuristic, and drive cropping of
every volume to a consistent abdominal window before registration.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from sklearn.isotonic import IsotonicRegression

from .errors import (
    EmptyCropError,
    FormatError,
    InsufficientExtentError,
    ShapeMismatchError,
    ValidationError,
)
from .geometry import GridGeometry
from .volume import ImageVolume

SCORE_MIN = -12.0
SCORE_MAX = 12.0
DEFAULT_CROP_LO = -6.0
DEFAULT_CROP_HI = 5.0

AIR_HU = -500.0
BONE_HU = 300.0


@dataclass(frozen=True)
class SliceScoreTrack:
    """Anatomical score per axial slice, each within [-12, +12]."""

    scores: tuple[float, ...]
    source: str  # {"sidecar", "heuristic"}
    insufficient_anatomy: bool = False

    def __post_init__(self):
        scores = tuple(float(s) for s in self.scores)
        if len(scores) < 1:
            raise ValidationError("score track must cover at least one slice")
        arr = np.asarray(scores)
        if not np.isfinite(arr).all():
            raise ValidationError("slice scores must be finite")
        if arr.min() < SCORE_MIN or arr.max() > SCORE_MAX:
            raise ValidationError(
                f"slice scores must lie in [{SCORE_MIN:g}, {SCORE_MAX:g}]; "
                f"got range [{arr.min():g}, {arr.max():g}]"
            )
        if self.source not in ("sidecar", "heuristic"):
            raise ValidationError(f"unknown score source {self.source!r}")
        object.__setattr__(self, "scores", scores)

    @property
    def n_slices(self) -> int:
        return len(self.scores)


@dataclass(frozen=True)
class CropRecord:
    """Inclusive axial slice range kept by a crop, with the score bounds used."""

    first_slice: int
    last_slice: int
    lo: float
    hi: float

    def __post_init__(self):
        if not 0 <= self.first_slice <= self.last_slice:
            raise ValidationError(
                f"invalid slice range [{self.first_slice}, {self.last_slice}]"
            )

    @property
    def n_slices(self) -> int:
        return self.last_slice - self.first_slice + 1

    def to_dict(self) -> dict:
        return {
            "first_slice": self.first_slice,
            "last_slice": self.last_slice,
            "lo": self.lo,
            "hi": self.hi,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "CropRecord":
        return cls(
            first_slice=int(payload["first_slice"]),
            last_slice=int(payload["last_slice"]),
            lo=float(payload["lo"]),
            hi=float(payload["hi"]),
        )


def default_sidecar_path(volume_path) -> Path:
    """Score sidecar convention: ``<volume-stem>.bpr.json`` next to the volume."""
    path = Path(volume_path)
    stem = path.name
    for suffix in (".gz", ".nii"):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
    return path.with_name(stem + ".bpr.json")


def load_scores(path, vol: ImageVolume) -> SliceScoreTrack:
    """Load a score sidecar and validate it against the paired volume."""
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read score sidecar {path}: {exc}") from exc
    if not isinstance(payload, dict) or "scores" not in payload:
        raise FormatError(f"{path}: sidecar must be an object with a 'scores' array")
    scores = payload["scores"]
    declared = payload.get("n_slices", len(scores))
    if declared != len(scores):
        raise FormatError(
            f"{path}: n_slices={declared} disagrees with {len(scores)} scores"
        )
    if len(scores) != vol.geometry.dims[2]:
        raise ShapeMismatchError(
            f"{path}: {len(scores)} scores for a volume with "
            f"{vol.geometry.dims[2]} axial slices"
        )
    return SliceScoreTrack(scores=tuple(scores), source="sidecar")


def estimate_scores(vol: ImageVolume) -> SliceScoreTrack:
    """Heuristic monotone score track from air- and bone-fraction profiles.

    Slices toward the head are air-dominated (lungs), slices toward the
    pelvis are bone-dominated, so ``bone_fraction - air_fraction`` rises
    from head to pelvis. The profile is made monotone by isotonic
    regression (non-increasing along +z) and mapped affinely onto
    [-12, +12]. This is a rough fallback for when no sidecar exists, not a
    replacement for a trained per-slice scorer.
    """
    if not vol.geometry.is_canonical():
        raise ValidationError("estimate_scores requires a canonical-orientation volume")
    n = vol.geometry.dims[2]
    if n <= 3:
        raise InsufficientExtentError(
            f"cannot estimate slice scores for a {n}-slice volume"
        )
    data = vol.data
    air = (data < AIR_HU).mean(axis=(0, 1))
    bone = (data > BONE_HU).mean(axis=(0, 1))
    raw = bone - air
    z = np.arange(n, dtype=np.float64)
    fit = IsotonicRegression(increasing=False).fit(z, raw).predict(z)
    spread = float(fit.max() - fit.min())
    if spread < 1e-3:
        # no usable anatomy gradient (e.g. all air): fall back to a ramp
        ramp = np.linspace(SCORE_MAX, SCORE_MIN, n)
        return SliceScoreTrack(
            scores=tuple(ramp), source="heuristic", insufficient_anatomy=True
        )
    mapped = SCORE_MIN + (SCORE_MAX - SCORE_MIN) * (fit - fit.min()) / spread
    return SliceScoreTrack(scores=tuple(mapped), source="heuristic")


def _longest_run(mask: np.ndarray) -> tuple[int, int] | None:
    """Longest contiguous True run as (start, stop_inclusive); ties -> earliest."""
    best = None
    start = None
    for i, flag in enumerate(list(mask) + [False]):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            length = i - start
            if best is None or length > best[1] - best[0] + 1:
                best = (start, i - 1)
            start = None
    return best


def crop_by_score(
    vol: ImageVolume, track: SliceScoreTrack, lo: float = DEFAULT_CROP_LO,
    hi: float = DEFAULT_CROP_HI,
) -> tuple[ImageVolume, CropRecord]:
    """Crop to the contiguous run of axial slices with score in [lo, hi].

    Non-monotone tracks keep the longest in-range run (ties broken toward
    the earlier run). Retained voxels keep their world positions: only the
    axial extent and origin change.
    """
    lo, hi = float(lo), float(hi)
    if not lo < hi:
        raise ValidationError(f"crop range requires lo < hi, got [{lo}, {hi}]")
    if track.n_slices != vol.geometry.dims[2]:
        raise ShapeMismatchError(
            f"score track has {track.n_slices} entries for a volume with "
            f"{vol.geometry.dims[2]} axial slices"
        )
    scores = np.asarray(track.scores)
    run = _longest_run((scores >= lo) & (scores <= hi))
    if run is None:
        raise EmptyCropError(
            f"no axial slice has a score within [{lo:g}, {hi:g}]"
        )
    record = CropRecord(first_slice=run[0], last_slice=run[1], lo=lo, hi=hi)
    return apply_crop(vol, record), record


def apply_crop(vol, record: CropRecord):
    """Apply an existing crop record to a volume sharing the same axial extent.

    Used to crop label volumes (or re-crop) consistently with an image crop.
    """
    geom = vol.geometry
    if record.last_slice >= geom.dims[2]:
        raise ShapeMismatchError(
            f"crop record ends at slice {record.last_slice} but volume has "
            f"{geom.dims[2]} slices"
        )
    if record.first_slice == 0 and record.last_slice == geom.dims[2] - 1:
        return vol
    data = vol.data[:, :, record.first_slice : record.last_slice + 1]
    new_geom = GridGeometry(
        dims=(geom.dims[0], geom.dims[1], record.n_slices),
        spacing=geom.spacing,
        origin=tuple(geom.voxel_to_world([0, 0, record.first_slice])),
        direction=geom.direction,
    )
    return replace(vol, geometry=new_geom, data=np.ascontiguousarray(data))
