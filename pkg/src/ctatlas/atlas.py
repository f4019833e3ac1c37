"""Atlas products: average mapping, normalized log-variance, fused labels.

All aggregations are voxel-wise over registered volumes sharing one grid,
accumulated as running sums so sharded cohorts reduce associatively.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyInputError, InsufficientCohortError, ValidationError
from .validation import check_image, check_labels, check_same_grid
from .volume import ImageVolume, LabelVolume

PHASES = ("non-contrast", "arterial", "portal-venous", "delayed")


def mean_map(volumes: list[ImageVolume]) -> ImageVolume:
    """Voxel-wise arithmetic mean of registered volumes."""
    if not volumes:
        raise EmptyInputError("mean_map requires at least one volume")
    first = check_image(volumes[0], "volumes[0]")
    total = np.zeros(first.geometry.dims, dtype=np.float64)
    for i, vol in enumerate(volumes):
        check_image(vol, f"volumes[{i}]")
        check_same_grid(first, vol, ("volumes[0]", f"volumes[{i}]"))
        total += vol.data
    return ImageVolume(geometry=first.geometry,
                       data=(total / len(volumes)).astype(np.float32))


def variance_map(volumes: list[ImageVolume], mean: ImageVolume) -> ImageVolume:
    """Log-scale population variance, normalized to [0, 1].

    Per voxel v = mean((x_i - mean)^2); the map is log(1 + v) divided by its
    maximum over the volume (all zeros when every input is identical).
    """
    if len(volumes) < 2:
        raise InsufficientCohortError(
            f"variance needs at least 2 volumes, got {len(volumes)}"
        )
    check_image(mean, "mean")
    total = np.zeros(mean.geometry.dims, dtype=np.float64)
    for i, vol in enumerate(volumes):
        check_image(vol, f"volumes[{i}]")
        check_same_grid(mean, vol, ("mean", f"volumes[{i}]"))
        total += (vol.data.astype(np.float64) - mean.data) ** 2
    log_var = np.log1p(total / len(volumes))
    peak = float(log_var.max())
    if peak > 0:
        log_var /= peak
    return ImageVolume(geometry=mean.geometry, data=log_var.astype(np.float32),
                       padding_value=0.0)


def fuse_labels_majority(label_volumes: list[LabelVolume]) -> LabelVolume:
    """Per-voxel majority vote; ties go to the smallest label id."""
    if not label_volumes:
        raise EmptyInputError("fuse_labels_majority requires at least one volume")
    first = check_labels(label_volumes[0], "label_volumes[0]")
    for i, vol in enumerate(label_volumes):
        check_labels(vol, f"label_volumes[{i}]")
        check_same_grid(first, vol, ("label_volumes[0]", f"label_volumes[{i}]"))
    stack = np.stack([vol.data for vol in label_volumes])
    ids = np.unique(stack)
    best_count = np.zeros(first.geometry.dims, dtype=np.int32)
    winner = np.zeros(first.geometry.dims, dtype=np.uint16)
    for label_id in ids:  # ascending, so strict > keeps the smaller id on ties
        count = (stack == label_id).sum(axis=0, dtype=np.int32)
        better = count > best_count
        winner[better] = label_id
        best_count[better] = count[better]
    return LabelVolume(geometry=first.geometry, data=winner,
                       label_names=first.label_names)


@dataclass(frozen=True)
class AtlasBundle:
    """One phase's atlas products plus their provenance manifest.

    ``variance`` is None for single-subject cohorts (the statistic is
    undefined); ``fused_labels`` is None when no subject labels were given.
    """

    mean: ImageVolume
    variance: ImageVolume | None
    fused_labels: LabelVolume | None
    subject_ids: tuple[str, ...]
    phase: str = "non-contrast"
    parameters_digest: str = ""
    notes: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValidationError(f"phase must be one of {PHASES}, got {self.phase!r}")
        for name, vol in (("variance", self.variance),
                          ("fused_labels", self.fused_labels)):
            if vol is not None:
                check_same_grid(self.mean, vol, ("mean", name))
        if self.variance is not None:
            data = self.variance.data
            if data.min() < 0 or data.max() > 1:
                raise ValidationError("variance map values must lie in [0, 1]")
        object.__setattr__(self, "subject_ids", tuple(self.subject_ids))
        object.__setattr__(self, "notes", tuple(self.notes))

    def manifest(self) -> dict:
        return {
            "phase": self.phase,
            "subject_ids": list(self.subject_ids),
            "parameters_digest": self.parameters_digest,
            "products": {
                "mean": True,
                "variance": self.variance is not None,
                "fused_labels": self.fused_labels is not None,
            },
            "notes": list(self.notes),
        }


def parameters_digest(payload: dict) -> str:
    """Stable digest of the parameter set that produced an atlas."""
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def build_bundle(volumes: list[ImageVolume], labels: list[LabelVolume] | None,
                 subject_ids: list[str], phase: str = "non-contrast",
                 digest: str = "") -> AtlasBundle:
    """Aggregate one phase's registered volumes into an AtlasBundle."""
    mean = mean_map(volumes)
    notes = []
    if len(volumes) >= 2:
        variance = variance_map(volumes, mean)
    else:
        variance = None
        notes.append("variance skipped: cohort has fewer than 2 subjects")
    fused = fuse_labels_majority(labels) if labels else None
    return AtlasBundle(mean=mean, variance=variance, fused_labels=fused,
                       subject_ids=tuple(subject_ids), phase=phase,
                       parameters_digest=digest, notes=tuple(notes))


def write_bundle(bundle: AtlasBundle, out_dir) -> dict:
    """Write atlas products and manifest under ``out_dir``; returns the paths."""
    from .nifti import write_volume

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"manifest": out_dir / "atlas_manifest.json"}
    write_volume(bundle.mean, out_dir / "atlas_mean.nii.gz")
    paths["mean"] = out_dir / "atlas_mean.nii.gz"
    if bundle.variance is not None:
        write_volume(bundle.variance, out_dir / "atlas_variance.nii.gz")
        paths["variance"] = out_dir / "atlas_variance.nii.gz"
    if bundle.fused_labels is not None:
        write_volume(bundle.fused_labels, out_dir / "atlas_labels.nii.gz")
        paths["fused_labels"] = out_dir / "atlas_labels.nii.gz"
    paths["manifest"].write_text(json.dumps(bundle.manifest(), indent=2,
                                            sort_keys=True) + "\n")
    return paths
