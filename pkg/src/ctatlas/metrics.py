"""Label-transfer evaluation: Dice, symmetric Hausdorff distance, Wilcoxon.

Dice is the overlap ratio 2|P∩G|/(|P|+|G|) with explicit empty-mask
conventions (1 when both masks are empty, 0 when exactly one is). The
Hausdorff distance is the symmetric max of the two directed sup-inf
distances between boundary voxel centers in millimetres. Method
comparisons use the two-sided Wilcoxon signed-rank test, exact for small
samples.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.stats import rankdata

from .errors import (
    DegenerateSampleError,
    ShapeMismatchError,
    UndefinedDistanceError,
    ValidationError,
)
from .volume import LabelVolume

_EXACT_MAX_N = 12


def _as_mask(vol, name: str) -> tuple[np.ndarray, tuple | None]:
    """Boolean mask plus spacing (when the input carries geometry)."""
    if isinstance(vol, LabelVolume):
        return vol.data > 0, vol.geometry.spacing
    arr = np.asarray(vol)
    if arr.dtype != bool and not np.issubdtype(arr.dtype, np.integer):
        raise ValidationError(f"{name} must be a binary mask")
    return arr > 0, None


def _check_pair(p, g) -> tuple[np.ndarray, np.ndarray, tuple | None]:
    mask_p, spacing_p = _as_mask(p, "P")
    mask_g, spacing_g = _as_mask(g, "G")
    if mask_p.shape != mask_g.shape:
        raise ShapeMismatchError(
            f"mask shapes differ: {mask_p.shape} vs {mask_g.shape}"
        )
    if isinstance(p, LabelVolume) and isinstance(g, LabelVolume):
        from .geometry import geometry_allclose

        if not geometry_allclose(p.geometry, g.geometry):
            raise ShapeMismatchError("mask geometries differ")
    return mask_p, mask_g, spacing_p or spacing_g


def dice(p, g) -> float:
    """Dice overlap of two binary masks (LabelVolume or integer/bool array)."""
    mask_p, mask_g, _ = _check_pair(p, g)
    size_p = int(mask_p.sum())
    size_g = int(mask_g.sum())
    if size_p == 0 and size_g == 0:
        return 1.0
    if size_p == 0 or size_g == 0:
        return 0.0
    overlap = int(np.logical_and(mask_p, mask_g).sum())
    return 2.0 * overlap / (size_p + size_g)


_FACE_STRUCT = ndimage.generate_binary_structure(3, 1)  # 6-connectivity


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Indices of mask voxels with at least one non-mask face neighbour."""
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=_FACE_STRUCT, border_value=0)
    return np.argwhere(mask & ~eroded)


def hausdorff(p, g, spacing=None) -> float:
    """Symmetric Hausdorff distance (mm) between mask boundaries."""
    mask_p, mask_g, vol_spacing = _check_pair(p, g)
    spacing = spacing if spacing is not None else vol_spacing
    if spacing is None:
        spacing = (1.0, 1.0, 1.0)
    spacing = np.asarray(spacing, dtype=np.float64)
    if not mask_p.any() or not mask_g.any():
        raise UndefinedDistanceError("Hausdorff distance undefined for empty masks")
    pts_p = boundary_voxels(mask_p) * spacing
    pts_g = boundary_voxels(mask_g) * spacing
    d_pg = cKDTree(pts_g).query(pts_p, k=1)[0].max()
    d_gp = cKDTree(pts_p).query(pts_g, k=1)[0].max()
    return float(max(d_pg, d_gp))


def wilcoxon_signed_rank(a, b) -> float:
    """Two-sided Wilcoxon signed-rank p-value for paired samples.

    Zero differences are dropped; ties share average ranks. Up to 12
    nonzero pairs the null distribution is enumerated exactly over all
    2^n sign patterns; larger samples use the normal approximation with
    tie and continuity corrections.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("paired samples must be 1D arrays of equal length")
    diff = a - b
    diff = diff[diff != 0]
    n = len(diff)
    if n == 0:
        raise DegenerateSampleError("all paired differences are zero")
    if n < 5:
        raise ValidationError(
            f"need at least 5 nonzero paired differences, got {n}"
        )
    ranks = rankdata(np.abs(diff))
    w_pos = float(ranks[diff > 0].sum())
    mu = float(ranks.sum()) / 2.0
    if n <= _EXACT_MAX_N:
        patterns = (np.arange(2 ** n)[:, None] >> np.arange(n)[None, :]) & 1
        sums = patterns @ ranks
        observed = abs(w_pos - mu)
        count = int(np.count_nonzero(np.abs(sums - mu) >= observed - 1e-12))
        return count / float(2 ** n)
    sigma = math.sqrt(float((ranks ** 2).sum()) / 4.0)
    z = (abs(w_pos - mu) - 0.5) / sigma
    return float(math.erfc(max(z, 0.0) / math.sqrt(2.0)))


@dataclass(frozen=True)
class EvalRecord:
    """One subject/organ measurement."""

    subject_id: str
    organ: str
    dice: float
    hd_mm: float | None = None
    method: str = ""

    def __post_init__(self):
        if not 0.0 <= self.dice <= 1.0:
            raise ValidationError(f"dice must lie in [0, 1], got {self.dice}")
        if self.hd_mm is not None and self.hd_mm < 0:
            raise ValidationError(f"hd_mm must be >= 0, got {self.hd_mm}")

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "organ": self.organ,
            "dice": self.dice,
            "hd_mm": self.hd_mm,
            "method": self.method,
        }


def _mean_sd(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())  # population sd


@dataclass(frozen=True)
class EvalReport:
    """Per-organ aggregation of evaluation records, Table-style.

    ``failures`` carries per-subject error records (excluded from all
    statistics) so a bad subject never hides the rest of the cohort.
    """

    records: tuple[EvalRecord, ...]
    method: str = ""
    pvalues: dict = field(default_factory=dict)
    failures: tuple[dict, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.records:
            raise ValidationError("report needs at least one record")
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "failures", tuple(self.failures))

    def organs(self) -> list[str]:
        seen = []
        for rec in self.records:
            if rec.organ not in seen:
                seen.append(rec.organ)
        return seen

    def organ_summary(self) -> dict[str, dict]:
        out = {}
        for organ in self.organs():
            dices = [r.dice for r in self.records if r.organ == organ]
            hds = [r.hd_mm for r in self.records
                   if r.organ == organ and r.hd_mm is not None]
            entry = {"n": len(dices)}
            entry["dice_mean"], entry["dice_sd"] = _mean_sd(dices)
            if hds:
                entry["hd_mean"], entry["hd_sd"] = _mean_sd(hds)
            out[organ] = entry
        dices = [r.dice for r in self.records]
        hds = [r.hd_mm for r in self.records if r.hd_mm is not None]
        overall = {"n": len(dices)}
        overall["dice_mean"], overall["dice_sd"] = _mean_sd(dices)
        if hds:
            overall["hd_mean"], overall["hd_sd"] = _mean_sd(hds)
        out["average"] = overall
        return out

    def to_json(self) -> str:
        payload = {
            "method": self.method,
            "records": [r.to_dict() for r in self.records],
            "summary": self.organ_summary(),
            "pvalues": self.pvalues,
            "failures": list(self.failures),
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_text(self) -> str:
        summary = self.organ_summary()
        width = max(len(o) for o in summary) + 2
        lines = [f"method: {self.method}" if self.method else "evaluation report"]
        header = f"{'organ':<{width}}{'n':>4}  {'dice (mean±sd)':>18}  " \
                 f"{'hd mm (mean±sd)':>18}"
        lines.append(header)
        lines.append("-" * len(header))
        for organ, entry in summary.items():
            dice_txt = f"{entry['dice_mean']:.3f}±{entry['dice_sd']:.3f}"
            hd_txt = (f"{entry['hd_mean']:.2f}±{entry['hd_sd']:.2f}"
                      if "hd_mean" in entry else "n/a")
            lines.append(f"{organ:<{width}}{entry['n']:>4}  {dice_txt:>18}  "
                         f"{hd_txt:>18}")
        return "\n".join(lines)


def build_report(records: list[EvalRecord], method: str = "",
                 pvalues: dict | None = None,
                 failures: list[dict] | None = None) -> EvalReport:
    """Aggregate records into per-organ mean ± sd plus an overall row."""
    return EvalReport(records=tuple(records), method=method,
                      pvalues=dict(pvalues or {}),
                      failures=tuple(failures or ()))


def paired_pvalues(report_a: EvalReport, report_b: EvalReport,
                   metric: str = "dice") -> dict[str, float]:
    """Per-organ Wilcoxon p-values between two methods on shared subjects."""
    out = {}
    for organ in report_a.organs():
        a_vals, b_vals = [], []
        b_map = {
            (r.subject_id, r.organ): getattr(r, metric) for r in report_b.records
        }
        for rec in report_a.records:
            if rec.organ != organ:
                continue
            other = b_map.get((rec.subject_id, rec.organ))
            mine = getattr(rec, metric)
            if other is None or mine is None:
                continue
            a_vals.append(mine)
            b_vals.append(other)
        try:
            out[organ] = wilcoxon_signed_rank(a_vals, b_vals)
        except (DegenerateSampleError, ValidationError):
            continue
    return out
