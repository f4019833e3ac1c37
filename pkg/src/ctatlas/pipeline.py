"""Batch orchestration: crop, register, build atlas products, evaluate.

Subjects run independently (optionally in parallel) through
crop -> center -> affine -> deformable, each writing its transforms and
warped volume under the output directory. Subjects whose post-registration
similarity falls below the QA threshold are flagged and excluded from
atlas aggregation; hard failures are recorded without stopping the batch.
Outputs are deterministic for a given configuration, independent of the
worker count.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .atlas import PHASES, AtlasBundle, build_bundle, parameters_digest, write_bundle
from .descriptor import DescriptorParams
from .errors import ConfigError, CTAtlasError, UndefinedDistanceError
from .metrics import EvalRecord, EvalReport, build_report, dice, hausdorff
from .nifti import read_labels, read_volume, write_volume
from .registration import RegistrationLevels, TwoStageRegistration
from .scores import (
    DEFAULT_CROP_HI,
    DEFAULT_CROP_LO,
    CropRecord,
    apply_crop,
    crop_by_score,
    default_sidecar_path,
    estimate_scores,
    load_scores,
)
from .transforms import (
    AffineTransform,
    load_affine,
    read_field,
    save_affine,
    transfer_labels_inverse,
    warp_volume,
    write_field,
)
from .volume import ImageVolume, LabelVolume, reorient_canonical

log = logging.getLogger(__name__)

# Set below the 5th percentile (-0.69) of post-registration similarity on
# the synthetic validation cohort (ten 48-voxel two-stage runs, see tests)
# with margin for cohort variation. The similarity scale depends on volume
# size; much smaller grids score lower even when well aligned and need an
# explicit threshold.
DEFAULT_QA_THRESHOLD = -0.8


@dataclass(frozen=True)
class SubjectSpec:
    """One manifest entry: where a subject's files live."""

    subject_id: str
    volume: str
    labels: str | None = None
    scores: str | None = None
    phase: str = "non-contrast"

    def __post_init__(self):
        if not self.subject_id:
            raise ConfigError("subject_id must be non-empty")
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "volume": self.volume,
            "labels": self.labels,
            "scores": self.scores,
            "phase": self.phase,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SubjectSpec":
        return cls(
            subject_id=str(payload["subject_id"]),
            volume=str(payload["volume"]),
            labels=payload.get("labels"),
            scores=payload.get("scores"),
            phase=payload.get("phase", "non-contrast"),
        )


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a batch run needs; JSON round-trippable.

    ``crop`` is an (lo, hi) score range or None to skip cropping entirely;
    ``crop_reference`` additionally crops the atlas with its own scores
    (for ranges tighter than the template's own extent).
    """

    atlas_path: str
    subjects: tuple[SubjectSpec, ...]
    out_dir: str
    atlas_labels_path: str | None = None
    crop: tuple[float, float] | None = (DEFAULT_CROP_LO, DEFAULT_CROP_HI)
    crop_reference: bool = False
    descriptor: DescriptorParams = field(default_factory=DescriptorParams)
    levels: RegistrationLevels = field(default_factory=RegistrationLevels)
    qa_threshold: float = DEFAULT_QA_THRESHOLD
    workers: int = 1

    def __post_init__(self):
        if not self.subjects:
            raise ConfigError("subject manifest must be non-empty")
        object.__setattr__(
            self, "subjects", tuple(
                s if isinstance(s, SubjectSpec) else SubjectSpec.from_dict(s)
                for s in self.subjects
            )
        )
        ids = [s.subject_id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise ConfigError("subject ids must be distinct")
        paths = [s.volume for s in self.subjects]
        if len(set(paths)) != len(paths):
            raise ConfigError("subject volume paths must be distinct")
        if self.crop is not None:
            lo, hi = (float(self.crop[0]), float(self.crop[1]))
            if not lo < hi:
                raise ConfigError(f"crop range requires lo < hi, got [{lo}, {hi}]")
            object.__setattr__(self, "crop", (lo, hi))
        if int(self.workers) < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        object.__setattr__(self, "workers", int(self.workers))
        object.__setattr__(self, "qa_threshold", float(self.qa_threshold))

    def to_dict(self) -> dict:
        return {
            "atlas_path": self.atlas_path,
            "atlas_labels_path": self.atlas_labels_path,
            "subjects": [s.to_dict() for s in self.subjects],
            "out_dir": self.out_dir,
            "crop": list(self.crop) if self.crop is not None else None,
            "crop_reference": self.crop_reference,
            "descriptor": self.descriptor.to_dict(),
            "levels": self.levels.to_dict(),
            "qa_threshold": self.qa_threshold,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "PipelineConfig":
        payload = dict(payload)
        if "descriptor" in payload and isinstance(payload["descriptor"], dict):
            payload["descriptor"] = DescriptorParams.from_dict(payload["descriptor"])
        if "levels" in payload and isinstance(payload["levels"], dict):
            payload["levels"] = RegistrationLevels.from_dict(payload["levels"])
        if payload.get("crop") is not None:
            payload["crop"] = tuple(payload["crop"])
        payload["subjects"] = tuple(
            SubjectSpec.from_dict(s) if isinstance(s, dict) else s
            for s in payload.get("subjects", ())
        )
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**payload)

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        try:
            payload = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(payload)

    def parameters_digest(self) -> str:
        return parameters_digest({
            "crop": list(self.crop) if self.crop else None,
            "descriptor": self.descriptor.to_dict(),
            "levels": self.levels.to_dict(),
        })


@dataclass(frozen=True)
class SubjectResult:
    """Per-subject registration outcome and artifact locations."""

    subject_id: str
    phase: str
    crop_record: CropRecord | None
    affine_path: str
    field_path: str
    warped_path: str
    similarity: float
    qa_flag: str  # {"pass", "flagged"}

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "phase": self.phase,
            "crop_record": self.crop_record.to_dict() if self.crop_record else None,
            "affine_path": self.affine_path,
            "field_path": self.field_path,
            "warped_path": self.warped_path,
            "similarity": self.similarity,
            "qa_flag": self.qa_flag,
        }


@dataclass(frozen=True)
class PipelineRun:
    """Everything a batch produced: atlas bundles, results, failures."""

    bundles: dict[str, AtlasBundle]
    results: tuple[SubjectResult, ...]
    failures: tuple[dict, ...]
    out_dir: str


def _load_atlas(config: PipelineConfig) -> ImageVolume:
    try:
        atlas = reorient_canonical(read_volume(config.atlas_path))
    except (CTAtlasError, OSError) as exc:
        raise ConfigError(f"cannot load atlas {config.atlas_path}: {exc}") from exc
    if config.crop is not None and config.crop_reference:
        track = _subject_scores(None, atlas, config.atlas_path)
        atlas, _ = crop_by_score(atlas, track, *config.crop)
    return atlas


def _subject_scores(scores_path, vol: ImageVolume, volume_path):
    """Sidecar scores when available, heuristic estimate otherwise."""
    if scores_path and scores_path != "auto":
        return load_scores(scores_path, vol)
    sidecar = default_sidecar_path(volume_path)
    if sidecar.exists():
        return load_scores(sidecar, vol)
    return estimate_scores(vol)


def _center_translation(moving: ImageVolume, atlas: ImageVolume) -> np.ndarray:
    """World translation aligning volume centers, folded into the affine."""
    lo_m, hi_m = moving.geometry.world_bounds()
    lo_a, hi_a = atlas.geometry.world_bounds()
    return (lo_a + hi_a) / 2.0 - (lo_m + hi_m) / 2.0


def _shift_origin(vol: ImageVolume, shift: np.ndarray) -> ImageVolume:
    geom = vol.geometry
    new_geom = replace(geom, origin=tuple(np.asarray(geom.origin) + shift))
    return replace(vol, geometry=new_geom)


@dataclass
class _SubjectArtifacts:
    result: SubjectResult
    warped: ImageVolume
    warped_labels: LabelVolume | None


def _process_subject(config: PipelineConfig, atlas: ImageVolume,
                     spec: SubjectSpec) -> _SubjectArtifacts:
    vol = reorient_canonical(read_volume(spec.volume))
    labels = None
    if spec.labels:
        labels = reorient_canonical(read_labels(spec.labels))
    crop_record = None
    if config.crop is not None:
        track = _subject_scores(spec.scores, vol, spec.volume)
        vol, crop_record = crop_by_score(vol, track, *config.crop)

    shift = _center_translation(vol, atlas)
    centered = _shift_origin(vol, shift)
    est = TwoStageRegistration(params=config.descriptor, levels=config.levels)
    est.fit(atlas, centered)
    center_mat = np.eye(4)
    center_mat[:3, 3] = shift
    total = AffineTransform(matrix=est.affine_.matrix @ center_mat)

    warped = warp_volume(vol, total, est.field_)
    warped_labels = None
    if labels is not None:
        warped_labels = warp_volume(labels, total, est.field_, interp="nearest")

    subject_dir = Path(config.out_dir) / "subjects" / spec.subject_id
    subject_dir.mkdir(parents=True, exist_ok=True)
    affine_path = subject_dir / "affine.txt"
    field_path = subject_dir / "field.nii.gz"
    warped_path = subject_dir / "warped.nii.gz"
    save_affine(total, affine_path)
    write_field(est.field_, field_path)
    write_volume(warped, warped_path)
    if crop_record is not None:
        (subject_dir / "crop.json").write_text(
            json.dumps(crop_record.to_dict(), indent=2) + "\n"
        )

    similarity = float(est.similarity_)
    qa_flag = "flagged" if similarity < config.qa_threshold else "pass"
    result = SubjectResult(
        subject_id=spec.subject_id, phase=spec.phase, crop_record=crop_record,
        affine_path=str(affine_path), field_path=str(field_path),
        warped_path=str(warped_path), similarity=similarity, qa_flag=qa_flag,
    )
    (subject_dir / "result.json").write_text(
        json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n"
    )
    return _SubjectArtifacts(result=result, warped=warped,
                             warped_labels=warped_labels)


def run_pipeline(config: PipelineConfig) -> PipelineRun:
    """Register every subject to the atlas and build per-phase atlas bundles.

    Per-subject failures are recorded and skipped; only a missing or
    unreadable atlas aborts the run. Flagged subjects keep their artifacts
    but are excluded from atlas aggregation.
    """
    atlas = _load_atlas(config)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    artifacts: dict[str, _SubjectArtifacts] = {}
    failures = []
    if config.workers == 1:
        outcomes = []
        for spec in config.subjects:
            try:
                outcomes.append((spec.subject_id,
                                 _process_subject(config, atlas, spec), None))
            except Exception as exc:  # noqa: BLE001 - isolation contract
                outcomes.append((spec.subject_id, None, exc))
    else:
        outcomes = []
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            futures = [
                (spec.subject_id, pool.submit(_process_subject, config, atlas, spec))
                for spec in config.subjects
            ]
            for subject_id, fut in futures:
                try:
                    outcomes.append((subject_id, fut.result(), None))
                except Exception as exc:  # noqa: BLE001
                    outcomes.append((subject_id, None, exc))

    for subject_id, outcome, exc in outcomes:
        if exc is not None:
            log.warning("subject %s failed: %s", subject_id, exc)
            failures.append({"subject_id": subject_id, "error": str(exc)})
            continue
        artifacts[subject_id] = outcome

    results = tuple(artifacts[s.subject_id].result for s in config.subjects
                    if s.subject_id in artifacts)

    digest = config.parameters_digest()
    bundles: dict[str, AtlasBundle] = {}
    for phase in PHASES:
        phase_arts = [
            artifacts[s.subject_id] for s in config.subjects
            if s.subject_id in artifacts and s.phase == phase
            and artifacts[s.subject_id].result.qa_flag == "pass"
        ]
        if not phase_arts:
            continue
        volumes = [a.warped for a in phase_arts]
        labels = [a.warped_labels for a in phase_arts if a.warped_labels is not None]
        bundle = build_bundle(
            volumes, labels or None,
            [a.result.subject_id for a in phase_arts],
            phase=phase, digest=digest,
        )
        write_bundle(bundle, out_dir / "atlas" / phase)
        bundles[phase] = bundle

    summary = {
        "results": [r.to_dict() for r in results],
        "failures": failures,
        "phases": sorted(bundles),
        "parameters_digest": digest,
    }
    (out_dir / "pipeline_results.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n"
    )
    return PipelineRun(bundles=bundles, results=results,
                       failures=tuple(failures), out_dir=str(out_dir))


def _organ_name(label_id: int, names: dict | None) -> str:
    if names and label_id in names:
        return names[label_id]
    return f"organ_{label_id}"


def _eval_subject(config: PipelineConfig, atlas_labels: LabelVolume,
                  spec: SubjectSpec) -> list[EvalRecord]:
    if not spec.labels:
        raise ConfigError(f"subject {spec.subject_id} has no ground-truth labels")
    subject_dir = Path(config.out_dir) / "subjects" / spec.subject_id
    affine = load_affine(subject_dir / "affine.txt")
    fld = read_field(subject_dir / "field.nii.gz")
    vol = reorient_canonical(read_volume(spec.volume))
    gt = reorient_canonical(read_labels(spec.labels))
    transferred = transfer_labels_inverse(atlas_labels, affine, fld,
                                          vol.geometry)
    ids = sorted(set(np.unique(gt.data)) | set(np.unique(transferred.data)))
    records = []
    for label_id in ids:
        if label_id == 0:
            continue
        pred = transferred.data == label_id
        truth = gt.data == label_id
        score = dice(pred.astype(np.uint8), truth.astype(np.uint8))
        try:
            hd = hausdorff(pred, truth, spacing=vol.geometry.spacing)
        except UndefinedDistanceError:
            hd = None
        records.append(EvalRecord(
            subject_id=spec.subject_id,
            organ=_organ_name(int(label_id), atlas_labels.label_names),
            dice=score, hd_mm=hd, method="two-stage",
        ))
    return records


def run_eval(config: PipelineConfig) -> EvalReport:
    """Inverse label transfer + Dice/Hausdorff for every subject with labels.

    Expects ``run_pipeline`` outputs (affine + field per subject) on disk
    under the config's output directory.
    """
    if not config.atlas_labels_path:
        raise ConfigError("run_eval requires atlas_labels_path")
    try:
        atlas_labels = reorient_canonical(read_labels(config.atlas_labels_path))
    except (CTAtlasError, OSError) as exc:
        raise ConfigError(
            f"cannot load atlas labels {config.atlas_labels_path}: {exc}"
        ) from exc
    if config.crop is not None and config.crop_reference:
        atlas_vol = reorient_canonical(read_volume(config.atlas_path))
        track = _subject_scores(None, atlas_vol, config.atlas_path)
        record = crop_by_score(atlas_vol, track, *config.crop)[1]
        atlas_labels = apply_crop(atlas_labels, record)
    records = []
    failures = []
    for spec in config.subjects:
        try:
            records.extend(_eval_subject(config, atlas_labels, spec))
        except Exception as exc:  # noqa: BLE001 - isolation contract
            log.warning("eval failed for subject %s: %s", spec.subject_id, exc)
            failures.append({"subject_id": spec.subject_id, "error": str(exc)})
    if not records:
        raise ConfigError("no subject produced evaluation records")
    report = build_report(records, method="two-stage", failures=failures)
    (Path(config.out_dir) / "eval_report.json").write_text(report.to_json() + "\n")
    (Path(config.out_dir) / "eval_report.txt").write_text(report.to_text() + "\n")
    return report


@dataclass(frozen=True)
class AblationTable:
    """Mean Dice per organ for each crop range tried."""

    ranges: tuple[str, ...]
    organs: tuple[str, ...]
    dice: dict[str, dict[str, float]]

    def to_text(self) -> str:
        width = max([len(r) for r in self.ranges] + [10]) + 2
        header = f"{'range':<{width}}" + "".join(
            f"{organ:>14}" for organ in self.organs
        ) + f"{'mean':>14}"
        lines = [header, "-" * len(header)]
        for rng in self.ranges:
            row = self.dice[rng]
            cells = "".join(f"{row.get(organ, float('nan')):>14.3f}"
                            for organ in self.organs)
            mean = np.mean([row[o] for o in self.organs if o in row])
            lines.append(f"{rng:<{width}}{cells}{mean:>14.3f}")
        return "\n".join(lines)

    def mean_dice(self, range_key: str) -> float:
        row = self.dice[range_key]
        return float(np.mean([row[o] for o in self.organs if o in row]))


def _range_key(crop: tuple[float, float] | None) -> str:
    if crop is None:
        return "full"
    return f"[{crop[0]:g},{crop[1]:g}]"


def run_ablation(config: PipelineConfig,
                 crop_ranges: list[tuple[float, float] | None]) -> AblationTable:
    """Full pipeline + inverse-transfer Dice for each crop range.

    Each range runs in its own subdirectory of the output directory; the
    result is a range-by-organ table of mean Dice.
    """
    if not crop_ranges:
        raise ConfigError("ablation requires at least one crop range")
    if not config.atlas_labels_path:
        raise ConfigError("ablation requires atlas_labels_path")
    if any(not s.labels for s in config.subjects):
        raise ConfigError("ablation requires ground-truth labels for every subject")
    organs: list[str] = []
    table: dict[str, dict[str, float]] = {}
    keys = []
    for crop in crop_ranges:
        key = _range_key(crop)
        keys.append(key)
        sub_dir = Path(config.out_dir) / f"ablate_{key.replace(',', '_')}"
        sub_config = replace(config, crop=crop, out_dir=str(sub_dir))
        run_pipeline(sub_config)
        report = run_eval(sub_config)
        summary = report.organ_summary()
        row = {}
        for organ, entry in summary.items():
            if organ == "average":
                continue
            row[organ] = entry["dice_mean"]
            if organ not in organs:
                organs.append(organ)
        table[key] = row
    result = AblationTable(ranges=tuple(keys), organs=tuple(organs), dice=table)
    (Path(config.out_dir) / "ablation.txt").write_text(result.to_text() + "\n")
    (Path(config.out_dir) / "ablation.json").write_text(
        json.dumps({"ranges": keys, "organs": organs, "dice": table},
                   indent=2, sort_keys=True) + "\n"
    )
    return result
