"""Command-line entry points.

One verb per operation: single-volume utilities (crop, warp, invert,
transfer-labels), registration (affine, deform), atlas products
(atlas-mean, atlas-var, fuse-labels) and batch orchestration (pipeline,
eval, ablate). Batch verbs read a JSON config; flags override config
fields. Exit code 0 on success, 1 on a fatal configuration or input
error, 2 when the batch completed but at least one subject failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .atlas import fuse_labels_majority, mean_map, variance_map
from .errors import CTAtlasError
from .nifti import read_labels, read_volume, write_volume
from .pipeline import PipelineConfig, run_ablation, run_eval, run_pipeline
from .registration import (
    AffineRegistration,
    DeformableRegistration,
    RegistrationLevels,
)
from .scores import (
    DEFAULT_CROP_HI,
    DEFAULT_CROP_LO,
    crop_by_score,
    default_sidecar_path,
    estimate_scores,
    load_scores,
)
from .transforms import (
    invert_field,
    load_affine,
    read_field,
    save_affine,
    transfer_labels_inverse,
    warp_volume,
    write_field,
)
from .volume import reorient_canonical

log = logging.getLogger(__name__)


def _read_canonical(path):
    return reorient_canonical(read_volume(path))


def _levels_from_args(args) -> RegistrationLevels:
    kwargs = {}
    if getattr(args, "levels", None) is not None:
        kwargs["n_levels"] = args.levels
    if getattr(args, "alpha", None) is not None:
        kwargs["alpha"] = args.alpha
    return RegistrationLevels(**kwargs)


def _config_from_args(args) -> PipelineConfig:
    """Load the JSON config, then apply any flag overrides."""
    config = PipelineConfig.from_json(args.config)
    payload = config.to_dict()
    if getattr(args, "atlas", None) is not None:
        payload["atlas_path"] = args.atlas
    if getattr(args, "out", None) is not None:
        payload["out_dir"] = args.out
    if getattr(args, "lo", None) is not None or getattr(args, "hi", None) is not None:
        crop = payload["crop"] or [DEFAULT_CROP_LO, DEFAULT_CROP_HI]
        lo = args.lo if args.lo is not None else crop[0]
        hi = args.hi if args.hi is not None else crop[1]
        payload["crop"] = [lo, hi]
    if getattr(args, "levels", None) is not None:
        payload["levels"] = RegistrationLevels(
            n_levels=args.levels,
            alpha=payload["levels"].get("alpha", 1.0),
        ).to_dict()
    if getattr(args, "alpha", None) is not None:
        payload["levels"]["alpha"] = args.alpha
    if getattr(args, "workers", None) is not None:
        payload["workers"] = args.workers
    if getattr(args, "qa_threshold", None) is not None:
        payload["qa_threshold"] = args.qa_threshold
    return PipelineConfig.from_dict(payload)


def _cmd_crop(args) -> int:
    vol = _read_canonical(args.volume)
    if args.scores:
        track = load_scores(args.scores, vol)
    elif default_sidecar_path(args.volume).exists():
        track = load_scores(default_sidecar_path(args.volume), vol)
    else:
        track = estimate_scores(vol)
    cropped, record = crop_by_score(vol, track, args.lo, args.hi)
    write_volume(cropped, args.out)
    record_path = Path(args.out).with_suffix("").with_suffix("")
    record_path = record_path.parent / (record_path.name + ".crop.json")
    record_path.write_text(json.dumps(record.to_dict(), indent=2) + "\n")
    print(f"kept slices {record.first_slice}..{record.last_slice} "
          f"({record.n_slices} of {vol.geometry.dims[2]})")
    return 0


def _cmd_affine(args) -> int:
    fixed = _read_canonical(args.atlas)
    moving = _read_canonical(args.moving)
    est = AffineRegistration(levels=_levels_from_args(args))
    est.fit(fixed, moving)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_affine(est.affine_, out_dir / "affine.txt")
    write_volume(est.transform(moving), out_dir / "warped.nii.gz")
    print(f"affine objective per level: "
          f"{', '.join(f'{v:.4f}' for v in est.level_objectives_)}")
    return 0


def _cmd_deform(args) -> int:
    fixed = _read_canonical(args.atlas)
    moving = _read_canonical(args.moving)
    est = DeformableRegistration(levels=_levels_from_args(args))
    est.fit(fixed, moving)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_field(est.field_, out_dir / "field.nii.gz")
    write_volume(est.transform(moving), out_dir / "warped.nii.gz")
    print(f"deformable objective per level: "
          f"{', '.join(f'{v:.4f}' for v in est.level_objectives_)}")
    return 0


def _cmd_warp(args) -> int:
    if args.labels:
        vol = reorient_canonical(read_labels(args.volume))
    else:
        vol = _read_canonical(args.volume)
    transform = load_affine(args.affine) if args.affine else None
    fld = read_field(args.field) if args.field else None
    target = _read_canonical(args.like).geometry if args.like else None
    interp = "nearest" if args.labels else "trilinear"
    write_volume(warp_volume(vol, transform, fld, target, interp=interp),
                 args.out)
    return 0


def _cmd_invert(args) -> int:
    fld = read_field(args.field)
    inverse = invert_field(fld)
    write_field(inverse, args.out)
    print(f"composition residual: mean {inverse.residual_mean:.4f} vox, "
          f"max {inverse.residual_max:.4f} vox")
    return 0


def _cmd_transfer_labels(args) -> int:
    atlas_labels = reorient_canonical(read_labels(args.atlas_labels))
    transform = load_affine(args.affine)
    fld = read_field(args.field)
    subject = _read_canonical(args.subject)
    out = transfer_labels_inverse(atlas_labels, transform, fld,
                                  subject.geometry)
    write_volume(out, args.out)
    return 0


def _cmd_atlas_mean(args) -> int:
    volumes = [_read_canonical(p) for p in args.volumes]
    write_volume(mean_map(volumes), args.out)
    return 0


def _cmd_atlas_var(args) -> int:
    volumes = [_read_canonical(p) for p in args.volumes]
    write_volume(variance_map(volumes, mean_map(volumes)), args.out)
    return 0


def _cmd_fuse_labels(args) -> int:
    stacks = [reorient_canonical(read_labels(p)) for p in args.labels]
    write_volume(fuse_labels_majority(stacks), args.out)
    return 0


def _cmd_pipeline(args) -> int:
    run = run_pipeline(_config_from_args(args))
    for result in run.results:
        print(f"{result.subject_id}: similarity {result.similarity:.4f} "
              f"[{result.qa_flag}]")
    for failure in run.failures:
        print(f"{failure['subject_id']}: FAILED ({failure['error']})",
              file=sys.stderr)
    print(f"atlas bundles: {', '.join(sorted(run.bundles)) or 'none'}")
    return 2 if run.failures else 0


def _cmd_eval(args) -> int:
    report = run_eval(_config_from_args(args))
    print(report.to_text())
    return 2 if report.failures else 0


def _parse_range(text: str):
    if text == "full":
        return None
    try:
        lo, hi = text.split(":")
        return (float(lo), float(hi))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(
            f"expected LO:HI or 'full', got {text!r}"
        ) from exc


def _cmd_ablate(args) -> int:
    table = run_ablation(_config_from_args(args), args.range)
    print(table.to_text())
    return 0


def _add_levels_flags(parser):
    parser.add_argument("--levels", type=int, default=None,
                        help="number of resolution levels")
    parser.add_argument("--alpha", type=float, default=None,
                        help="regularization weight")


def _add_batch_flags(parser):
    parser.add_argument("--config", required=True, help="JSON config path")
    parser.add_argument("--atlas", default=None, help="override atlas path")
    parser.add_argument("--out", default=None, help="override output directory")
    parser.add_argument("--lo", type=float, default=None,
                        help="override crop range lower bound")
    parser.add_argument("--hi", type=float, default=None,
                        help="override crop range upper bound")
    _add_levels_flags(parser)
    parser.add_argument("--workers", type=int, default=None,
                        help="parallel subject workers")
    parser.add_argument("--qa-threshold", dest="qa_threshold", type=float,
                        default=None,
                        help="similarity floor below which subjects are flagged")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctatlas",
        description="Volumetric CT registration and atlas construction.",
    )
    parser.add_argument("--verbose", action="store_true",
                        help="enable info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("crop", help="crop a volume to a slice-score range")
    p.add_argument("volume", help="input volume (.nii or .nii.gz)")
    p.add_argument("--scores", default=None,
                   help="score sidecar (defaults to <volume>.bpr.json, "
                        "else estimated)")
    p.add_argument("--lo", type=float, default=DEFAULT_CROP_LO)
    p.add_argument("--hi", type=float, default=DEFAULT_CROP_HI)
    p.add_argument("--out", required=True, help="output volume path")
    p.set_defaults(func=_cmd_crop)

    p = sub.add_parser("affine", help="affine registration to an atlas")
    p.add_argument("moving", help="moving volume")
    p.add_argument("--atlas", required=True, help="fixed reference volume")
    p.add_argument("--out", required=True, help="output directory")
    _add_levels_flags(p)
    p.set_defaults(func=_cmd_affine)

    p = sub.add_parser("deform", help="deformable registration to an atlas")
    p.add_argument("moving", help="moving volume (pre-aligned to the atlas grid)")
    p.add_argument("--atlas", required=True, help="fixed reference volume")
    p.add_argument("--out", required=True, help="output directory")
    _add_levels_flags(p)
    p.set_defaults(func=_cmd_deform)

    p = sub.add_parser("warp", help="apply an affine and/or displacement field")
    p.add_argument("volume", help="input volume")
    p.add_argument("--affine", default=None, help="affine matrix file")
    p.add_argument("--field", default=None, help="displacement field volume")
    p.add_argument("--like", default=None,
                   help="volume whose grid defines the output geometry")
    p.add_argument("--labels", action="store_true",
                   help="treat input as labels (nearest-neighbor sampling)")
    p.add_argument("--out", required=True, help="output volume path")
    p.set_defaults(func=_cmd_warp)

    p = sub.add_parser("invert", help="invert a displacement field")
    p.add_argument("field", help="displacement field volume")
    p.add_argument("--out", required=True, help="output field path")
    p.set_defaults(func=_cmd_invert)

    p = sub.add_parser("transfer-labels",
                       help="map atlas labels onto a subject grid")
    p.add_argument("atlas_labels", help="atlas label volume")
    p.add_argument("--affine", required=True, help="subject affine matrix file")
    p.add_argument("--field", required=True, help="subject displacement field")
    p.add_argument("--subject", required=True,
                   help="subject volume defining the output grid")
    p.add_argument("--out", required=True, help="output label path")
    p.set_defaults(func=_cmd_transfer_labels)

    p = sub.add_parser("atlas-mean", help="voxelwise mean of aligned volumes")
    p.add_argument("volumes", nargs="+", help="registered volumes")
    p.add_argument("--out", required=True, help="output volume path")
    p.set_defaults(func=_cmd_atlas_mean)

    p = sub.add_parser("atlas-var",
                       help="normalized log-variance of aligned volumes")
    p.add_argument("volumes", nargs="+", help="registered volumes")
    p.add_argument("--out", required=True, help="output volume path")
    p.set_defaults(func=_cmd_atlas_var)

    p = sub.add_parser("fuse-labels", help="majority-vote label fusion")
    p.add_argument("labels", nargs="+", help="aligned label volumes")
    p.add_argument("--out", required=True, help="output label path")
    p.set_defaults(func=_cmd_fuse_labels)

    p = sub.add_parser("pipeline", help="run the full batch pipeline")
    _add_batch_flags(p)
    p.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("eval",
                       help="inverse label transfer evaluation of a finished run")
    _add_batch_flags(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="crop-range ablation study")
    _add_batch_flags(p)
    p.add_argument("--range", action="append", type=_parse_range,
                   default=None, required=True, metavar="LO:HI|full",
                   help="crop range to try (repeatable)")
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (CTAtlasError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
