"""Volumetric CT registration and atlas construction toolkit.

Hierarchical two-stage registration (affine then discrete deformable) of
abdominal CT volumes to a reference template, with score-based field-of-view
cropping, atlas products (mean, normalized log-variance, majority-vote label
fusion) and inverse label-transfer evaluation.
"""
from .atlas import (
    PHASES,
    AtlasBundle,
    build_bundle,
    fuse_labels_majority,
    mean_map,
    variance_map,
    write_bundle,
)
from .descriptor import (
    DescriptorParams,
    SSCDescriptorVolume,
    compute_ssc,
    descriptor_distance,
    mean_descriptor_distance,
)
from .errors import (
    ConfigError,
    CTAtlasError,
    DegenerateFitError,
    DegenerateSampleError,
    EmptyCropError,
    EmptyInputError,
    FormatError,
    GraphError,
    InsufficientCohortError,
    InsufficientExtentError,
    NoOverlapError,
    NonInvertibleFieldError,
    ShapeMismatchError,
    SingularTransformError,
    UndefinedDistanceError,
    UnsupportedOrientationError,
    UnsupportedShapeError,
    ValidationError,
)
from .geometry import GridGeometry, geometry_allclose, voxel_to_world, world_to_voxel
from .metrics import (
    EvalRecord,
    EvalReport,
    boundary_voxels,
    build_report,
    dice,
    hausdorff,
    paired_pvalues,
    wilcoxon_signed_rank,
)
from .mst import grid_edges, minimum_spanning_tree, mst_optimize, tree_objective
from .nifti import read_labels, read_volume, write_volume
from .pipeline import (
    DEFAULT_QA_THRESHOLD,
    AblationTable,
    PipelineConfig,
    PipelineRun,
    SubjectResult,
    SubjectSpec,
    run_ablation,
    run_eval,
    run_pipeline,
)
from .registration import (
    AffineRegistration,
    DeformableRegistration,
    RegistrationLevels,
    TwoStageRegistration,
    register_affine,
    register_deformable,
)
from .scores import (
    DEFAULT_CROP_HI,
    DEFAULT_CROP_LO,
    CropRecord,
    SliceScoreTrack,
    apply_crop,
    crop_by_score,
    estimate_scores,
    load_scores,
)
from .transforms import (
    AffineTransform,
    DisplacementField,
    apply_affine,
    apply_field,
    compose_affine_field,
    invert_field,
    load_affine,
    read_field,
    save_affine,
    transfer_labels_inverse,
    warp_volume,
    write_field,
)
from .volume import (
    DEFAULT_PADDING_HU,
    ImageVolume,
    LabelVolume,
    reorient_canonical,
    resample,
    sample_at_voxels,
)

__version__ = "0.1.0"

__all__ = [
    "PHASES",
    "AtlasBundle",
    "build_bundle",
    "fuse_labels_majority",
    "mean_map",
    "variance_map",
    "write_bundle",
    "DescriptorParams",
    "SSCDescriptorVolume",
    "compute_ssc",
    "descriptor_distance",
    "mean_descriptor_distance",
    "ConfigError",
    "CTAtlasError",
    "DegenerateFitError",
    "DegenerateSampleError",
    "EmptyCropError",
    "EmptyInputError",
    "FormatError",
    "GraphError",
    "InsufficientCohortError",
    "InsufficientExtentError",
    "NoOverlapError",
    "NonInvertibleFieldError",
    "ShapeMismatchError",
    "SingularTransformError",
    "UndefinedDistanceError",
    "UnsupportedOrientationError",
    "UnsupportedShapeError",
    "ValidationError",
    "GridGeometry",
    "geometry_allclose",
    "voxel_to_world",
    "world_to_voxel",
    "EvalRecord",
    "EvalReport",
    "boundary_voxels",
    "build_report",
    "dice",
    "hausdorff",
    "paired_pvalues",
    "wilcoxon_signed_rank",
    "grid_edges",
    "minimum_spanning_tree",
    "mst_optimize",
    "tree_objective",
    "read_labels",
    "read_volume",
    "write_volume",
    "DEFAULT_QA_THRESHOLD",
    "AblationTable",
    "PipelineConfig",
    "PipelineRun",
    "SubjectResult",
    "SubjectSpec",
    "run_ablation",
    "run_eval",
    "run_pipeline",
    "AffineRegistration",
    "DeformableRegistration",
    "RegistrationLevels",
    "TwoStageRegistration",
    "register_affine",
    "register_deformable",
    "DEFAULT_CROP_HI",
    "DEFAULT_CROP_LO",
    "CropRecord",
    "SliceScoreTrack",
    "apply_crop",
    "crop_by_score",
    "estimate_scores",
    "load_scores",
    "AffineTransform",
    "DisplacementField",
    "apply_affine",
    "apply_field",
    "compose_affine_field",
    "invert_field",
    "load_affine",
    "read_field",
    "save_affine",
    "transfer_labels_inverse",
    "warp_volume",
    "write_field",
    "DEFAULT_PADDING_HU",
    "ImageVolume",
    "LabelVolume",
    "reorient_canonical",
    "resample",
    "sample_at_voxels",
    "__version__",
]
