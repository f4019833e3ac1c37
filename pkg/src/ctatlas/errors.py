"""Exception types raised across the toolkit.

Every error raised by ctatlas derives from :class:`CTAtlasError` so callers
can catch toolkit failures with a single except clause. Most subclasses also
derive from ValueError because they signal bad inputs.
"""


class CTAtlasError(Exception):
    """Base class for all ctatlas errors."""


class ValidationError(CTAtlasError, ValueError):
    """An input violates a documented invariant."""


class FormatError(CTAtlasError, ValueError):
    """A file is malformed or uses an unsupported on-disk encoding."""


class UnsupportedShapeError(CTAtlasError, ValueError):
    """A volumetric payload is not a single-frame 3D volume."""


class UnsupportedOrientationError(CTAtlasError, ValueError):
    """Direction matrix is not an axis-aligned signed permutation."""


class ShapeMismatchError(CTAtlasError, ValueError):
    """Grids, arrays or score tracks that must agree do not."""


class InsufficientExtentError(CTAtlasError, ValueError):
    """A volume is too small along some axis for the requested operation."""


class EmptyCropError(CTAtlasError, ValueError):
    """No axial slice falls inside the requested score range."""


class NoOverlapError(CTAtlasError, ValueError):
    """Fixed and moving volumes share no world extent."""


class DegenerateFitError(CTAtlasError, ValueError):
    """Point correspondences are rank deficient; no affine fit exists."""


class GraphError(CTAtlasError, ValueError):
    """The control-grid graph is disconnected."""


class SingularTransformError(CTAtlasError, ValueError):
    """An affine transform is not invertible."""


class NonInvertibleFieldError(CTAtlasError, RuntimeError):
    """Fixed-point field inversion diverged."""

    def __init__(self, message: str, residual_mean: float, residual_max: float):
        super().__init__(message)
        self.residual_mean = residual_mean
        self.residual_max = residual_max


class EmptyInputError(CTAtlasError, ValueError):
    """An aggregation received an empty input list."""


class InsufficientCohortError(CTAtlasError, ValueError):
    """Fewer volumes than the statistic requires."""


class UndefinedDistanceError(CTAtlasError, ValueError):
    """Surface distance is undefined because a mask is empty."""


class DegenerateSampleError(CTAtlasError, ValueError):
    """A paired sample carries no usable signed differences."""


class ConfigError(CTAtlasError, ValueError):
    """Pipeline configuration is invalid or inconsistent."""
