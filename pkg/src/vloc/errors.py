"""Exception types shared across the package."""


class VlocError(Exception):
    """Base class for all package-specific errors."""


# -- geometry ------------------------------------------------------------

class BehindCameraError(VlocError):
    """A point to be projected lies at or behind the camera plane."""


class NonPositiveDepthError(VlocError):
    """Backprojection was requested for a depth <= 0."""


# -- scene database ------------------------------------------------------

class DimensionMismatchError(VlocError):
    """Image/depth dimensions are inconsistent."""


class EmptyDatabaseError(VlocError):
    """An operation requires at least one keyframe."""


class FormatVersionMismatchError(VlocError):
    """A stored file declares a format version this code does not read."""


class ChecksumMismatchError(VlocError):
    """A stored file failed its CRC32 integrity check."""


# -- features ------------------------------------------------------------

class ImageTooSmallError(VlocError):
    """Feature extraction needs at least a 32x32 image."""


class EmptySetError(VlocError):
    """Pooling/aggregation was called on an empty collection."""


class TooFewSamplesError(VlocError):
    """Whitening needs at least two samples."""


# -- virtual views -------------------------------------------------------

class NoSourcesError(VlocError):
    """Projection rendering was called with an empty source list."""


class NoOverlapError(VlocError):
    """No source content projects into the requested view."""


class EmptyMaskError(VlocError):
    """Feature rendering found no populated feature-grid cells."""


class MissingStudentError(VlocError):
    """Distilled feature rendering requires trained student weights."""


# -- matching / retrieval ------------------------------------------------

class EmptyFeatureSetError(VlocError):
    """Descriptor matching requires non-empty feature sets."""


class EmptyCorpusError(VlocError):
    """The retrieval index has no entries."""


# -- pose solving --------------------------------------------------------

class DegenerateConfigurationError(VlocError):
    """Minimal solver input is degenerate (e.g. collinear points)."""


class TooFewCorrespondencesError(VlocError):
    """Robust pose estimation needs at least 4 correspondences."""


class NoModelFoundError(VlocError):
    """RANSAC found no candidate with enough inliers."""


# -- distillation --------------------------------------------------------

class ShapeMismatchError(VlocError):
    """Student/teacher tensor shapes are inconsistent."""


# -- evaluation / config -------------------------------------------------

class IdMismatchError(VlocError):
    """Result ids and ground-truth ids do not line up."""


class InvalidParamsError(VlocError):
    """Parameters violate a documented precondition."""


class ConfigError(VlocError):
    """A config file is malformed or contains unknown keys."""
