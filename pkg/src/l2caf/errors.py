"""Exception hierarchy shared by every module."""


class L2CafError(Exception):
    """Base class for library errors."""


class ShapeError(L2CafError, ValueError):
    """Operands or layer specs have incompatible shapes."""


class NonFiniteError(L2CafError, FloatingPointError):
    """An operation produced NaN or Inf."""


class DegenerateFilterError(L2CafError, ValueError):
    """A filter (or vector) with zero L2 norm cannot be normalized."""


class IncompatibleModelError(L2CafError, ValueError):
    """The model head or architecture does not support the requested method."""


class EmptyMaskError(L2CafError, ValueError):
    """A thresholded heatmap has no foreground pixel."""


class ModelFileError(L2CafError, OSError):
    """Base class for `.tnet` read failures. ``code`` is stable across releases."""

    code = 10


class ManifestError(ModelFileError):
    code = 11


class TruncatedBlobError(ModelFileError):
    code = 12


class ChecksumError(ModelFileError):
    code = 13
