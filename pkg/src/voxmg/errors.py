"""Exception types shared across the package."""


class VoxmgError(Exception):
    """Base class for all package errors."""


class VolumeFormatError(VoxmgError):
    """Malformed VXG1 header."""


class VolumeLengthError(VoxmgError):
    """VXG1 payload shorter than the header promises."""


class ParameterError(VoxmgError, ValueError):
    """Invalid numerical parameter (negative weight, bad count, ...)."""


class SingularOperatorError(VoxmgError):
    """Relaxation hit a zero diagonal."""


class NumericalError(VoxmgError):
    """A direct solve failed (indefinite or rank-deficient beyond deflation)."""


class UnsupportedStencilError(VoxmgError):
    """Coarsened stencil would not fit in a 3x3x3 box."""


class ConfigurationError(VoxmgError):
    """Inconsistent runtime configuration, e.g. a window below budget."""


class DimensionMismatchError(VoxmgError, ValueError):
    """Two volumes that must share dimensions do not."""


class ScratchIOError(VoxmgError, OSError):
    """Reading or writing a scratch or output file failed."""
