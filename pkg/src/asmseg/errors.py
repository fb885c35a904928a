"""Exception types shared across the package."""


class AsmsegError(Exception):
    """Base class for all asmseg errors."""


class ParameterError(AsmsegError, ValueError):
    """An argument violates an operation's preconditions."""


class DegenerateInputError(AsmsegError, ValueError):
    """Input is structurally valid but numerically unusable (e.g. constant image)."""


class FormatError(AsmsegError):
    """A file does not conform to the expected on-disk format."""


class UnsupportedError(FormatError):
    """A file is recognized but uses a feature outside the supported subset."""


class ConfigurationError(AsmsegError):
    """A configuration value set is inconsistent or incomplete."""


class TransferError(AsmsegError):
    """Weight transfer attempted between incompatible models."""


class PipelineError(AsmsegError):
    """Assembly pipeline wiring failure (missing inputs, dimension mismatches)."""


class CoverageError(AsmsegError):
    """A voxel is not covered by any tile during fusion."""


class NumericError(AsmsegError):
    """Non-finite values encountered where finite math is required."""
