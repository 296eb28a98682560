"""Exception hierarchy shared by all evhar modules."""


class EvharError(Exception):
    """Base class for every error raised by this package."""


class FormatError(EvharError, ValueError):
    """Malformed input data: bad file layout, mismatched resolutions, bad magic."""


class InsufficientInputError(EvharError, ValueError):
    """Not enough input items to perform the operation."""


class ConfigError(EvharError, ValueError):
    """Invalid configuration value."""


class ShapeError(EvharError, ValueError):
    """Tensor shapes incompatible with the requested operation."""


class ContractError(EvharError, RuntimeError):
    """An API contract was violated, e.g. a layer cache reused after backward."""


class LabelError(EvharError, ValueError):
    """Class label outside the valid range."""


class DegenerateClassError(EvharError, ValueError):
    """A class has no samples where at least one is required."""


class EmptyEvaluationError(EvharError, ValueError):
    """Metrics requested over zero samples."""


class CorruptCheckpointError(EvharError):
    """Checkpoint failed magic, version, checksum or shape validation."""
