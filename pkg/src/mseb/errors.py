"""Exception hierarchy shared by all mseb modules."""


class MsebError(Exception):
    """Base class for all package errors."""


class DimensionError(MsebError):
    """Tensor/array shapes are incompatible with the requested operation."""


class DegenerateInputError(MsebError):
    """Input is numerically degenerate (zero power, near-zero norm, ...)."""


class NumericsError(MsebError):
    """An operation produced or received non-finite values."""


class TapeError(MsebError):
    """Autodiff tape misuse (backward without forward, double backward, ...)."""


class FormatError(MsebError):
    """A serialized artifact (checkpoint, trial file, ...) is malformed."""


class UnsupportedConfigError(MsebError):
    """A configuration is outside the supported envelope (e.g. K > 3)."""


class ConfigError(MsebError):
    """A run configuration file is invalid (unknown keys, bad values)."""


class TrainingDiverged(MsebError):
    """Training aborted on non-finite loss; carries the partial state."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
