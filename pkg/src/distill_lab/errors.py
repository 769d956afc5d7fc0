"""Exception types raised across the package."""


class DistillLabError(Exception):
    """Base class for every error raised by distill_lab."""


class DimensionError(DistillLabError, ValueError):
    pass


class RankError(DistillLabError, ValueError):
    pass


class BatchSizeError(DistillLabError, ValueError):
    pass


class LabelError(DistillLabError, ValueError):
    pass


class ParameterError(DistillLabError, ValueError):
    pass


class SpecError(DistillLabError, ValueError):
    """Invalid construction parameters (network widths, dataset shape, ...)."""


class ConfigurationError(DistillLabError, ValueError):
    """A combination of models/options that cannot work together."""


class NonFiniteError(DistillLabError, FloatingPointError):
    """NaN or Inf produced by an operation while debug checks are on."""


class DivergenceError(DistillLabError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""


class ParseError(DistillLabError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CheckpointError(DistillLabError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class CorruptPayloadError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TopologyMismatchError(CheckpointError):
    pass
