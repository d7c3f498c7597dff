"""Exception taxonomy. Each family maps to one CLI exit code."""


class BCPNNError(Exception):
    exit_code = 5


class ConfigError(BCPNNError, ValueError):
    exit_code = 2


class DataFormatError(BCPNNError, ValueError):
    """Malformed dataset or model file."""

    exit_code = 3


class MagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


class ModelVersionError(DataFormatError):
    pass


class NumericalError(BCPNNError, ArithmeticError):
    exit_code = 4


class ShapeError(BCPNNError, ValueError):
    exit_code = 5


class InputError(BCPNNError, ValueError):
    """A caller-supplied value is out of range (label, index, pixel)."""

    exit_code = 2


class StateError(BCPNNError, RuntimeError):
    exit_code = 5


class SynchronizationError(BCPNNError, RuntimeError):
    """Packets with mismatched tags met at a join. Always a pipeline bug."""

    exit_code = 5


class PipelineError(BCPNNError, RuntimeError):
    """A stage failed; carries the stage name and the image tag in flight."""

    exit_code = 5

    def __init__(self, stage, tag, cause):
        self.stage = stage
        self.tag = tag
        self.cause = cause
        code = getattr(cause, "exit_code", None)
        if code is not None:
            self.exit_code = code
        super().__init__(f"stage {stage!r} failed on image {tag}: {cause}")


class DeadlockError(BCPNNError, RuntimeError):
    exit_code = 5


class AccountingError(BCPNNError, RuntimeError):
    """A roofline point sits above its roof; a FLOP or byte counter is wrong."""

    exit_code = 5
