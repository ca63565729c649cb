"""Exception types shared across the package."""


class PMMoEError(Exception):
    """Base class for every error raised by pmmoe."""


class DimensionError(PMMoEError, ValueError):
    pass


class ParameterError(PMMoEError, ValueError):
    pass


class PartitionError(PMMoEError, ValueError):
    pass


class FormatError(PMMoEError, ValueError):
    """Input file does not follow the expected binary or text layout."""


class TruncatedFileError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


class ConfigError(PMMoEError, ValueError):
    pass


class StageError(PMMoEError, RuntimeError):
    """A pipeline stage failed; ``stage`` names which one."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
