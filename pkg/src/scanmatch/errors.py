"""Exception hierarchy shared by the library and the CLI."""


class ScanError(Exception):
    """Base class for all scanmatch errors."""

    exit_code = 1


class DimensionError(ScanError, ValueError):
    exit_code = 2


class DomainError(ScanError, ValueError):
    exit_code = 2


class StateError(ScanError, RuntimeError):
    exit_code = 1


class VocabularyError(ScanError, LookupError):
    exit_code = 3


class ConfigError(ScanError, ValueError):
    exit_code = 2


class SpecError(ConfigError):
    """Invalid synthetic-data or split specification."""


class FormatError(ScanError, ValueError):
    """Malformed data file. ``offset`` is the byte position where parsing failed."""

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(ScanError, ArithmeticError):
    """Non-finite loss or gradient during optimisation."""

    exit_code = 4
