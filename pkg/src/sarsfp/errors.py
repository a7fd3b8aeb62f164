"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ConfigError -> 2, OSError -> 3,
ValidationError / FormatError -> 4.
"""


class SarSfpError(Exception):
    """Base class for all package errors."""


class ConfigError(SarSfpError):
    """Invalid option, unknown identifier or inconsistent configuration."""


class ValidationError(SarSfpError):
    """A domain invariant was violated (parameter ranges, degenerate geometry...)."""


class FormatError(SarSfpError):
    """A file could not be parsed (bad JSON, wrong magic bytes, truncated data)."""


class TrainingDivergedError(SarSfpError):
    """Training produced a non-finite loss."""
