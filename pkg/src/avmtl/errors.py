"""Exception types shared across the pipeline.

Each family maps onto one CLI exit code (see :mod:`avmtl.cli`).
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(RuntimeError):
    """Input data is missing, malformed or violates a dataset contract."""


class AnnotationParseError(DataError):
    def __init__(self, path, line_no, reason):
        self.path = str(path)
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"{self.path}:{line_no}: {reason}")


class CheckpointError(RuntimeError):
    """Checkpoint file is unreadable, of the wrong kind, or of an unsupported version."""


class ContractError(ValueError):
    """A function was called with arguments that break its documented contract."""
