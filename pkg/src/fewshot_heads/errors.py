"""Exception types shared across the package.

Contract violations (bad shapes, mismatched dimensions, empty required inputs)
raise plain ValueError; the classes below mark failures the CLI maps to its
exit-code contract (2 for configuration, 1 for data/runtime).
"""


class ConfigurationError(Exception):
    """Invalid configuration: unknown keys, bad values, unavailable extractors."""


class DataError(Exception):
    """Unusable input data: non-finite coordinates, corrupt features."""


class TrainingAborted(RuntimeError):
    """Training stopped on a non-finite loss; carries the last good checkpoint."""

    def __init__(self, message: str, last_checkpoint: str | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
