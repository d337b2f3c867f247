class SemiGDAError(Exception):
    pass


class ConfigError(SemiGDAError, ValueError):
    pass


class IngestionError(SemiGDAError, ValueError):
    pass


class ShapeError(SemiGDAError, ValueError):
    pass


class DomainError(SemiGDAError, ValueError):
    pass


class TrainingError(SemiGDAError, RuntimeError):
    """Raised when a loss goes non-finite or training cannot proceed.

    ``details`` carries whatever diagnostics were available at the failure
    point (per-term loss values, last good checkpoint, ...).
    """

    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = details or {}


class CheckpointError(SemiGDAError, RuntimeError):
    pass
