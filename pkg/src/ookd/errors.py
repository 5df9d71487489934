class ValidationError(ValueError):
    """Invalid configuration, clip settings or input data. Carries the offending field when known."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class DatasetError(ValidationError):
    """Missing or malformed files on disk."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
