"""Exception hierarchy shared by the package.

Each family maps onto one CLI exit code (see ``refmar.cli``).
"""


class RefmarError(Exception):
    """Base class for package errors."""


class ConfigError(RefmarError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(RefmarError):
    """Problem with input data or dataset bookkeeping."""


class IngestionError(DataError):
    """A slice could not be ingested (non-finite pixels, bad shape, unreadable file)."""


class InsufficientDonorsError(DataError):
    """Not enough eligible reference slices for a sample."""

    def __init__(self, category: str, needed: int, available: int):
        self.category = category
        self.needed = needed
        self.available = available
        super().__init__(
            f"category {category!r}: need {needed} metal-free donor slices from other "
            f"subjects, found {available} (shortfall {needed - available})"
        )


class ShapeMismatchError(RefmarError, ValueError):
    """Array or parameter shapes violate a contract."""


class InjectionError(RefmarError):
    """Adapter injection matched no module."""


class TrainingAbort(RefmarError):
    """Training stopped early (non-finite loss, exhausted schedule)."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(message if step is None else f"step {step}: {message}")
