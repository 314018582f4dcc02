"""Exception types shared across the library."""


class RoidenseError(Exception):
    """Base class for all library-specific errors."""


class ShapeError(RoidenseError, ValueError):
    """Operands have incompatible or malformed extents."""


class DomainError(RoidenseError, ValueError):
    """A value is outside the domain an operation is defined on."""


class ConfigError(RoidenseError, ValueError):
    """A configuration object cannot be realized (bad field, underflow...)."""


class NumericError(RoidenseError, ArithmeticError):
    """A computation produced a non-finite value."""


class ParseError(RoidenseError, ValueError):
    """A binary record or file could not be decoded.

    Attributes:
        offset: byte offset at which decoding failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UndefinedMetricError(DomainError):
    """A metric's denominator is zero; carries the metric name."""

    def __init__(self, metric: str, reason: str):
        super().__init__(f"metric '{metric}' undefined: {reason}")
        self.metric = metric


class PlacementError(RoidenseError, ValueError):
    """A lesion could not be placed inside the canvas."""


class GenerationError(RoidenseError, RuntimeError):
    """Dataset generation failed; message carries the seed context."""


class TrainingError(RoidenseError, RuntimeError):
    """Training hit a non-finite loss; carries a diagnostic dump."""

    def __init__(self, message: str, epoch: int, batch_index: int,
                 components: dict[str, float] | None = None):
        detail = f"{message} at epoch {epoch}, batch {batch_index}"
        if components:
            parts = ", ".join(f"{k}={v!r}" for k, v in sorted(components.items()))
            detail = f"{detail} [{parts}]"
        super().__init__(detail)
        self.epoch = epoch
        self.batch_index = batch_index
        self.components = dict(components or {})
