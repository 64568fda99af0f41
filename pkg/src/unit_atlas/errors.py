"""Exception types raised across the package."""


class UnitAtlasError(Exception):
    """Base class for every error raised by unit_atlas."""


class DimensionError(UnitAtlasError, ValueError):
    """Tensor shapes do not line up for an operation."""

    def __init__(self, message, layer_id=None):
        if layer_id is not None:
            message = f"layer {layer_id!r}: {message}"
        super().__init__(message)
        self.layer_id = layer_id


class ValidationError(UnitAtlasError, ValueError):
    """An argument or record violates its contract."""


class ModelValidationError(ValidationError):
    """The layer graph is malformed (dangling input, cycle, bad arity)."""


class StoreError(UnitAtlasError):
    """Base class for persistence failures."""


class ChecksumError(StoreError):
    pass


class VersionError(StoreError):
    pass


class TruncationError(StoreError):
    pass


class SizeMismatchError(StoreError):
    pass


class DivergenceError(UnitAtlasError, FloatingPointError):
    """Training loss became non-finite."""

    def __init__(self, epoch, message="loss is not finite"):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch
