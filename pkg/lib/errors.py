"""Exception hierarchy for splat-align."""


class SplatAlignError(Exception):
    """Base class for all errors raised by splat-align."""


class InputError(SplatAlignError):
    """Invalid argument passed to an operation."""


class ShapeError(InputError):
    """Tensor or array shapes are incompatible."""

    def __init__(self, message, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class InvalidRotationError(InputError):
    """Quaternion cannot be turned into a rotation."""


class NumericError(SplatAlignError):
    """A computation produced NaN or Inf."""


class TrainingError(NumericError):
    """Training hit a non-finite loss or a numeric failure inside a step."""

    def __init__(self, batch_index, loss_value, epoch=None, detail=None):
        where = f"batch {batch_index}" if epoch is None else f"epoch {epoch}, batch {batch_index}"
        if detail is None:
            message = f"Non-finite loss at {where}: {loss_value!r}"
        else:
            message = f"Numeric failure at {where} (loss {loss_value!r}): {detail}"
        super().__init__(message)
        self.batch_index = batch_index
        self.loss_value = loss_value
        self.epoch = epoch
        self.detail = detail


class FormatError(SplatAlignError):
    """A file does not match its expected layout."""


class DataError(SplatAlignError):
    """File or dataset contents violate an invariant."""


class ConfigError(SplatAlignError):
    """Configuration is invalid or inconsistent."""
