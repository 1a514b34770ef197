"""Exception types shared across the toolkit.

The CLI maps ValidationError (and subclasses) to exit code 2 and any other
runtime failure to exit code 3, so library code should raise ValidationError
for contract violations (bad arguments, malformed files) and dedicated
RuntimeError subclasses for failures of the computation itself.
"""


class ValidationError(ValueError):
    """An input violates a documented precondition or invariant."""


class FormatError(ValidationError):
    """A serialized artifact is malformed; message carries a byte offset."""

    def __init__(self, message: str, *, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ResamplingError(RuntimeError):
    """Center resampling exhausted its retry budget."""

    def __init__(self, message: str, *, achieved_min_distance: int):
        super().__init__(message)
        self.achieved_min_distance = achieved_min_distance


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss; carries the failing epoch/batch."""

    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(
            f"non-finite loss {value!r} at epoch {epoch}, batch {batch}"
        )
        self.epoch = epoch
        self.batch = batch
