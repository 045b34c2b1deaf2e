"""Exception hierarchy for probact."""


class ProbactError(Exception):
    """Base class for all probact errors."""


class ShapeError(ProbactError, ValueError):
    """Operands have incompatible shapes or ranks."""


class NumericError(ProbactError, ArithmeticError):
    """A non-finite value was produced or encountered."""

    def __init__(self, message: str, index: tuple[int, ...] | None = None) -> None:
        if index is not None:
            message = f"{message} (element {index})"
        super().__init__(message)
        self.index = index


class TrainingDivergedError(NumericError):
    """Loss or activations became non-finite during training."""

    def __init__(self, message: str, epoch: int, batch: int) -> None:
        super().__init__(f"{message} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class UsageError(ProbactError, RuntimeError):
    """An API was called in a state that does not allow it."""


class DatasetFormatError(ProbactError, ValueError):
    """A dataset file does not follow the expected binary layout."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class CheckpointError(ProbactError, ValueError):
    """A checkpoint is unreadable or does not match the model it is loaded into."""
