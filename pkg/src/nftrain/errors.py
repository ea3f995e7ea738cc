"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A call violated an operation's stated contract."""


class DomainError(ValueError):
    """A numeric argument is outside its valid domain."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf from finite inputs."""


class ConfigError(ValueError):
    """An experiment configuration failed validation."""


class DataFormatError(ValueError):
    """A dataset file is malformed; carries the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(ValueError):
    """A checkpoint file could not be read or does not match the network."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss; carries the epoch/batch where it happened."""

    def __init__(self, epoch, batch):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
