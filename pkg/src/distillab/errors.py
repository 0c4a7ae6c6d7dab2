"""Exception types shared across the package."""


class DataFormatError(ValueError):
    """Malformed or inconsistent input data (bad TSV line, duplicate id, ...)."""


class CheckpointError(DataFormatError):
    """A checkpoint or index file failed structural or checksum validation."""


class NonFiniteLossError(RuntimeError):
    """A loss component became NaN or infinite during training."""


class DivergenceError(RuntimeError):
    """Training loss stayed above the divergence threshold for too long."""

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = history
