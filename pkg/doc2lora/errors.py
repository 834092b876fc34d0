"""Exception hierarchy shared by every doc2lora module."""

from typing import Optional


class Doc2LoraError(Exception):
    """Base class for all library errors."""


class ConfigError(Doc2LoraError, ValueError):
    """Invalid or inconsistent configuration."""


class InvalidDimensionError(ConfigError):
    pass


class ShapeMismatchError(Doc2LoraError, ValueError):
    pass


class TokenizerError(Doc2LoraError, ValueError):
    pass


class BudgetExceededError(Doc2LoraError, ValueError):
    """Prompt plus generation does not fit in the model window."""


class DivergenceError(Doc2LoraError):
    """Training loss became non-finite."""

    def __init__(self, step: int, loss: float, last_finite: Optional[float] = None):
        self.step = step
        self.loss = loss
        self.last_finite = last_finite
        super().__init__(
            f"non-finite loss {loss} at step {step} (last finite loss: {last_finite})"
        )


class AdapterFormatError(Doc2LoraError, ValueError):
    pass


class ChecksumError(AdapterFormatError):
    pass


class UnknownVersionError(AdapterFormatError):
    pass


class HypernetError(Doc2LoraError, ValueError):
    pass


class TaskError(Doc2LoraError, ValueError):
    pass


class PackingError(Doc2LoraError, ValueError):
    pass


class SchemaVersionError(Doc2LoraError):
    pass


class MissingArtifactError(Doc2LoraError):
    pass
