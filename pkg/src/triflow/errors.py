"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible; message names both shapes."""


class ContractError(RuntimeError):
    """A documented precondition was violated by the caller."""


class NonFiniteError(ArithmeticError):
    """A NaN or infinity appeared where the contract requires finite values."""


class UnknownWordError(ValueError):
    """A word outside the lexicon was tokenized; message names the word."""


class PlanParseError(ValueError):
    """A decoded plan could not be parsed; carries the raw token ids."""

    def __init__(self, message, raw_tokens):
        super().__init__(message)
        self.raw_tokens = list(raw_tokens)


class CheckpointError(ValueError):
    """A checkpoint file is malformed or has an unsupported version."""


class ConfigError(ValueError):
    """A config file or config value is invalid."""


class StageError(RuntimeError):
    """A training stage was started without its prerequisite checkpoint."""
