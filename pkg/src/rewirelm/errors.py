"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor dimensions do not satisfy an operation's contract."""


class NumericError(ArithmeticError):
    """NaN or non-finite values where finite numbers are required."""


class PreconditionError(ValueError):
    """An operation was called with arguments outside its contract."""


class ConfigError(ValueError):
    """Invalid model or experiment configuration."""


class VocabError(ValueError):
    """Token id outside the model vocabulary."""


class LengthError(ValueError):
    """Sequence too long for the model."""


class SizeError(ValueError):
    """A data budget or size request that cannot be satisfied."""


class AssemblyError(ValueError):
    """Checkpoints cannot be assembled (config or provenance mismatch)."""


class EvaluationError(ValueError):
    """Evaluation request inconsistent with checkpoint provenance."""


class CheckpointError(ValueError):
    """Malformed, corrupt, or mismatched checkpoint on disk."""
