"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """A numeric argument lies outside its legal domain (e.g. tau <= 0)."""


class NumericError(ArithmeticError):
    """A computation produced NaN or infinity."""


class TrainingDivergedError(NumericError):
    """Training hit a non-finite value. Carries the global step index."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class DataError(ValueError):
    """Input data violates a structural precondition (asymmetry, non-finite)."""


class EvaluationError(RuntimeError):
    """A user-supplied function returned a non-finite value."""


class SamplingError(ValueError):
    """Batch sampling contract cannot be satisfied (too few identities, etc.)."""


class ConfigError(ValueError):
    """A configuration document or object is invalid."""


class IncompatibleModelsError(ValueError):
    """Model structures that must match (for averaging/merging) do not."""


class FormatError(ValueError):
    """A serialized file is malformed. Carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class GateTrainingError(RuntimeError):
    """Gate training cannot proceed (no pseudo-supervision available)."""
