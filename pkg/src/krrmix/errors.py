"""Exception types shared across the package."""


class KrrmixError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(KrrmixError):
    """Operands have incompatible shapes for the requested operation."""


class FullyMaskedRow(KrrmixError):
    """A softmax row has zero allowed entries (malformed mask)."""


class SingularDiagonal(KrrmixError):
    """A triangular solve hit a diagonal entry below the floor."""


class SingularMatrix(KrrmixError):
    """A pivot fell below the floor, or an inverse failed the residual check."""


class NonScalarLoss(KrrmixError):
    """backward() was asked to differentiate a non-scalar node."""


class TargetOutOfRange(KrrmixError):
    """A cross-entropy target id is outside [0, vocab)."""


class OddHeadDim(KrrmixError):
    """Rotary encoding needs an even head dimension."""


class ConfigError(KrrmixError):
    """A run config file failed to parse or validate."""


class NonFiniteLoss(KrrmixError):
    """Training produced a NaN/Inf loss; carries the offending step."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class CorpusTooSmall(KrrmixError):
    """A char_lm window does not fit inside the corpus file."""
