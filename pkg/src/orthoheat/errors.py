"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Inputs or settings have incompatible shapes or invalid values."""


class OutOfRangeError(ValueError):
    """A point or pose lies outside the region an operation is defined on."""


class DegenerateTargetError(ValueError):
    """A ground-truth heatmap has no mass left after truncation."""


class NonFiniteGradientError(FloatingPointError):
    """Backward pass produced NaN or inf.

    Attributes:
        tensor: name of the offending parameter block.
        batch_index: index of the sample in the batch that triggered it, or -1
            when it cannot be attributed to a single sample.
    """

    def __init__(self, tensor: str, batch_index: int = -1):
        self.tensor = tensor
        self.batch_index = batch_index
        super().__init__(f"non-finite gradient in {tensor!r} (batch index {batch_index})")
