"""Exception types shared across the package."""


class ValidationError(Exception):
    """Invalid input data, config, or file contents."""


class GenerationError(ValidationError):
    """Synthetic dataset generation could not satisfy the requested spec."""


class NumericalError(Exception):
    """Non-finite loss/gradients or a failed gradient check."""
