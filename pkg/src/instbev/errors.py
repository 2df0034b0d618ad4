"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Inconsistent configuration (mismatched views, dims, empty rigs)."""


class InputError(ValueError):
    """Numerically invalid input such as non-finite values or zero-norm vectors."""


class OutOfRangeError(ValueError):
    """Geometry that falls entirely outside the BEV perception range."""


class DegenerateSceneError(RuntimeError):
    """Scene that admits no valid sample (e.g. no eligible background cell)."""
