"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions or channel counts do not match an operation's contract."""


class ConfigError(ValueError):
    """Invalid model or generator configuration."""


class CompatibilityError(ValueError):
    """Source vector violates the zero-sum solvability condition of a Neumann solve."""


class StabilityError(RuntimeError):
    """An explicit time-stepping scheme was asked to run outside its stability bound."""


class FormatError(ValueError):
    """A dataset or weights file is malformed, truncated, or fails its checksum."""


class UsageError(RuntimeError):
    """An API was called out of protocol (e.g. backward through an unrecorded loss)."""


class ConvergenceError(RuntimeError):
    """A probe was given a model that is not converged enough to be probed."""
