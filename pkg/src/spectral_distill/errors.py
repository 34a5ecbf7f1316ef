"""Exception types shared across the package."""


class AssumptionError(ValueError):
    """A named model or method assumption is violated.

    The message states the assumption in words so callers (and the CLI,
    which maps this to exit code 3) can surface exactly what failed.
    """


class NumericalError(RuntimeError):
    """A quadrature, linear solve, or limit check failed numerically."""


class StructuralError(RuntimeError):
    """The computed object does not have its guaranteed structure.

    Raised e.g. when the optimal-rule denominator does not produce the
    expected real root pattern, which signals a model sitting on top of
    an excluded degeneracy rather than a recoverable condition.
    """
