"""Exception hierarchy for stablekern.

Every error raised deliberately by the library derives from
:class:`StableKernError`, so callers (and the CLI) can distinguish domain
failures from programming errors.  Subclasses also inherit from the closest
builtin so that generic ``except ValueError`` style handling keeps working.
"""


class StableKernError(Exception):
    """Base class for all stablekern errors."""


class ParameterError(StableKernError, ValueError):
    """A hyperparameter or option is outside its admissible domain."""


class DimensionError(StableKernError, ValueError):
    """A dimension argument is inconsistent with the requested operation."""


class SingularOperatorError(StableKernError, ValueError):
    """A Toeplitz operator with zero leading coefficient cannot be inverted."""


class ConditioningError(StableKernError, ArithmeticError):
    """A numerical factorization failed or is too ill-conditioned to trust."""


class InfeasibleExtensionError(StableKernError, ValueError):
    """A band specification admits no positive definite completion.

    ``index`` is the 1-based position of the first sliding principal block
    that fails the positive definiteness test, when known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DecompositionError(StableKernError, ValueError):
    """A kernel does not admit the requested structural decomposition."""


class DegenerateSystemError(StableKernError, ValueError):
    """The data or system is degenerate for the requested statistic."""


class OptimizationError(StableKernError, RuntimeError):
    """Hyperparameter search failed to produce a usable optimum."""
