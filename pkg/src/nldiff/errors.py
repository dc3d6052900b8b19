"""Exception types shared across the package.

The CLI maps these onto exit codes: invalid input (``ValueError`` and
subclasses) -> 2, :class:`TheoremViolation` -> 1, :class:`NumericalFailure`
and :class:`DegenerateFitError` -> 3.
"""


class NldiffError(Exception):
    """Base class for package-specific errors."""


class ContractViolation(NldiffError, ValueError):
    """A declared kernel flag does not hold for the evaluated matrix."""


class ResourceLimitError(NldiffError, ValueError):
    """A builder parameter exceeds the dense-matrix budget."""


class PreconditionError(NldiffError):
    """The hypotheses of the requested check/operation are not satisfied.

    Verification drivers treat this as "skip", not as a failure: the
    underlying statement simply does not apply.
    """


class TheoremViolation(NldiffError):
    """A numerically verified statement failed beyond tolerance.

    Carries a ``witness`` (inputs reproducing the violation) when available.
    """

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class PropertyFailure(TheoremViolation):
    """A randomized property check (operator-norm bound) found a violation."""


class NumericalFailure(NldiffError):
    """An algorithm failed for numerical reasons (non-convergence, conditioning)."""


class DegenerateFitError(NumericalFailure):
    """Residuals are at rounding level across the fit window; no rate to fit."""
