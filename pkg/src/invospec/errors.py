"""Exception types shared across the toolkit.

Exit-code mapping used by the CLI: usage/parse errors -> 1, admissibility -> 2,
numerical consistency -> 3, non-convergence -> 4.
"""


class InvospecError(Exception):
    """Base class for all toolkit errors."""


class UsageError(InvospecError):
    """Invalid arguments or inconsistent inputs (e.g. mismatched lambda)."""


class AdmissibilityError(InvospecError):
    """alpha outside (-1,1) u (C \\ R), or an otherwise inadmissible problem."""


class DegenerateWeightError(AdmissibilityError):
    """arg w1 == arg w2: no special rays exist (excluded weight)."""


class IntegrationError(InvospecError):
    """ODE integration failed (step underflow / overflow). Carries reached x."""

    def __init__(self, message, x_reached=None):
        super().__init__(message)
        self.x_reached = x_reached


class NearEigenvalueError(InvospecError):
    """lambda too close to an eigenvalue for the Weyl construction.

    Carries the offending |det V(S)| (or |det R(0)| for the backward sweep).
    """

    def __init__(self, message, det_value=None):
        super().__init__(message)
        self.det_value = det_value


class RegionError(InvospecError):
    """Search-region boundary too close to a zero. Carries a suggested inflation."""

    def __init__(self, message, suggested_inflation=None):
        super().__init__(message)
        self.suggested_inflation = suggested_inflation


class ConsistencyError(InvospecError):
    """Winding-number bookkeeping failed to close (count mismatch)."""


class ConvergenceError(InvospecError):
    """Extrapolation or classification did not converge to a usable answer."""


class ResidualError(InvospecError):
    """Forward solve failed inside a residual evaluation."""


class AnchorError(InvospecError):
    """No nondegenerate anchor found below the radius cap."""
