"""Exception types raised across the package."""


class LrssmError(Exception):
    """Base class for all package errors."""


# --- mesh ---------------------------------------------------------------

class CollinearInput(LrssmError):
    """All input points lie on a single line; no triangulation exists."""


class DuplicatePoints(LrssmError):
    """Input contains (numerically) duplicate points."""


class TargetTooSmall(LrssmError):
    """Requested vertex count is below the minimum of 3."""


class PointOutsideMesh(LrssmError):
    """Query point lies outside the mesh hull."""


# --- fem ----------------------------------------------------------------

class DegenerateTriangle(LrssmError):
    """Triangle with (numerically) zero area encountered during assembly."""


class NonPositiveKappa(LrssmError):
    """Rescale parameter kappa must be strictly positive."""


# --- model --------------------------------------------------------------

class CholeskyFailure(LrssmError):
    """Dense covariance not factorizable even after jitter escalation."""


# --- kalman -------------------------------------------------------------

class SingularInnovationCovariance(LrssmError):
    """Innovation covariance could not be solved."""


class SingularPredictedCovariance(LrssmError):
    """Predicted state covariance could not be inverted in the smoother."""


class DimensionTooLarge(LrssmError):
    """Joint-Gaussian oracle dimension cap exceeded."""


# --- em -----------------------------------------------------------------

class SingularNormalEquations(LrssmError):
    """Normal equations of the regression update are singular."""


class NoObservationsForVariable(LrssmError):
    """A variable has no observations at any time step."""


class DegenerateDenominator(LrssmError):
    """Denominator trace of the AR-coefficient update is not positive."""


class SingularRowSystem(LrssmError):
    """Row system of the loading-matrix update is singular."""
