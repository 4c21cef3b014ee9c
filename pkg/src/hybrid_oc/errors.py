"""Exception hierarchy shared by all solver layers.

Every solver failure derives from :class:`SolverError` so the CLI can map it
to exit code 3 and print the class name. Flow-level errors carry the partial
arc computed before the failure in ``arc`` (``None`` when nothing was built).
"""

from __future__ import annotations


class SolverError(Exception):
    """Base class for numerical failures raised by the toolkit."""

    def __init__(self, message: str = "", *, arc=None, **info):
        super().__init__(message)
        self.arc = arc
        self.info = info


class ValidationError(ValueError):
    """Invalid user input (parameters, scenario files). Maps to exit code 2."""


# hybrid_core
class TangentialCrossing(SolverError):
    """The flow grazes a guard, so the crossing is not transversal."""


class ZenoDetected(SolverError):
    """Inter-event gaps decay geometrically with an accumulation time inside the window."""


class BlockingDetected(SolverError):
    """The reset re-fired more than ``max_beats`` times at one instant."""


class EscapedDomain(SolverError):
    """The state left the declared state box."""


# saltation / corner
class Tangential(SolverError):
    """dh . f vanishes, so the augmented differential is not unique."""


class NoRealRoot(SolverError):
    """The corner energy equation has no real solution."""


class Underdetermined(SolverError):
    """The reset is not immersive; the costate lift is a solution family."""


class BlockingNonEmpty(SolverError):
    """The beating-set sequence stalls, suggesting a non-empty blocking set."""


# hpmp
class UnboundedBelow(SolverError):
    """The pre-Hamiltonian has no minimum over the control set."""


class NoCandidate(SolverError):
    """No mesh point passed the terminal-residual filter."""


# hjb_dp
class GridTooCoarse(SolverError):
    """An Euler step spans more cells than the crossing logic supports."""


class OutOfGrid(SolverError):
    """A policy query lies outside the grid."""


# cli
class IncompatibleRuns(SolverError):
    """Two run directories cannot be compared."""
