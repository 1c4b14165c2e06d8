"""Exception hierarchy for the solver pipeline.

Every error carries the name of the subsystem that raised it (``module``) and a
human-readable ``detail`` so the CLI can emit a machine-readable payload
``{"error": <class name>, "module": <subsystem>, "detail": <text>}`` on stderr.
"""

from __future__ import annotations


class LqmfgError(Exception):
    """Base class for all domain errors raised by this package."""

    module = "lqmfg"

    def __init__(self, detail: str = "", **context):
        self.detail = detail
        self.context = context
        super().__init__(detail)

    def payload(self) -> dict:
        """Machine-readable error description used by the CLI."""
        return {
            "error": type(self).__name__,
            "module": self.module,
            "detail": self.detail,
        }


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class ModelError(LqmfgError):
    module = "model"


class ModelFormatError(ModelError):
    """Model JSON is structurally malformed (missing keys, bad types)."""


class DimensionMismatch(ModelError):
    """A coefficient, table, or vector has an inconsistent shape or length."""


class NotSymmetric(ModelError):
    """A matrix required to be symmetric deviates beyond tolerance."""

    def __init__(self, which: str, t: float | None = None):
        self.which = which
        self.t = t
        at = "" if t is None else f" at t={t:g}"
        super().__init__(f"{which} is not symmetric{at}", which=which, t=t)


class NotPositiveDefinite(ModelError):
    """A weight matrix required to be positive definite is not."""

    def __init__(self, which: str, t: float | None = None, eigenvalue: float | None = None):
        self.which = which
        self.t = t
        self.eigenvalue = eigenvalue
        at = "" if t is None else f" at t={t:g}"
        ev = "" if eigenvalue is None else f" (smallest eigenvalue {eigenvalue:.3e})"
        super().__init__(f"{which} is not positive definite{at}{ev}", which=which, t=t)


class NotPositiveSemidefinite(ModelError):
    """A weight matrix required to be positive semidefinite is not."""

    def __init__(self, which: str, t: float | None = None, eigenvalue: float | None = None):
        self.which = which
        self.t = t
        self.eigenvalue = eigenvalue
        at = "" if t is None else f" at t={t:g}"
        ev = "" if eigenvalue is None else f" (smallest eigenvalue {eigenvalue:.3e})"
        super().__init__(f"{which} is not positive semidefinite{at}{ev}", which=which, t=t)


class SingularIminusK(ModelError):
    """(I - K) is singular or too ill-conditioned to invert."""


class SingularH(ModelError):
    """The observation noise matrix H is singular at some grid node."""

    def __init__(self, t: float | None = None):
        self.t = t
        at = "" if t is None else f" at t={t:g}"
        super().__init__(f"H is singular{at}", t=t)


class UnknownCoefficient(ModelError):
    """Requested coefficient name does not exist in the model."""


class TimeOutOfRange(ModelError):
    """Requested time lies outside [0, T]."""


# ---------------------------------------------------------------------------
# ode / riccati
# ---------------------------------------------------------------------------

class OdeError(LqmfgError):
    module = "riccati"


class Blowup(OdeError):
    """An integrated quantity exceeded the divergence threshold (finite escape)."""

    def __init__(self, t: float, norm: float, what: str = "solution"):
        self.t = t
        self.norm = norm
        self.what = what
        super().__init__(
            f"{what} norm {norm:.3e} exceeded blow-up threshold at t={t:g}",
            t=t, norm=norm,
        )


class NonFinite(OdeError):
    """NaN or Inf appeared during integration or simulation."""

    def __init__(self, what: str = "value", t: float | None = None, agent: int | None = None):
        self.t = t
        self.agent = agent
        at = "" if t is None else f" at t={t:g}"
        who = "" if agent is None else f" (agent {agent})"
        super().__init__(f"non-finite {what}{who}{at}", t=t, agent=agent)


class LostPositivity(OdeError):
    """The error-covariance path developed a genuinely negative eigenvalue."""

    def __init__(self, t: float, eigenvalue: float):
        self.t = t
        self.eigenvalue = eigenvalue
        super().__init__(
            f"covariance eigenvalue {eigenvalue:.3e} below tolerance at t={t:g}",
            t=t, eigenvalue=eigenvalue,
        )


class GridMismatch(LqmfgError):
    """Two objects expected to share a time grid do not."""

    module = "riccati"


# ---------------------------------------------------------------------------
# consistency
# ---------------------------------------------------------------------------

class ConsistencyError(LqmfgError):
    module = "consistency"


class NoConvergence(ConsistencyError):
    """Fixed-point iteration exhausted max_iter without meeting tolerance."""

    def __init__(self, max_iter: int, last_delta: float):
        self.max_iter = max_iter
        self.last_delta = last_delta
        super().__init__(
            f"fixed point not converged after {max_iter} iterations "
            f"(last update {last_delta:.3e})",
            max_iter=max_iter, last_delta=last_delta,
        )


class NotScalarModel(ConsistencyError):
    """Operation requires a scalar (n = k = 1) model."""


# ---------------------------------------------------------------------------
# filter
# ---------------------------------------------------------------------------

class FilterError(LqmfgError):
    module = "filter"


class GridOverrun(FilterError):
    """Filter stepped past the final grid node."""


# ---------------------------------------------------------------------------
# population
# ---------------------------------------------------------------------------

class PopulationError(LqmfgError):
    module = "population"


class ConfigMismatch(PopulationError):
    """Simulation configuration is inconsistent with the model or solver paths."""


# ---------------------------------------------------------------------------
# nash
# ---------------------------------------------------------------------------

class NashError(LqmfgError):
    module = "nash"


class BadPerturbation(NashError):
    """Perturbation description is malformed (shape, magnitude, or support)."""


# ---------------------------------------------------------------------------
# cli
# ---------------------------------------------------------------------------

class UsageError(LqmfgError):
    """Bad command line; maps to exit code 2."""

    module = "cli"
