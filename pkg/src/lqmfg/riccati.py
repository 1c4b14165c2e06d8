"""Deterministic matrix-ODE layer: control Riccati P, error covariance Pi,
offset psi, and the coupling-monotonicity report.

Solvers run on the model's grid with classical RK4 (see :mod:`lqmfg.ode`).
One-dimensional models dispatch to a pure-float fast lane; the matrix lane
covers the general case. Both lanes share the same kernel and are
cross-checked in the test suite.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import errors
from .model import TimeGrid, ValidatedModel
from .ode import rk4_stage_backward, rk4_stage_forward, stage_values_from_nodes

#: Eigenvalue floor below which the covariance solve is declared broken
#: (shallower negative values are clipped to zero as roundoff).
PSD_CLIP_TOL = 1e-10


# ---------------------------------------------------------------------------
# Path containers
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class MatrixPath:
    """A matrix-valued path sampled at every grid node."""

    grid: TimeGrid
    values: np.ndarray  # (n_nodes, d1, d2)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if vals.ndim != 3 or vals.shape[0] != self.grid.n_nodes:
            raise errors.GridMismatch(
                f"matrix path needs shape ({self.grid.n_nodes}, d, d), got {vals.shape}"
            )
        if not np.all(np.isfinite(vals)):
            raise errors.NonFinite("matrix path entry")

    def at_node(self, idx: int) -> np.ndarray:
        return self.values[idx]

    def stage_values(self) -> np.ndarray:
        """Values on the half-step stage grid (cubic midpoint interpolation)."""
        return stage_values_from_nodes(self.values)


@dataclasses.dataclass(frozen=True)
class VectorPath:
    """A vector-valued path sampled at every grid node."""

    grid: TimeGrid
    values: np.ndarray  # (n_nodes, d)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if vals.ndim != 2 or vals.shape[0] != self.grid.n_nodes:
            raise errors.GridMismatch(
                f"vector path needs shape ({self.grid.n_nodes}, d), got {vals.shape}"
            )
        if not np.all(np.isfinite(vals)):
            raise errors.NonFinite("vector path entry")

    def at_node(self, idx: int) -> np.ndarray:
        return self.values[idx]

    def stage_values(self) -> np.ndarray:
        return stage_values_from_nodes(self.values)


@dataclasses.dataclass(frozen=True)
class MonotonicityReport:
    """Pointwise bounds for the coupling-monotonicity sufficient condition."""

    lambda1_bound: float  # max over t of the largest eigenvalue of S1(t)
    lambda2_bound: float  # min over t of the smallest eigenvalue of S2(t)
    satisfied: bool
    worst_t: float        # node achieving lambda1_bound (the binding side)


# ---------------------------------------------------------------------------
# Lane dispatch helpers
# ---------------------------------------------------------------------------

def _pick_scalar_lane(model: ValidatedModel, lane: str) -> bool:
    if lane == "auto":
        return model.n == 1 and model.k == 1
    if lane == "scalar":
        if model.n != 1 or model.k != 1:
            raise errors.NotScalarModel("scalar lane requires n = k = 1")
        return True
    if lane == "matrix":
        return False
    raise ValueError(f"lane must be 'auto', 'scalar', or 'matrix', got {lane!r}")


def _scalar_stages(model: ValidatedModel, name: str) -> list:
    """Stage-grid values of a scalar coefficient as a list of Python floats."""
    return model.stage_values(name).reshape(-1).tolist()


def _stage_inv_R(model: ValidatedModel) -> np.ndarray:
    return np.linalg.inv(model.stage_values("R"))


def _stage_brb(model: ValidatedModel) -> np.ndarray:
    """B R^{-1} B^T on the stage grid."""
    b = model.stage_values("B")
    r_inv = _stage_inv_R(model)
    return np.einsum("sab,sbc,sdc->sad", b, r_inv, b)


def _symmetrize_hook(y: np.ndarray, idx: int) -> np.ndarray:
    return (y + y.T) * 0.5


# ---------------------------------------------------------------------------
# Generic integrator (public operation)
# ---------------------------------------------------------------------------

def integrate_matrix_ode(rhs, boundary: np.ndarray, direction: str, grid: TimeGrid) -> MatrixPath:
    """Classical RK4 for a matrix ODE dY/dt = rhs(t, Y) on the grid.

    ``direction`` is ``"forward"`` (boundary at t=0) or ``"backward"``
    (boundary at t=T, integrated in reversed time with negated right-hand
    side). The boundary value is stored exactly at its end.
    """
    boundary = np.asarray(boundary, dtype=float)
    stage_times = np.linspace(0.0, grid.T, 2 * grid.n_steps + 1)

    def staged(s, y):
        return rhs(stage_times[s], y)

    if direction == "forward":
        nodes = rk4_stage_forward(staged, boundary, grid)
    elif direction == "backward":
        nodes = rk4_stage_backward(staged, boundary, grid)
    else:
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    return MatrixPath(grid, np.stack(nodes))


# ---------------------------------------------------------------------------
# Control Riccati P (backward):  P' + PA + A^T P - P B R^{-1} B^T P + Q = 0
# ---------------------------------------------------------------------------

def solve_P(model: ValidatedModel, lane: str = "auto") -> MatrixPath:
    """Backward control Riccati on the model grid, symmetrized every step."""
    if _pick_scalar_lane(model, lane):
        return _solve_P_scalar(model)
    return _solve_P_matrix(model)


def _solve_P_matrix(model: ValidatedModel) -> MatrixPath:
    a_s = model.stage_values("A")
    q_s = model.stage_values("Q")
    brb_s = _stage_brb(model)

    def rhs(s, p):
        a = a_s[s]
        return -(p @ a + a.T @ p - p @ brb_s[s] @ p + q_s[s])

    nodes = rk4_stage_backward(
        rhs, model.M.astype(float).copy(), model.grid,
        step_hook=_symmetrize_hook, what="control Riccati",
    )
    return MatrixPath(model.grid, np.stack(nodes))


def _solve_P_scalar(model: ValidatedModel) -> MatrixPath:
    a = _scalar_stages(model, "A")
    q = _scalar_stages(model, "Q")
    b = model.stage_values("B").reshape(-1)
    r = model.stage_values("R").reshape(-1)
    brb = (b * b / r).tolist()

    def rhs(s, p):
        return -(2.0 * a[s] * p - brb[s] * p * p + q[s])

    nodes = rk4_stage_backward(
        rhs, float(model.M[0, 0]), model.grid, what="control Riccati"
    )
    return MatrixPath(model.grid, np.asarray(nodes).reshape(-1, 1, 1))


# ---------------------------------------------------------------------------
# Error covariance Pi (forward):
#   Pi' = A Pi + Pi A^T + sigma sigma^T - Pi F^T (H H^T)^{-1} F Pi,  Pi(0) = 0
# ---------------------------------------------------------------------------

def solve_Pi(model: ValidatedModel, lane: str = "auto") -> MatrixPath:
    """Forward filtering-error Riccati; PSD is enforced within roundoff."""
    if _pick_scalar_lane(model, lane):
        return _solve_Pi_scalar(model)
    return _solve_Pi_matrix(model)


def _solve_Pi_matrix(model: ValidatedModel) -> MatrixPath:
    a_s = model.stage_values("A")
    sig_s = model.stage_values("sigma")
    ss_s = np.einsum("sab,scb->sac", sig_s, sig_s)
    f_s = model.stage_values("F")
    h_s = model.stage_values("H")
    hht_inv = np.linalg.inv(np.einsum("sab,scb->sac", h_s, h_s))
    w_s = np.einsum("sba,sbc,scd->sad", f_s, hht_inv, f_s)
    dt = model.grid.dt

    def rhs(s, pi):
        a = a_s[s]
        return a @ pi + pi @ a.T + ss_s[s] - pi @ w_s[s] @ pi

    def hook(pi, idx):
        pi = (pi + pi.T) * 0.5
        evals, evecs = np.linalg.eigh(pi)
        if evals[0] < -PSD_CLIP_TOL:
            raise errors.LostPositivity(t=idx * dt, eigenvalue=float(evals[0]))
        if evals[0] < 0.0:
            pi = (evecs * np.clip(evals, 0.0, None)) @ evecs.T
            pi = (pi + pi.T) * 0.5
        return pi

    nodes = rk4_stage_forward(
        rhs, np.zeros((model.n, model.n)), model.grid,
        step_hook=hook, what="error covariance",
    )
    return MatrixPath(model.grid, np.stack(nodes))


def _solve_Pi_scalar(model: ValidatedModel) -> MatrixPath:
    a = _scalar_stages(model, "A")
    sig = model.stage_values("sigma").reshape(-1)
    ss = (sig * sig).tolist()
    f = model.stage_values("F").reshape(-1)
    h = model.stage_values("H").reshape(-1)
    w = (f * f / (h * h)).tolist()
    dt = model.grid.dt

    def rhs(s, pi):
        return 2.0 * a[s] * pi + ss[s] - w[s] * pi * pi

    def hook(pi, idx):
        if pi < -PSD_CLIP_TOL:
            raise errors.LostPositivity(t=idx * dt, eigenvalue=pi)
        return pi if pi >= 0.0 else 0.0

    nodes = rk4_stage_forward(rhs, 0.0, model.grid, step_hook=hook,
                              what="error covariance")
    return MatrixPath(model.grid, np.asarray(nodes).reshape(-1, 1, 1))


# ---------------------------------------------------------------------------
# Offset psi (backward):
#   psi' + (A^T - P B R^{-1} B^T) psi + P (B K + B_tilde) m + P B r = 0
#   psi(T) = -M l      (r and l are zero without the affine extension)
# ---------------------------------------------------------------------------

def _require_same_grid(model: ValidatedModel, *paths) -> None:
    for path in paths:
        if path.grid != model.grid:
            raise errors.GridMismatch(
                f"path grid {path.grid} does not match model grid {model.grid}"
            )


def solve_psi(model: ValidatedModel, P: MatrixPath, m: VectorPath,
              lane: str = "auto") -> VectorPath:
    """Backward linear offset ODE driven by the control-average limit m."""
    _require_same_grid(model, P, m)
    if _pick_scalar_lane(model, lane):
        return _solve_psi_scalar(model, P, m)
    return _solve_psi_matrix(model, P, m)


def _affine_r_stages(model: ValidatedModel) -> np.ndarray:
    if not model.has_affine:
        return np.zeros((2 * model.grid.n_steps + 1, model.k))
    return model.stage_values("r")


def _solve_psi_matrix(model: ValidatedModel, P: MatrixPath, m: VectorPath) -> VectorPath:
    a_s = model.stage_values("A")
    b_s = model.stage_values("B")
    brb_s = _stage_brb(model)
    bkbt_s = np.einsum("sab,bc->sac", b_s, model.K) + model.stage_values("B_tilde")
    p_s = P.stage_values()
    m_s = m.stage_values()
    r_s = _affine_r_stages(model)
    terminal = -(model.M @ model.terminal_target)

    def rhs(s, psi):
        p = p_s[s]
        return -(
            (a_s[s].T - p @ brb_s[s]) @ psi
            + p @ (bkbt_s[s] @ m_s[s])
            + p @ (b_s[s] @ r_s[s])
        )

    nodes = rk4_stage_backward(rhs, terminal, model.grid, what="offset")
    return VectorPath(model.grid, np.stack(nodes))


def _solve_psi_scalar(model: ValidatedModel, P: MatrixPath, m: VectorPath) -> VectorPath:
    a = _scalar_stages(model, "A")
    b = model.stage_values("B").reshape(-1)
    r_weight = model.stage_values("R").reshape(-1)
    brb = (b * b / r_weight).tolist()
    k_const = float(model.K[0, 0])
    bkbt = (b * k_const + model.stage_values("B_tilde").reshape(-1)).tolist()
    b_list = b.tolist()
    p_list = P.stage_values().reshape(-1).tolist()
    m_list = m.stage_values().reshape(-1).tolist()
    r_list = _affine_r_stages(model).reshape(-1).tolist()
    terminal = float(-(model.M[0, 0] * model.terminal_target[0]))

    def rhs(s, psi):
        p = p_list[s]
        return -(
            (a[s] - p * brb[s]) * psi
            + p * bkbt[s] * m_list[s]
            + p * b_list[s] * r_list[s]
        )

    nodes = rk4_stage_backward(rhs, terminal, model.grid, what="offset")
    return VectorPath(model.grid, np.asarray(nodes).reshape(-1, 1))


# ---------------------------------------------------------------------------
# Coupling-monotonicity report
# ---------------------------------------------------------------------------

def check_monotonicity(model: ValidatedModel, P: MatrixPath) -> MonotonicityReport:
    """Pointwise eigenvalue bounds for the sufficient well-posedness condition.

    Forms S1(t) = sym(P (BK + B_tilde)(I-K)^{-1} R^{-1} B^T P) and
    S2(t) = sym(B R^{-1} B^T + (BK + B_tilde)(I-K)^{-1} R^{-1} B^T) at every
    node; the condition holds iff the largest eigenvalue of S1 stays <= 0,
    the smallest eigenvalue of S2 stays >= 0, and their gap is positive.
    Reported, never enforced.
    """
    _require_same_grid(model, P)
    b_n = model.node_values("B")
    bt_n = model.node_values("B_tilde")
    r_inv = np.linalg.inv(model.node_values("R"))
    p_n = (P.values + np.transpose(P.values, (0, 2, 1))) * 0.5

    bk_n = np.einsum("sab,bc->sac", b_n, model.K) + bt_n
    core = np.einsum("sab,bc,scd,sed->sae", bk_n, model.I_minus_K_inv, r_inv, b_n)
    brb = np.einsum("sab,sbc,sdc->sad", b_n, r_inv, b_n)

    s1 = np.einsum("sab,sbc,scd->sad", p_n, core, p_n)
    s1 = (s1 + np.transpose(s1, (0, 2, 1))) * 0.5
    s2 = brb + core
    s2 = (s2 + np.transpose(s2, (0, 2, 1))) * 0.5

    if model.n == 1:
        lam1 = s1[:, 0, 0]
        lam2 = s2[:, 0, 0]
    else:
        lam1 = np.array([np.linalg.eigvalsh(x)[-1] for x in s1])
        lam2 = np.array([np.linalg.eigvalsh(x)[0] for x in s2])

    worst = int(np.argmax(lam1))
    lambda1_bound = float(lam1[worst])
    lambda2_bound = float(lam2.min())
    satisfied = (lambda1_bound <= 0.0) and (lambda2_bound >= 0.0) and (
        lambda2_bound - lambda1_bound > 0.0
    )
    return MonotonicityReport(
        lambda1_bound=lambda1_bound,
        lambda2_bound=lambda2_bound,
        satisfied=satisfied,
        worst_t=float(model.grid.nodes()[worst]),
    )
