"""Equilibrium consistency system for the control-average coupling.

The limiting control average ``m``, the limiting mean state ``X``, and the
backward offset ``psi`` must jointly satisfy

    X'   =  A X - B R^{-1} B^T (P X + psi) + (B K + B_tilde) m + B r,
    psi' = -(A^T - P B R^{-1} B^T) psi - P (B K + B_tilde) m - P B r,
    m    = -(I - K)^{-1} R^{-1} B^T (P X + psi) + (I - K)^{-1} r,

with X(0) = x0 and psi(T) = -M l.  Two independent routes are provided:

* :func:`solve_cc_decoupled` substitutes the affine ansatz
  ``psi = Gamma X + Lambda`` which splits the two-point problem into a
  backward matrix Riccati equation for the gain ``Gamma``, a backward linear
  equation for the offset ``Lambda``, and a forward linear equation for ``X``.
* :func:`solve_cc_fixed_point` iterates a damped Picard map on ``m``,
  re-solving the backward offset and forward mean-state equations per sweep.

Both attach a finite-difference defect record (see :func:`cc_residual`) so a
returned equilibrium can be audited without re-deriving it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import errors
from .model import ValidatedModel
from .ode import rk4_stage_backward, rk4_stage_forward
from .riccati import (
    MatrixPath,
    VectorPath,
    _affine_r_stages,
    _pick_scalar_lane,
    _require_same_grid,
    _scalar_stages,
    _stage_inv_R,
    solve_psi,
)

__all__ = [
    "CCSolution",
    "solve_cc_decoupled",
    "solve_cc_fixed_point",
    "cc_residual",
    "solve_cc_auto",
    "explicit_m_cash",
]


@dataclass(frozen=True)
class CCSolution:
    """Solution of the consistency system on the model grid.

    ``residual`` holds the finite-difference defect record
    ``{"forward_res", "backward_res", "m_res"}`` evaluated on the solve grid;
    ``method`` is ``"decoupled"`` or ``"fixed_point"``.  The decoupling gain
    ``Gamma`` and offset ``Lambda`` are attached by the decoupled route only.
    ``iterations`` counts Picard sweeps (0 for the direct route).
    """

    X: VectorPath
    psi: VectorPath
    m: VectorPath
    residual: dict = field(compare=False)
    method: str = "decoupled"
    iterations: int = 0
    Gamma: MatrixPath | None = None
    Lambda: VectorPath | None = None

    def __post_init__(self):
        if not (self.X.grid == self.psi.grid == self.m.grid):
            raise errors.GridMismatch("equilibrium paths must share one grid")


# ---------------------------------------------------------------------------
# Shared node-level helpers
# ---------------------------------------------------------------------------

def _affine_r_nodes(model: ValidatedModel) -> np.ndarray:
    if not model.has_affine:
        return np.zeros((model.grid.n_nodes, model.k))
    return model.affine_r_node_values()


def _m_from_state(model: ValidatedModel, P: MatrixPath,
                  X: VectorPath, psi: VectorPath) -> VectorPath:
    """Control average implied by the pointwise equilibrium identity."""
    b_n = model.node_values("B")
    r_inv = np.linalg.inv(model.node_values("R"))
    rbt = np.einsum("tab,tcb->tac", r_inv, b_n)
    px_psi = np.einsum("tab,tb->ta", P.values, X.values) + psi.values
    lin = np.einsum("ab,tbc,tc->ta", model.I_minus_K_inv, rbt, px_psi)
    bench = np.einsum("ab,tb->ta", model.I_minus_K_inv, _affine_r_nodes(model))
    return VectorPath(model.grid, bench - lin)


def _stage_blocks(model: ValidatedModel):
    """Stage-grid coefficient blocks for the decoupled system (matrix lane)."""
    a_s = model.stage_values("A")
    b_s = model.stage_values("B")
    r_inv = _stage_inv_R(model)
    rbt = np.einsum("sab,scb->sac", r_inv, b_s)
    brb = np.einsum("sab,sbc->sac", b_s, rbt)
    ek_ik = (
        np.einsum("sab,bc->sac", b_s, model.K) + model.stage_values("B_tilde")
    ) @ model.I_minus_K_inv
    dd = brb + np.einsum("sab,sbc->sac", ek_ik, rbt)
    e_r = b_s + ek_ik
    er_r = np.einsum("sab,sb->sa", e_r, _affine_r_stages(model))
    return a_s, b_s, brb, dd, er_r


# ---------------------------------------------------------------------------
# Decoupled route
# ---------------------------------------------------------------------------

def solve_cc_decoupled(model: ValidatedModel, P: MatrixPath,
                       lane: str = "auto") -> CCSolution:
    """Solve the consistency system through the affine decoupling ansatz."""
    _require_same_grid(model, P)
    if _pick_scalar_lane(model, lane):
        gamma, lam, X = _decoupled_scalar(model, P)
    else:
        gamma, lam, X = _decoupled_matrix(model, P)
    psi = VectorPath(
        model.grid,
        np.einsum("tab,tb->ta", gamma.values, X.values) + lam.values,
    )
    m = _m_from_state(model, P, X, psi)
    residual = _residual_parts(model, P, X, psi, m)
    return CCSolution(X=X, psi=psi, m=m, residual=residual,
                      method="decoupled", Gamma=gamma, Lambda=lam)


def _decoupled_matrix(model: ValidatedModel, P: MatrixPath):
    grid = model.grid
    a_s, _, brb, dd, er_r = _stage_blocks(model)
    p_s = P.stage_values()
    a_psi = np.transpose(a_s, (0, 2, 1)) - np.einsum("sab,sbc->sac", p_s, dd)
    a_x = a_s - np.einsum("sab,sbc->sac", dd, p_s)
    c_s = -np.einsum("sab,sbc,scd->sad", p_s, dd - brb, p_s)

    def gamma_rhs(s, g):
        return -(a_psi[s] @ g + g @ a_x[s] - g @ dd[s] @ g + c_s[s])

    gamma_nodes = rk4_stage_backward(
        gamma_rhs, np.zeros((model.n, model.n)), grid, what="decoupling gain"
    )
    gamma = MatrixPath(grid, np.stack(gamma_nodes))
    g_s = gamma.stage_values()

    def lam_rhs(s, lam):
        return -(
            (a_psi[s] - g_s[s] @ dd[s]) @ lam + (p_s[s] + g_s[s]) @ er_r[s]
        )

    lam_nodes = rk4_stage_backward(
        lam_rhs, -(model.M @ model.terminal_target), grid,
        what="decoupling offset",
    )
    lam = VectorPath(grid, np.stack(lam_nodes))
    l_s = lam.stage_values()

    def x_rhs(s, x):
        return (a_x[s] - dd[s] @ g_s[s]) @ x - dd[s] @ l_s[s] + er_r[s]

    x_nodes = rk4_stage_forward(
        x_rhs, model.x0.astype(float), grid, what="mean state"
    )
    return gamma, lam, VectorPath(grid, np.stack(x_nodes))


def _scalar_blocks(model: ValidatedModel):
    a = _scalar_stages(model, "A")
    b = model.stage_values("B").reshape(-1)
    bt = model.stage_values("B_tilde").reshape(-1)
    rw = model.stage_values("R").reshape(-1)
    k_const = float(model.K[0, 0])
    ik = float(model.I_minus_K_inv[0, 0])
    rbt = b / rw
    brb = b * rbt
    ek_ik = (b * k_const + bt) * ik
    dd = brb + ek_ik * rbt
    er_r = (b + ek_ik) * _affine_r_stages(model).reshape(-1)
    return a, b.tolist(), brb.tolist(), dd.tolist(), er_r.tolist()


def _decoupled_scalar(model: ValidatedModel, P: MatrixPath):
    grid = model.grid
    a, _, brb, dd, er_r = _scalar_blocks(model)
    p_list = P.stage_values().reshape(-1).tolist()

    def gamma_rhs(s, g):
        p = p_list[s]
        return -(2.0 * (a[s] - p * dd[s]) * g - dd[s] * g * g
                 - p * (dd[s] - brb[s]) * p)

    gamma_nodes = rk4_stage_backward(gamma_rhs, 0.0, grid,
                                     what="decoupling gain")
    gamma = MatrixPath(grid, np.asarray(gamma_nodes).reshape(-1, 1, 1))
    g_list = gamma.stage_values().reshape(-1).tolist()

    terminal = float(-(model.M[0, 0] * model.terminal_target[0]))

    def lam_rhs(s, lam):
        p = p_list[s]
        return -((a[s] - (p + g_list[s]) * dd[s]) * lam
                 + (p + g_list[s]) * er_r[s])

    lam_nodes = rk4_stage_backward(lam_rhs, terminal, grid,
                                   what="decoupling offset")
    lam = VectorPath(grid, np.asarray(lam_nodes).reshape(-1, 1))
    l_list = lam.stage_values().reshape(-1).tolist()

    def x_rhs(s, x):
        return ((a[s] - dd[s] * (p_list[s] + g_list[s])) * x
                - dd[s] * l_list[s] + er_r[s])

    x_nodes = rk4_stage_forward(x_rhs, float(model.x0[0]), grid,
                                what="mean state")
    X = VectorPath(grid, np.asarray(x_nodes).reshape(-1, 1))
    return gamma, lam, X


# ---------------------------------------------------------------------------
# Fixed-point route
# ---------------------------------------------------------------------------

def solve_cc_fixed_point(model: ValidatedModel, P: MatrixPath,
                         tol: float = 1e-8, max_iter: int = 500,
                         damping: float = 0.5, lane: str = "auto") -> CCSolution:
    """Solve the consistency system by damped Picard iteration on ``m``.

    Starts from ``m = 0``; each sweep solves the backward offset for the
    current iterate, propagates the mean state forward, evaluates the implied
    control average, and blends it in with weight ``damping``.  Raises
    :class:`~lqmfg.errors.NoConvergence` when the sup-norm update is still at
    or above ``tol`` after ``max_iter`` sweeps.
    """
    _require_same_grid(model, P)
    if not 0.0 < damping <= 1.0:
        raise errors.ConsistencyError(
            f"damping must lie in (0, 1], got {damping!r}")
    if tol <= 0.0:
        raise errors.ConsistencyError(f"tol must be positive, got {tol!r}")
    if max_iter < 1:
        raise errors.ConsistencyError(
            f"max_iter must be at least 1, got {max_iter!r}")
    scalar = _pick_scalar_lane(model, lane)
    sub_lane = "scalar" if scalar else "matrix"
    grid = model.grid

    m = VectorPath(grid, np.zeros((grid.n_nodes, model.k)))
    last_delta = float("inf")
    for iteration in range(1, max_iter + 1):
        psi = solve_psi(model, P, m, lane=sub_lane)
        X = _mean_forward(model, P, psi, m, scalar)
        m_tilde = _m_from_state(model, P, X, psi)
        blended = (1.0 - damping) * m.values + damping * m_tilde.values
        last_delta = float(np.max(np.abs(blended - m.values)))
        m = VectorPath(grid, blended)
        if last_delta < tol:
            psi = solve_psi(model, P, m, lane=sub_lane)
            X = _mean_forward(model, P, psi, m, scalar)
            residual = _residual_parts(model, P, X, psi, m)
            return CCSolution(X=X, psi=psi, m=m, residual=residual,
                              method="fixed_point", iterations=iteration)
    raise errors.NoConvergence(max_iter=max_iter, last_delta=last_delta)


def _mean_forward(model: ValidatedModel, P: MatrixPath, psi: VectorPath,
                  m: VectorPath, scalar: bool) -> VectorPath:
    """Forward mean-state equation driven by a given offset and iterate."""
    grid = model.grid
    if scalar:
        a, b, brb, _, _ = _scalar_blocks(model)
        k_const = float(model.K[0, 0])
        bkbt = (np.asarray(b) * k_const
                + model.stage_values("B_tilde").reshape(-1)).tolist()
        br = (np.asarray(b) * _affine_r_stages(model).reshape(-1)).tolist()
        p_l = P.stage_values().reshape(-1).tolist()
        psi_l = psi.stage_values().reshape(-1).tolist()
        m_l = m.stage_values().reshape(-1).tolist()

        def rhs(s, x):
            return (a[s] * x - brb[s] * (p_l[s] * x + psi_l[s])
                    + bkbt[s] * m_l[s] + br[s])

        nodes = rk4_stage_forward(rhs, float(model.x0[0]), grid,
                                  what="mean state")
        return VectorPath(grid, np.asarray(nodes).reshape(-1, 1))

    a_s, b_s, brb, _, _ = _stage_blocks(model)
    bkbt = np.einsum("sab,bc->sac", b_s, model.K) + model.stage_values("B_tilde")
    br = np.einsum("sab,sb->sa", b_s, _affine_r_stages(model))
    p_s = P.stage_values()
    psi_s = psi.stage_values()
    m_s = m.stage_values()

    def rhs(s, x):
        return (a_s[s] @ x - brb[s] @ (p_s[s] @ x + psi_s[s])
                + bkbt[s] @ m_s[s] + br[s])

    nodes = rk4_stage_forward(rhs, model.x0.astype(float), grid,
                              what="mean state")
    return VectorPath(grid, np.stack(nodes))


# ---------------------------------------------------------------------------
# Residual audit
# ---------------------------------------------------------------------------

def _residual_parts(model: ValidatedModel, P: MatrixPath, X: VectorPath,
                    psi: VectorPath, m: VectorPath) -> dict:
    x = X.values
    ps = psi.values
    a_n = model.node_values("A")
    b_n = model.node_values("B")
    r_inv = np.linalg.inv(model.node_values("R"))
    rbt = np.einsum("tab,tcb->tac", r_inv, b_n)
    brb = np.einsum("tab,tbc->tac", b_n, rbt)
    bkbt = np.einsum("tab,bc->tac", b_n, model.K) + model.node_values("B_tilde")
    br = np.einsum("tab,tb->ta", b_n, _affine_r_nodes(model))
    px_psi = np.einsum("tab,tb->ta", P.values, x) + ps

    fwd = (np.einsum("tab,tb->ta", a_n, x)
           - np.einsum("tab,tb->ta", brb, px_psi)
           + np.einsum("tab,tb->ta", bkbt, m.values)
           + br)
    bwd = (np.einsum("tba,tb->ta", a_n, ps)
           - np.einsum("tab,tbc,tc->ta", P.values, brb, ps)
           + np.einsum("tab,tbc,tc->ta", P.values, bkbt, m.values)
           + np.einsum("tab,tb->ta", P.values, br))

    two_dt = 2.0 * model.grid.dt
    if model.grid.n_nodes >= 3:
        x_dot = (x[2:] - x[:-2]) / two_dt
        psi_dot = (ps[2:] - ps[:-2]) / two_dt
        forward_res = float(np.max(np.abs(x_dot - fwd[1:-1])))
        backward_res = float(np.max(np.abs(psi_dot + bwd[1:-1])))
    else:
        forward_res = 0.0
        backward_res = 0.0
    m_identity = _m_from_state(model, P, X, psi)
    m_res = float(np.max(np.abs(m.values - m_identity.values)))
    return {"forward_res": forward_res, "backward_res": backward_res,
            "m_res": m_res}


def solve_cc_auto(model: ValidatedModel, P: MatrixPath,
                  lane: str = "auto") -> CCSolution:
    """Decoupled route first; damped Picard fallback if the gain sweep blows up."""
    try:
        return solve_cc_decoupled(model, P, lane=lane)
    except errors.Blowup:
        return solve_cc_fixed_point(model, P, lane=lane)


def cc_residual(model: ValidatedModel, P: MatrixPath, sol: CCSolution) -> dict:
    """Central-difference defects of a consistency solution on its own grid.

    ``forward_res`` and ``backward_res`` measure the interior-node defect of
    the mean-state and offset equations; ``m_res`` measures the pointwise gap
    in the control-average identity over all nodes.
    """
    _require_same_grid(model, P, sol.X, sol.psi, sol.m)
    return _residual_parts(model, P, sol.X, sol.psi, sol.m)


# ---------------------------------------------------------------------------
# Closed-form control average (scalar scenario)
# ---------------------------------------------------------------------------

def _cumtrapz(y: np.ndarray, dt: float) -> np.ndarray:
    out = np.empty_like(y)
    out[0] = 0.0
    np.cumsum((y[1:] + y[:-1]) * (0.5 * dt), out=out[1:])
    return out


def explicit_m_cash(model: ValidatedModel, P: MatrixPath,
                    Gamma: MatrixPath, Lambda: VectorPath) -> VectorPath:
    """Quadrature closed form for the control average of a scalar model.

    Integrates the decoupled forward equation by variation of constants,
    so the only approximation is trapezoidal quadrature of the exponent and
    forcing integrals on the model grid.  Requires ``n = k = 1``.
    """
    if model.n != 1 or model.k != 1:
        raise errors.NotScalarModel(
            "closed-form control average requires n = k = 1")
    _require_same_grid(model, P, Gamma, Lambda)
    grid = model.grid

    a = model.node_values("A").reshape(-1)
    b = model.node_values("B").reshape(-1)
    bt = model.node_values("B_tilde").reshape(-1)
    rw = model.node_values("R").reshape(-1)
    k_const = float(model.K[0, 0])
    ik = float(model.I_minus_K_inv[0, 0])
    r_n = _affine_r_nodes(model).reshape(-1)

    p = P.values[:, 0, 0]
    g = Gamma.values[:, 0, 0]
    lam = Lambda.values[:, 0]

    e_r = b + (b * k_const + bt) * ik
    alpha = a - (p + g) * (b / rw) * e_r
    forcing = e_r * (r_n - b * lam / rw)

    log_growth = _cumtrapz(alpha, grid.dt)
    inner = _cumtrapz(forcing * np.exp(-log_growth), grid.dt)
    x = np.exp(log_growth) * (float(model.x0[0]) + inner)

    m = -(b / rw) * ik * ((p + g) * x + lam) + ik * r_n
    return VectorPath(grid, m.reshape(-1, 1))
