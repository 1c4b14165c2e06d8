"""Fixed-step classical RK4 kernels and shared grid utilities.

All deterministic ODEs in the package integrate on the model's grid with the
4-stage Runge–Kutta scheme. Right-hand sides are indexed by *stage*: stage
``2i`` is node ``i`` and stage ``2i + 1`` is the midpoint of step ``i``
(2·n_steps + 1 stages in total). Backward problems integrate in reversed time
with the negated right-hand side.

The kernels are duck-typed over the state: plain Python floats (the fast lane
for one-dimensional models) and numpy arrays both work.
"""

from __future__ import annotations

import math

import numpy as np

from . import errors

#: Frobenius-norm threshold that separates finite-escape blow-up from roundoff.
BLOWUP_NORM = 1e12


def _guard(y, t: float, what: str) -> None:
    """Raise Blowup/NonFinite when the state leaves the representable regime."""
    if isinstance(y, float):
        nrm = abs(y)
    else:
        nrm = float(np.sqrt(np.sum(y * y)))
    if not (nrm <= BLOWUP_NORM):
        if math.isnan(nrm):
            raise errors.NonFinite(what, t=t)
        raise errors.Blowup(t, nrm, what)


def rk4_stage_forward(rhs, y0, grid, step_hook=None, what: str = "solution") -> list:
    """Integrate y' = rhs forward from node 0; returns one state per node.

    ``rhs(stage, y)`` is evaluated at integer stage indices. ``step_hook``
    (if given) post-processes the state after each full step and receives
    the new node index, e.g. to symmetrize a matrix Riccati iterate.
    """
    dt = grid.dt
    half = 0.5 * dt
    sixth = dt / 6.0
    y = y0
    out = [y]
    for i in range(grid.n_steps):
        s = 2 * i
        k1 = rhs(s, y)
        k2 = rhs(s + 1, y + half * k1)
        k3 = rhs(s + 1, y + half * k2)
        k4 = rhs(s + 2, y + dt * k3)
        y = y + sixth * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if step_hook is not None:
            y = step_hook(y, i + 1)
        _guard(y, (i + 1) * dt, what)
        out.append(y)
    return out


def rk4_stage_backward(rhs, y_terminal, grid, step_hook=None, what: str = "solution") -> list:
    """Integrate y' = rhs backward from the terminal node; node-ordered output.

    Equivalent to forward RK4 in reversed time with the negated right-hand
    side; the terminal value is stored exactly at the last node.
    """
    dt = grid.dt
    half = 0.5 * dt
    sixth = dt / 6.0
    y = y_terminal
    out = [None] * (grid.n_steps + 1)
    out[grid.n_steps] = y
    for i in range(grid.n_steps - 1, -1, -1):
        s = 2 * i
        k1 = rhs(s + 2, y)
        k2 = rhs(s + 1, y - half * k1)
        k3 = rhs(s + 1, y - half * k2)
        k4 = rhs(s, y - dt * k3)
        y = y - sixth * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if step_hook is not None:
            y = step_hook(y, i)
        _guard(y, i * dt, what)
        out[i] = y
    return out


# ---------------------------------------------------------------------------
# Stage-grid interpolation
# ---------------------------------------------------------------------------

def midpoint_values(node_vals: np.ndarray) -> np.ndarray:
    """Step-midpoint values of a smooth path sampled at the grid nodes.

    Uses 4-point Lagrange interpolation (exact for cubics, O(dt^4) error on
    smooth paths), with one-sided stencils at the ends; this keeps RK4's
    fourth order when tabulated solution paths feed another solve. Works on
    arrays of shape (n_nodes, ...) along the first axis.
    """
    v = np.asarray(node_vals, dtype=float)
    n = v.shape[0] - 1
    if n < 1:
        raise errors.GridMismatch("need at least two nodes to form midpoints")
    if n == 1:
        return (v[0:1] + v[1:2]) / 2.0
    if n == 2:
        m0 = (3.0 * v[0] + 6.0 * v[1] - v[2]) / 8.0
        m1 = (-v[0] + 6.0 * v[1] + 3.0 * v[2]) / 8.0
        return np.stack([m0, m1])
    out = np.empty((n,) + v.shape[1:], dtype=float)
    out[1:n - 1] = (-v[0:n - 2] + 9.0 * v[1:n - 1] + 9.0 * v[2:n] - v[3:n + 1]) / 16.0
    out[0] = (5.0 * v[0] + 15.0 * v[1] - 5.0 * v[2] + v[3]) / 16.0
    out[n - 1] = (v[n - 3] - 5.0 * v[n - 2] + 15.0 * v[n - 1] + 5.0 * v[n]) / 16.0
    return out


def stage_values_from_nodes(node_vals: np.ndarray) -> np.ndarray:
    """Interleave node values with interpolated midpoints onto the stage grid."""
    v = np.asarray(node_vals, dtype=float)
    n = v.shape[0] - 1
    out = np.empty((2 * n + 1,) + v.shape[1:], dtype=float)
    out[0::2] = v
    out[1::2] = midpoint_values(v)
    return out


def trapezoid_weights(grid) -> np.ndarray:
    """Composite-trapezoid quadrature weights on the grid nodes."""
    w = np.full(grid.n_steps + 1, grid.dt)
    w[0] = w[-1] = grid.dt / 2.0
    return w
