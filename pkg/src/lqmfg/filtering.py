"""Innovation-form state filter for partially observed agents.

Each agent observes only a noisy signal dV = (F X + G) dt + H dWbar of its
own state.  The conditional mean follows the linear filter

    dXhat = (A Xhat + B u + B_tilde m) dt
            + Pi F^T (H H^T)^{-1} (dV - (F Xhat + G) dt),

driven by realized observation increments; the bracketed term, scaled by
H^{-1}, is the innovation process (a standard Brownian motion under the
agent's observation filtration when the model is exact).  The error
covariance ``Pi`` is control-independent and precomputed by the Riccati
module, sampled at the left node of each step.

Besides the single-step operations, this module hosts the vectorized batch
simulator used by the population engine and by large-sample filter
diagnostics: a block of independent agents is advanced in lockstep with
Euler–Maruyama on the shared grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import errors
from .consistency import CCSolution, _affine_r_nodes
from .model import ValidatedModel
from .rng import gaussian_increments
from .riccati import MatrixPath

__all__ = [
    "FilterState",
    "filter_init",
    "filter_step",
    "innovation_increment",
    "run_filter_batch",
    "filter_consistency_stats",
]


@dataclass
class FilterState:
    """Conditional-mean estimate at one grid node."""

    xhat: np.ndarray
    t_index: int

    def __post_init__(self):
        self.xhat = np.asarray(self.xhat, dtype=float).reshape(-1)
        if not np.all(np.isfinite(self.xhat)):
            raise errors.NonFinite("filter state")
        if self.t_index < 0:
            raise errors.GridOverrun(
                f"t_index must be nonnegative, got {self.t_index}")


def filter_init(model: ValidatedModel) -> FilterState:
    """Filter started at the known initial state."""
    return FilterState(xhat=model.x0.astype(float).copy(), t_index=0)


def _node_coeffs(model: ValidatedModel, idx: int, names: tuple) -> tuple:
    return tuple(model.node_values(name)[idx] for name in names)


def filter_step(state: FilterState, dV: np.ndarray, u: np.ndarray,
                m: np.ndarray, model: ValidatedModel, Pi_t: np.ndarray,
                dt: float) -> FilterState:
    """One Euler–Maruyama update of the filter from a realized observation
    increment ``dV`` over [t, t+dt]."""
    idx = state.t_index
    if idx >= model.grid.n_steps:
        raise errors.GridOverrun(
            f"filter already at final node {idx}; cannot step past T")
    a, b, bt, f, g, h = _node_coeffs(
        model, idx, ("A", "B", "B_tilde", "F", "G", "H"))
    dV = np.asarray(dV, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    m = np.asarray(m, dtype=float).reshape(-1)
    Pi_t = np.asarray(Pi_t, dtype=float)

    drift = a @ state.xhat + b @ u + bt @ m
    try:
        gain = Pi_t @ f.T @ np.linalg.inv(h @ h.T)
    except np.linalg.LinAlgError:
        raise errors.SingularH(t=idx * dt) from None
    correction = gain @ (dV - (f @ state.xhat + g) * dt)
    xhat_new = state.xhat + drift * dt + correction
    if not np.all(np.isfinite(xhat_new)):
        raise errors.NonFinite("filter state", t=idx * dt)
    return FilterState(xhat=xhat_new, t_index=idx + 1)


def innovation_increment(state: FilterState, dV: np.ndarray,
                         model: ValidatedModel, dt: float) -> np.ndarray:
    """Discretized innovation H^{-1}(dV - (F Xhat + G) dt) at the current node."""
    idx = min(state.t_index, model.grid.n_steps)
    f, g, h = _node_coeffs(model, idx, ("F", "G", "H"))
    dV = np.asarray(dV, dtype=float).reshape(-1)
    raw = dV - (f @ state.xhat + g) * dt
    try:
        return np.linalg.solve(h, raw)
    except np.linalg.LinAlgError:
        raise errors.SingularH(t=idx * dt) from None


# ---------------------------------------------------------------------------
# Vectorized batch simulation (shared by population and diagnostics)
# ---------------------------------------------------------------------------

def _feedback_tables(model: ValidatedModel, P: MatrixPath, cc: CCSolution):
    """Per-node decentralized control law u = -fb @ xhat + off.

    fb = R^{-1} B^T P and off = -R^{-1} B^T psi + K m + r, so that
    u = -R^{-1} B^T (P xhat + psi) + K m + r.
    """
    b_n = model.node_values("B")
    r_inv = np.linalg.inv(model.node_values("R"))
    rbt = np.einsum("tab,tcb->tac", r_inv, b_n)
    fb = np.einsum("tab,tbc->tac", rbt, P.values)
    off = (
        -np.einsum("tab,tb->ta", rbt, cc.psi.values)
        + cc.m.values @ model.K.T
        + _affine_r_nodes(model)
    )
    return fb, off


@dataclass
class BatchResult:
    """Outputs of one vectorized block of independent agents.

    Path arrays have shape (block, n_nodes, dim) and are ``None`` unless
    ``record_paths`` was requested.  ``error_snapshots`` maps a node index to
    the (block, n) array of X - Xhat at that node. ``innovation_sumsq`` is the
    per-agent, per-component sum of squared innovation increments.
    """

    u: np.ndarray | None
    X: np.ndarray | None
    Xhat: np.ndarray | None
    V: np.ndarray | None
    final_X: np.ndarray
    final_Xhat: np.ndarray
    innovation_sumsq: np.ndarray
    error_snapshots: dict


def run_filter_batch(model: ValidatedModel, P: MatrixPath, Pi: MatrixPath,
                     cc: CCSolution, dW: np.ndarray, dWbar: np.ndarray,
                     record_paths: bool = True,
                     check_nodes: tuple = ()) -> BatchResult:
    """Advance a block of agents under the decentralized feedback law.

    ``dW``/``dWbar`` are pre-scaled Brownian increments of shape
    (block, n_steps, n) for the state and observation channels.  Each agent
    follows the state equation with the frozen control-average limit in its
    drift, generates its own observation increments, and runs the innovation
    filter; controls come from the per-node feedback tables.
    """
    grid = model.grid
    n, k = model.n, model.k
    n_steps = grid.n_steps
    dt = grid.dt
    block = dW.shape[0]
    if dW.shape != (block, n_steps, n) or dWbar.shape != (block, n_steps, n):
        raise errors.ConfigMismatch(
            f"noise increment arrays must have shape ({block}, {n_steps}, {n})")

    a_n = model.node_values("A")
    b_n = model.node_values("B")
    bt_n = model.node_values("B_tilde")
    sig_n = model.node_values("sigma")
    f_n = model.node_values("F")
    g_n = model.node_values("G")
    h_n = model.node_values("H")
    h_inv = np.linalg.inv(h_n)
    hht_inv = np.linalg.inv(np.einsum("tab,tcb->tac", h_n, h_n))
    gain_n = np.einsum("tab,tcb,tcd->tad", Pi.values, f_n, hht_inv)
    fb, off = _feedback_tables(model, P, cc)
    m_n = cc.m.values

    x = np.broadcast_to(model.x0.astype(float), (block, n)).copy()
    xh = x.copy()
    innovation_sumsq = np.zeros((block, n))
    snapshots = {int(node): None for node in check_nodes}

    u_path = np.empty((block, n_steps + 1, k)) if record_paths else None
    x_path = np.empty((block, n_steps + 1, n)) if record_paths else None
    xh_path = np.empty((block, n_steps + 1, n)) if record_paths else None
    v_path = np.empty((block, n_steps + 1, n)) if record_paths else None
    if record_paths:
        x_path[:, 0] = x
        xh_path[:, 0] = xh
        v_path[:, 0] = 0.0
    v_acc = np.zeros((block, n)) if record_paths else None

    if 0 in snapshots:
        snapshots[0] = x - xh

    for i in range(n_steps):
        u = xh @ (-fb[i].T) + off[i]
        coupled = m_n[i] @ bt_n[i].T
        drift_x = x @ a_n[i].T + u @ b_n[i].T + coupled
        dv = (x @ f_n[i].T + g_n[i]) * dt + dWbar[:, i, :] @ h_n[i].T
        innov_raw = dv - (xh @ f_n[i].T + g_n[i]) * dt
        drift_h = xh @ a_n[i].T + u @ b_n[i].T + coupled
        nu = innov_raw @ h_inv[i].T
        innovation_sumsq += nu * nu

        x = x + drift_x * dt + dW[:, i, :] @ sig_n[i].T
        xh = xh + drift_h * dt + innov_raw @ gain_n[i].T

        if record_paths:
            u_path[:, i] = u
            x_path[:, i + 1] = x
            xh_path[:, i + 1] = xh
            v_acc = v_acc + dv
            v_path[:, i + 1] = v_acc
        if (i + 1) in snapshots:
            snapshots[i + 1] = x - xh

    if record_paths:
        u_path[:, n_steps] = xh @ (-fb[n_steps].T) + off[n_steps]

    for arr, what in ((x, "state"), (xh, "filter state")):
        if not np.all(np.isfinite(arr)):
            bad = np.argwhere(~np.isfinite(arr))
            raise errors.NonFinite(what, t=grid.T, agent=int(bad[0, 0]))

    return BatchResult(
        u=u_path, X=x_path, Xhat=xh_path, V=v_path,
        final_X=x, final_Xhat=xh,
        innovation_sumsq=innovation_sumsq,
        error_snapshots=snapshots,
    )


def draw_block_increments(model: ValidatedModel, seed: int,
                          agent_ids, channel: int) -> np.ndarray:
    """Stack per-agent Brownian increments (block, n_steps, n) for a channel."""
    grid = model.grid
    return np.stack([
        gaussian_increments(seed, int(agent), channel,
                            grid.n_steps, model.n, grid.dt)
        for agent in agent_ids
    ])


def filter_consistency_stats(model: ValidatedModel, P: MatrixPath,
                             Pi: MatrixPath, cc: CCSolution, m_paths: int,
                             seed: int, check_times,
                             block_size: int = 2000) -> dict:
    """Large-sample filter diagnostics over ``m_paths`` independent agents.

    At each requested time the sample mean and covariance of X - Xhat are
    accumulated blockwise and compared against the predicted covariance; the
    per-component innovation variance ratio (sum of squares over T) is
    averaged over all paths.
    """
    grid = model.grid
    nodes = [grid.node_index(t) for t in check_times]
    n = model.n
    sum_err = {node: np.zeros(n) for node in nodes}
    sum_outer = {node: np.zeros((n, n)) for node in nodes}
    innovation_total = np.zeros(n)

    start = 1
    while start <= m_paths:
        stop = min(start + block_size - 1, m_paths)
        ids = range(start, stop + 1)
        dW = draw_block_increments(model, seed, ids, 0)
        dWbar = draw_block_increments(model, seed, ids, 1)
        res = run_filter_batch(model, P, Pi, cc, dW, dWbar,
                               record_paths=False, check_nodes=tuple(nodes))
        for node in nodes:
            diff = res.error_snapshots[node]
            sum_err[node] += diff.sum(axis=0)
            sum_outer[node] += diff.T @ diff
        innovation_total += res.innovation_sumsq.sum(axis=0)
        start = stop + 1

    out = {
        "times": [float(t) for t in check_times],
        "nodes": [int(v) for v in nodes],
        "mean_error": [],
        "mean_sigma": [],
        "sample_cov": [],
        "expected_cov": [],
        "cov_rel_error": [],
        "innovation_ratio": (innovation_total / (m_paths * grid.T)).tolist(),
    }
    for node in nodes:
        mean = sum_err[node] / m_paths
        cov = (sum_outer[node] - m_paths * np.outer(mean, mean)) / (m_paths - 1)
        expected = Pi.values[node]
        denom = np.linalg.norm(expected)
        rel = float(np.linalg.norm(cov - expected) / denom) if denom > 0 \
            else float(np.linalg.norm(cov))
        out["mean_error"].append(mean.tolist())
        out["mean_sigma"].append((np.sqrt(np.diag(cov)) / np.sqrt(m_paths)).tolist())
        out["sample_cov"].append(cov.tolist())
        out["expected_cov"].append(expected.tolist())
        out["cov_rel_error"].append(rel)
    return out
