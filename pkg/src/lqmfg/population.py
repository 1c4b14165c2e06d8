"""Monte Carlo population engine for the coupled N-agent game.

Simulates N agents applying the decentralized feedback law.  Pass 1 advances
every agent independently (state, observation, filter, control) with the
frozen control-average limit in the drift — this is the decentralized system
and it is embarrassingly parallel.  Pass 2 re-integrates each agent's "true"
comparison state with the same noise but with the realized average of the
other agents' controls in place of the limit, which is what the agents would
actually experience at finite N.  Cost functionals are evaluated per agent by
trapezoidal quadrature, both against the realized average (finite-N game)
and against the frozen limit (limiting game).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import errors
from .consistency import CCSolution, _affine_r_nodes
from .filtering import draw_block_increments, run_filter_batch
from .model import TimeGrid, ValidatedModel
from .riccati import MatrixPath, VectorPath

__all__ = [
    "SimConfig",
    "AgentPath",
    "PopulationResult",
    "simulate_population",
    "evaluate_cost",
    "evaluate_limiting_cost",
    "integrate_coupled_state",
    "lln_filter_gap",
]


@dataclass(frozen=True)
class SimConfig:
    """Population-run configuration.

    ``agent_ids`` assigns the noise-stream identity of each simulated agent
    (default 1..N); permuting it permutes the per-agent outputs exactly.
    ``record_paths`` controls whether per-agent paths are retained in the
    result; aggregate metrics are always computed.
    """

    N: int
    seed: int
    grid: TimeGrid
    record_paths: bool = True
    agent_ids: tuple | None = None

    def __post_init__(self):
        if self.N < 2:
            raise errors.ConfigMismatch(
                f"population needs N >= 2 (control average divides by N-1), "
                f"got N={self.N}")
        if self.agent_ids is not None and len(self.agent_ids) != self.N:
            raise errors.ConfigMismatch(
                f"agent_ids has {len(self.agent_ids)} entries for N={self.N}")

    def ids(self) -> tuple:
        return tuple(self.agent_ids) if self.agent_ids is not None \
            else tuple(range(1, self.N + 1))


@dataclass(frozen=True)
class AgentPath:
    """Recorded paths of one agent on the shared grid."""

    X: VectorPath
    Xhat: VectorPath
    u: VectorPath
    V: VectorPath
    Xdag: VectorPath | None = None


@dataclass(frozen=True)
class PopulationResult:
    """Outputs of one population run.

    ``control_avg`` is the realized average of the other agents' controls
    seen by agent 1.  ``gap_metrics`` holds ``state_gap_sup`` (the over-time
    sup of the agent-mean squared gap between comparison and decentralized
    states) and ``cost_gap_max`` (the largest per-agent gap between the
    finite-N and limiting costs).
    """

    agents: tuple
    control_avg: VectorPath
    costs: np.ndarray
    limiting_costs: np.ndarray
    gap_metrics: dict


def _as_model_grid(model: ValidatedModel, *paths) -> None:
    for path in paths:
        if path.grid != model.grid:
            raise errors.ConfigMismatch(
                "solver paths must live on the model grid")


def integrate_coupled_state(model: ValidatedModel, u_path: np.ndarray,
                            coupling: np.ndarray, dW: np.ndarray) -> np.ndarray:
    """Euler–Maruyama states under given controls and coupling average.

    ``u_path``: (B, n_nodes, k) controls; ``coupling``: (B, n_nodes, k)
    per-agent coupling average (broadcastable); ``dW``: (B, n_steps, n)
    pre-scaled increments.  Returns the (B, n_nodes, n) state array started
    at the model's initial state.
    """
    grid = model.grid
    dt = grid.dt
    n_steps = grid.n_steps
    block = u_path.shape[0]
    a_n = model.node_values("A")
    b_n = model.node_values("B")
    bt_n = model.node_values("B_tilde")
    sig_n = model.node_values("sigma")

    out = np.empty((block, n_steps + 1, model.n))
    x = np.broadcast_to(model.x0.astype(float), (block, model.n)).copy()
    out[:, 0] = x
    for i in range(n_steps):
        drift = (x @ a_n[i].T + u_path[:, i] @ b_n[i].T
                 + coupling[:, i] @ bt_n[i].T)
        x = x + drift * dt + dW[:, i] @ sig_n[i].T
        out[:, i + 1] = x
    return out


def simulate_population(model: ValidatedModel, P: MatrixPath, Pi: MatrixPath,
                        cc: CCSolution, cfg: SimConfig) -> PopulationResult:
    """Simulate N agents under the decentralized law and collect diagnostics."""
    if cfg.grid != model.grid:
        raise errors.ConfigMismatch(
            f"config grid {cfg.grid} does not match model grid {model.grid}")
    _as_model_grid(model, P, Pi, cc.X, cc.psi, cc.m)
    grid = model.grid
    ids = cfg.ids()
    N = cfg.N

    dW = draw_block_increments(model, cfg.seed, ids, 0)
    dWbar = draw_block_increments(model, cfg.seed, ids, 1)
    pass1 = run_filter_batch(model, P, Pi, cc, dW, dWbar, record_paths=True)

    u_all = pass1.u
    # Sum controls in canonical stream-id order so the realized averages (and
    # everything downstream) are exactly permutation-invariant.
    order = np.argsort(np.asarray(ids), kind="stable")
    total_u = u_all[order].sum(axis=0)
    coupling = (total_u[None, :, :] - u_all) / (N - 1)
    xdag = integrate_coupled_state(model, u_all, coupling, dW)
    if not np.all(np.isfinite(xdag)):
        bad = np.argwhere(~np.isfinite(xdag))
        raise errors.NonFinite("comparison state", t=grid.T,
                               agent=int(bad[0, 0]))

    sq_gap = np.sum((xdag - pass1.X) ** 2, axis=2)
    state_gap_sup = float(np.max(sq_gap.mean(axis=0)))

    agents = []
    costs = np.empty(N)
    limiting_costs = np.empty(N)
    for i in range(N):
        path = AgentPath(
            X=VectorPath(grid, pass1.X[i]),
            Xhat=VectorPath(grid, pass1.Xhat[i]),
            u=VectorPath(grid, pass1.u[i]),
            V=VectorPath(grid, pass1.V[i]),
            Xdag=VectorPath(grid, xdag[i]),
        )
        avg_i = VectorPath(grid, coupling[i])
        costs[i] = evaluate_cost(path, avg_i, model, state=path.Xdag)
        limiting_costs[i] = evaluate_limiting_cost(path, cc.m, model)
        if cfg.record_paths:
            agents.append(path)

    gap_metrics = {
        "state_gap_sup": state_gap_sup,
        "cost_gap_max": float(np.max(np.abs(costs - limiting_costs))),
    }
    return PopulationResult(
        agents=tuple(agents),
        control_avg=VectorPath(grid, coupling[0]),
        costs=costs,
        limiting_costs=limiting_costs,
        gap_metrics=gap_metrics,
    )


# ---------------------------------------------------------------------------
# Cost functionals
# ---------------------------------------------------------------------------

def _trapezoid_weights(grid: TimeGrid) -> np.ndarray:
    w = np.full(grid.n_nodes, grid.dt)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def evaluate_cost(path: AgentPath, others_avg: VectorPath,
                  model: ValidatedModel, state: VectorPath | None = None) -> float:
    """Realized quadratic cost of one agent against a coupling average.

    (1/2)[ ∫ <Q X, X> + <R (u - K avg - r), (u - K avg - r)> dt
           + <M (X(T) - l), (X(T) - l)> ],
    with r and l zero when the affine extension is absent.  ``state``
    overrides which recorded state path enters the Q- and terminal terms
    (defaults to the decentralized state ``path.X``).
    """
    state_path = state if state is not None else path.X
    for p in (state_path, path.u, others_avg):
        if p.grid != model.grid:
            raise errors.GridMismatch(
                "cost evaluation needs paths on the model grid")
    x = state_path.values
    u = path.u.values
    avg = others_avg.values

    q_n = model.node_values("Q")
    r_n = model.node_values("R")
    dev = u - avg @ model.K.T - _affine_r_nodes(model)
    integrand = (np.einsum("tab,ta,tb->t", q_n, x, x)
                 + np.einsum("tab,ta,tb->t", r_n, dev, dev))
    d_term = x[-1] - model.terminal_target
    terminal = d_term @ model.M @ d_term
    return float(0.5 * (integrand @ _trapezoid_weights(model.grid) + terminal))


def evaluate_limiting_cost(path: AgentPath, m: VectorPath,
                           model: ValidatedModel,
                           state: VectorPath | None = None) -> float:
    """Cost against the frozen control-average limit instead of the realized
    average; otherwise identical to :func:`evaluate_cost`."""
    return evaluate_cost(path, m, model, state=state)


# ---------------------------------------------------------------------------
# Aggregate diagnostics
# ---------------------------------------------------------------------------

def lln_filter_gap(result: PopulationResult, cc: CCSolution) -> float:
    """Squared gap at T between the other agents' filter average (seen by
    agent 1) and the limiting mean state."""
    if not result.agents:
        raise errors.ConfigMismatch(
            "lln_filter_gap needs recorded paths (record_paths=True)")
    xhat_t = np.stack([a.Xhat.values[-1] for a in result.agents[1:]])
    return float(np.sum((xhat_t.mean(axis=0) - cc.X.values[-1]) ** 2))
