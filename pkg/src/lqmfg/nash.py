"""Empirical near-equilibrium diagnostics.

Quantifies how close the decentralized feedback law comes to a best response
at finite population size, three ways:

* ``scaling_sweep`` runs the population simulator over a ladder of sizes and
  fits log-log decay rates of the state, cost, and control-average gaps.
* ``best_response_deviation`` replays one agent with its control perturbed
  while every other agent (and every noise path) is held fixed, and reports
  how much the replayed agent could have gained.
* ``stationarity_check`` estimates the Gateaux derivative of the limiting
  cost at the computed control along fixed deterministic directions via
  central differences under common random numbers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import errors
from .consistency import CCSolution, _affine_r_nodes
from .filtering import draw_block_increments, run_filter_batch
from .model import ValidatedModel
from .population import (SimConfig, _trapezoid_weights, evaluate_cost,
                         integrate_coupled_state, simulate_population)
from .riccati import MatrixPath, VectorPath
from .rng import replicate_seed

__all__ = [
    "Perturbation",
    "DeviationResult",
    "ScalingReport",
    "scaling_sweep",
    "best_response_deviation",
    "limiting_deviation_costs",
    "stationarity_check",
    "default_directions",
]

DEGENERATE_THRESHOLD = 1e-12

# Two-sided 95% Student-t critical values; for an intermediate dof the entry
# at the next smaller dof is used (slightly wider interval).
_T_95 = {
    1: 12.706, 2: 4.303, 3: 3.182, 4: 2.776, 5: 2.571, 6: 2.447, 7: 2.365,
    8: 2.306, 9: 2.262, 10: 2.228, 12: 2.179, 15: 2.131, 20: 2.086,
    30: 2.042, 60: 2.000, 120: 1.980,
}


def _t_crit(dof: int) -> float:
    if dof < 1:
        return math.nan
    usable = [d for d in _T_95 if d <= dof]
    return _T_95[max(usable)] if usable else 1.96


def _fit_loglog(Ns, per_n, cell_values) -> dict:
    """OLS slope of log(metric) against log(N) with a 95% interval.

    Flagged degenerate (slope withheld) when every cell value sits below the
    noise floor; nonpositive aggregates are excluded from the fit since their
    logarithm is undefined.
    """
    cells = np.asarray(cell_values, dtype=float)
    if cells.size and np.all(np.abs(cells) < DEGENERATE_THRESHOLD):
        return {"slope": math.nan, "ci_low": math.nan, "ci_high": math.nan,
                "degenerate": True}
    ns = np.asarray(Ns, dtype=float)
    vals = np.asarray(per_n, dtype=float)
    keep = vals > 0.0
    if keep.sum() < 2:
        return {"slope": math.nan, "ci_low": math.nan, "ci_high": math.nan,
                "degenerate": False}
    x = np.log(ns[keep])
    y = np.log(vals[keep])
    xc = x - x.mean()
    sxx = float(xc @ xc)
    slope = float(xc @ (y - y.mean()) / sxx)
    resid = (y - y.mean()) - slope * xc
    dof = len(x) - 2
    if dof > 0:
        se = math.sqrt(float(resid @ resid) / dof / sxx)
        half = _t_crit(dof) * se
    else:
        half = math.nan
    return {"slope": slope, "ci_low": slope - half, "ci_high": slope + half,
            "degenerate": False}


@dataclass(frozen=True)
class ScalingReport:
    """Gap metrics across a population-size ladder with fitted decay rates.

    ``state_gap``/``cost_gap``/``avg_gap`` hold one replicate-averaged value
    per ladder size; ``cells`` keeps the per-(N, replicate) records behind
    them; ``slopes`` maps each metric to its fitted log-log slope, 95%
    interval, and degeneracy flag; ``replicates`` lists the derived seeds.
    """

    Ns: tuple
    state_gap: np.ndarray
    cost_gap: np.ndarray
    avg_gap: np.ndarray
    slopes: dict
    replicates: tuple
    cells: tuple = ()

    def __post_init__(self):
        ns = np.asarray(self.Ns)
        if ns.size == 0 or np.any(np.diff(ns) <= 0):
            raise errors.NashError(
                f"ladder must be strictly increasing, got {self.Ns}")
        for name in ("state_gap", "cost_gap", "avg_gap"):
            vals = np.asarray(getattr(self, name), dtype=float)
            if vals.shape != (ns.size,):
                raise errors.NashError(
                    f"{name} needs one value per ladder size")
            if np.any(vals < 0.0) or not np.all(np.isfinite(vals)):
                raise errors.NashError(
                    f"{name} must be finite and nonnegative")


def _sweep_cell(model, P, Pi, cc, N, rep, seed) -> dict:
    res = simulate_population(
        model, P, Pi, cc,
        SimConfig(N=N, seed=seed, grid=model.grid, record_paths=False))
    avg_gap = float(np.max(
        np.sum((res.control_avg.values - cc.m.values) ** 2, axis=1)))
    return {
        "N": N,
        "replicate": rep,
        "seed": seed,
        "state_gap": res.gap_metrics["state_gap_sup"],
        "cost_gap": res.gap_metrics["cost_gap_max"],
        "avg_gap": avg_gap,
    }


def scaling_sweep(model: ValidatedModel, P: MatrixPath, Pi: MatrixPath,
                  cc: CCSolution, Ns, replicates: int, seed: int,
                  threads: int | None = None) -> ScalingReport:
    """Population runs over a size ladder with per-metric decay-rate fits.

    Replicate ``r`` of every ladder size uses the derived seed
    ``replicate_seed(seed, r)``, pairing the ladder across sizes by common
    random numbers.  ``threads`` caps worker threads (cells are independent;
    the reduction is index-ordered, so results do not depend on scheduling).
    """
    ns = tuple(int(N) for N in Ns)
    if not ns or min(ns) < 2:
        raise errors.NashError(
            f"every ladder size must be at least 2, got {list(Ns)}")
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise errors.NashError(
            f"ladder must be strictly increasing, got {list(Ns)}")
    if replicates < 3:
        raise errors.NashError(
            f"need at least 3 replicates for a slope fit, got {replicates}")
    seeds = tuple(replicate_seed(seed, rep) for rep in range(replicates))

    jobs = [(N, rep, seeds[rep]) for N in ns for rep in range(replicates)]
    if threads is not None and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cells = list(pool.map(
                lambda job: _sweep_cell(model, P, Pi, cc, *job), jobs))
    else:
        cells = [_sweep_cell(model, P, Pi, cc, *job) for job in jobs]

    metrics = {}
    for name in ("state_gap", "cost_gap", "avg_gap"):
        table = np.array([c[name] for c in cells]).reshape(len(ns), replicates)
        metrics[name] = table.mean(axis=1)
    slopes = {
        name: _fit_loglog(ns, metrics[name], [c[name] for c in cells])
        for name in metrics
    }
    return ScalingReport(
        Ns=ns,
        state_gap=metrics["state_gap"],
        cost_gap=metrics["cost_gap"],
        avg_gap=metrics["avg_gap"],
        slopes=slopes,
        replicates=seeds,
        cells=tuple(cells),
    )


# ---------------------------------------------------------------------------
# Unilateral deviations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Perturbation:
    """Additive control deviation applied to the replayed agent.

    Shapes: ``constant`` adds ``magnitude`` everywhere (or on ``support``),
    ``bump`` adds it on the required window ``support=(lo, hi)``, ``scaled``
    adds ``magnitude`` times the agent's own base control.
    """

    shape: str
    magnitude: float
    support: tuple | None = None

    def __post_init__(self):
        if self.shape not in ("bump", "constant", "scaled"):
            raise errors.BadPerturbation(
                f"unknown perturbation shape {self.shape!r}")
        if not math.isfinite(self.magnitude):
            raise errors.BadPerturbation("perturbation magnitude must be finite")
        if self.shape == "bump" and self.support is None:
            raise errors.BadPerturbation("bump perturbation needs a support window")
        if self.support is not None:
            try:
                lo, hi = (float(v) for v in self.support)
            except (TypeError, ValueError) as exc:
                raise errors.BadPerturbation(
                    f"support must be a (lo, hi) pair, got {self.support!r}"
                ) from exc
            if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
                raise errors.BadPerturbation(
                    f"support must be a finite increasing pair, got {self.support!r}")
            object.__setattr__(self, "support", (lo, hi))


def perturbation_path(pert: Perturbation, model: ValidatedModel,
                      base_u: np.ndarray) -> np.ndarray:
    """Node values (n_nodes, k) of the additive control offset."""
    grid = model.grid
    if pert.support is not None:
        lo, hi = pert.support
        if lo < 0.0 or hi > grid.T:
            raise errors.BadPerturbation(
                f"support {pert.support} outside the horizon [0, {grid.T:g}]")
        times = grid.nodes()
        mask = (times >= lo) & (times <= hi)
    else:
        mask = np.ones(grid.n_nodes, dtype=bool)
    if pert.shape == "scaled":
        return np.where(mask[:, None], pert.magnitude * base_u, 0.0)
    delta = np.zeros((grid.n_nodes, model.k))
    delta[mask] = pert.magnitude
    return delta


@dataclass(frozen=True)
class DeviationResult:
    """Cost comparison between the decentralized control and its deviations.

    ``epsilon_hat`` is the largest realized improvement any of the tried
    deviations achieved, floored at zero.
    """

    base_cost: float
    deviated_costs: np.ndarray
    epsilon_hat: float

    def __post_init__(self):
        if self.epsilon_hat < 0.0:
            raise errors.NashError("epsilon_hat is nonnegative by construction")


def best_response_deviation(model: ValidatedModel, P: MatrixPath,
                            Pi: MatrixPath, cc: CCSolution, N: int,
                            perturbations, seed: int) -> DeviationResult:
    """Replay agent 1 with perturbed controls against frozen opponents.

    The base population is simulated once; every other agent's control — and
    with it the coupling average seen by agent 1 — is then held fixed while
    agent 1's comparison state is re-integrated with the identical noise path
    and its control shifted by each perturbation.  The base cost goes through
    the same single-agent replay, so a zero perturbation reproduces it
    exactly.
    """
    perts = tuple(perturbations)
    cfg = SimConfig(N=N, seed=seed, grid=model.grid, record_paths=True)
    base = simulate_population(model, P, Pi, cc, cfg)
    agent1 = base.agents[0]
    others_avg = base.control_avg
    u1 = agent1.u.values
    dW1 = draw_block_increments(model, seed, (1,), 0)
    avg_arr = others_avg.values[None]
    grid = model.grid

    def replay_cost(u_dev: np.ndarray) -> float:
        x_dev = integrate_coupled_state(model, u_dev[None], avg_arr, dW1)[0]
        path = replace(agent1, u=VectorPath(grid, u_dev),
                       Xdag=VectorPath(grid, x_dev))
        return evaluate_cost(path, others_avg, model, state=path.Xdag)

    base_cost = replay_cost(u1)
    deviated = np.array([
        replay_cost(u1 + perturbation_path(pert, model, u1)) for pert in perts
    ])
    epsilon_hat = max(0.0, base_cost - float(deviated.min())) if perts else 0.0
    return DeviationResult(base_cost=base_cost, deviated_costs=deviated,
                           epsilon_hat=epsilon_hat)


def limiting_deviation_costs(model: ValidatedModel, P: MatrixPath,
                             Pi: MatrixPath, cc: CCSolution,
                             perturbations, seed: int,
                             M_paths: int = 1) -> DeviationResult:
    """Deviation costs in the limiting problem (coupling frozen at the limit).

    Monte Carlo average over ``M_paths`` independent representative agents;
    the coupling average stays at the limit for both state and cost, so with
    a positive-definite control weight the cost is strictly convex in the
    control deviation.
    """
    perts = tuple(perturbations)
    if M_paths < 1:
        raise errors.NashError(f"M_paths must be positive, got {M_paths}")
    ids = tuple(range(1, M_paths + 1))
    dW = draw_block_increments(model, seed, ids, 0)
    dWbar = draw_block_increments(model, seed, ids, 1)
    batch = run_filter_batch(model, P, Pi, cc, dW, dWbar, record_paths=True)
    m_arr = cc.m.values

    def mean_cost(u_b: np.ndarray, x_b: np.ndarray) -> float:
        return float(_limiting_cost_batch(model, x_b, u_b, m_arr).mean())

    base_cost = mean_cost(batch.u, batch.X)
    deviated = np.empty(len(perts))
    for j, pert in enumerate(perts):
        delta = perturbation_path(pert, model, batch.u.mean(axis=0))
        u_dev = batch.u + delta[None]
        x_dev = batch.X + _control_response(model, delta)[None]
        deviated[j] = mean_cost(u_dev, x_dev)
    epsilon_hat = max(0.0, base_cost - float(deviated.min())) if perts else 0.0
    return DeviationResult(base_cost=base_cost, deviated_costs=deviated,
                           epsilon_hat=epsilon_hat)


# ---------------------------------------------------------------------------
# First-order stationarity of the limiting cost
# ---------------------------------------------------------------------------

def default_directions(model: ValidatedModel) -> tuple:
    """Five fixed deterministic control directions on the model grid."""
    tau = model.grid.nodes() / model.grid.T
    shapes = (
        np.ones_like(tau),
        tau,
        np.sin(2.0 * np.pi * tau),
        ((tau >= 0.25) & (tau <= 0.5)).astype(float),
        np.cos(np.pi * tau),
    )
    return tuple(np.repeat(s[:, None], model.k, axis=1) for s in shapes)


def _control_response(model: ValidatedModel, direction: np.ndarray) -> np.ndarray:
    """State response (n_nodes, n) to a deterministic control offset.

    Solves the homogeneous-start linear response with the same explicit
    stepping as the simulator, so a simulated path shifted by ``h`` times a
    direction has exactly this times ``h`` added to its state.
    """
    grid = model.grid
    a_n = model.node_values("A")
    b_n = model.node_values("B")
    out = np.zeros((grid.n_nodes, model.n))
    z = np.zeros(model.n)
    for i in range(grid.n_steps):
        z = z + (a_n[i] @ z + b_n[i] @ direction[i]) * grid.dt
        out[i + 1] = z
    return out


def _limiting_cost_batch(model: ValidatedModel, x: np.ndarray, u: np.ndarray,
                         m: np.ndarray) -> np.ndarray:
    """Per-path limiting cost for a batch: x (B, nodes, n), u (B, nodes, k)."""
    q_n = model.node_values("Q")
    r_n = model.node_values("R")
    bench = m @ model.K.T + _affine_r_nodes(model)
    dev = u - bench[None]
    integrand = (np.einsum("tij,bti,btj->bt", q_n, x, x)
                 + np.einsum("tij,bti,btj->bt", r_n, dev, dev))
    d_term = x[:, -1] - model.terminal_target
    terminal = np.einsum("bi,ij,bj->b", d_term, model.M, d_term)
    return 0.5 * (integrand @ _trapezoid_weights(model.grid) + terminal)


def stationarity_check(model: ValidatedModel, P: MatrixPath, Pi: MatrixPath,
                       cc: CCSolution, M_paths: int, seed: int,
                       directions=None, h: float = 1e-4,
                       block_size: int = 2000,
                       return_details: bool = False):
    """Max |Gateaux derivative| of the limiting cost at the computed control.

    Simulates ``M_paths`` independent representative agents, then central-
    differences the limiting cost along each direction with step ``h`` under
    common random numbers.  The simulated dynamics are linear in the control,
    so the shifted states are exact and the two sides differ only through the
    cost functional.  Returns the largest absolute derivative across
    directions (plus per-direction details on request).
    """
    if M_paths < 1:
        raise errors.NashError(f"M_paths must be positive, got {M_paths}")
    if not (math.isfinite(h) and h > 0.0):
        raise errors.NashError(f"difference step must be positive, got {h}")
    dirs = tuple(directions) if directions is not None \
        else default_directions(model)
    expected = (model.grid.n_nodes, model.k)
    for j, d in enumerate(dirs):
        if np.asarray(d).shape != expected:
            raise errors.NashError(
                f"direction {j} has shape {np.asarray(d).shape}, "
                f"expected {expected}")
    responses = [_control_response(model, np.asarray(d, dtype=float))
                 for d in dirs]
    m_arr = cc.m.values

    plus = np.zeros(len(dirs))
    minus = np.zeros(len(dirs))
    base_sum = 0.0
    done = 0
    next_id = 1
    while done < M_paths:
        b = min(block_size, M_paths - done)
        ids = tuple(range(next_id, next_id + b))
        next_id += b
        dW = draw_block_increments(model, seed, ids, 0)
        dWbar = draw_block_increments(model, seed, ids, 1)
        batch = run_filter_batch(model, P, Pi, cc, dW, dWbar,
                                 record_paths=True)
        base_sum += float(
            _limiting_cost_batch(model, batch.X, batch.u, m_arr).sum())
        for j, (d, dx) in enumerate(zip(dirs, responses)):
            d_arr = np.asarray(d, dtype=float)
            up = _limiting_cost_batch(
                model, batch.X + h * dx[None], batch.u + h * d_arr[None], m_arr)
            dn = _limiting_cost_batch(
                model, batch.X - h * dx[None], batch.u - h * d_arr[None], m_arr)
            plus[j] += float(up.sum())
            minus[j] += float(dn.sum())
        done += b

    derivatives = (plus - minus) / (2.0 * h * M_paths)
    worst = float(np.max(np.abs(derivatives)))
    if return_details:
        return worst, {"derivatives": derivatives,
                       "mean_cost": base_sum / M_paths}
    return worst
