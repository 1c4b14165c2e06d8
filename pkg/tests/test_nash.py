"""Tests for the near-equilibrium diagnostics: scaling sweeps, unilateral
deviation replays, and the first-order stationarity check."""

import numpy as np
import pytest

from lqmfg import errors
from lqmfg.cash import cash_default_params
from lqmfg.consistency import solve_cc_decoupled
from lqmfg.model import TimeGrid, scalar_model, validate
from lqmfg.nash import (
    DeviationResult,
    Perturbation,
    ScalingReport,
    _fit_loglog,
    _limiting_cost_batch,
    best_response_deviation,
    default_directions,
    limiting_deviation_costs,
    perturbation_path,
    scaling_sweep,
    stationarity_check,
)
from lqmfg.population import SimConfig, evaluate_limiting_cost, simulate_population
from lqmfg.riccati import solve_P, solve_Pi
from lqmfg.rng import replicate_seed


@pytest.fixture(scope="module")
def cash_bundle():
    params = cash_default_params().replace(horizon=TimeGrid(T=10.0, n_steps=500))
    model = validate(params)
    P = solve_P(model)
    Pi = solve_Pi(model)
    cc = solve_cc_decoupled(model, P)
    return model, P, Pi, cc


def zero_data_model(sigma=0.0):
    """Scalar model whose optimal control, limit, and states are all zero."""
    params = scalar_model(
        A=0.5, B=0.2, B_tilde=0.5, sigma=sigma,
        F=2.8, G=0.0, H=4.0,
        Q=0.0, R=1.0, K=0.0, M=1.0,
        x0=0.0, T=10.0, n_steps=200,
    )
    return validate(params)


# ---------------------------------------------------------------------------
# Log-log slope fitting
# ---------------------------------------------------------------------------

class TestSlopeFit:
    def test_recovers_exact_power_law(self):
        ns = (4, 8, 16, 32, 64)
        vals = [7.3 * n ** (-0.62) for n in ns]
        fit = _fit_loglog(ns, vals, vals)
        assert abs(fit["slope"] - (-0.62)) < 1e-12
        assert not fit["degenerate"]
        # an exact power law leaves no residual, so the interval collapses
        assert abs(fit["ci_high"] - fit["ci_low"]) < 1e-10

    def test_interval_covers_truth_under_noise(self):
        rng = np.random.default_rng(0)
        ns = (4, 8, 16, 32, 64, 128)
        vals = [2.0 * n ** (-1.0) * float(np.exp(0.1 * rng.standard_normal()))
                for n in ns]
        fit = _fit_loglog(ns, vals, vals)
        assert fit["ci_low"] < -1.0 < fit["ci_high"]
        assert not fit["degenerate"]

    def test_degenerate_when_all_below_floor(self):
        ns = (4, 8, 16)
        vals = [1e-15, 2e-14, 3e-13]
        fit = _fit_loglog(ns, vals, vals)
        assert fit["degenerate"]
        assert np.isnan(fit["slope"])

    def test_too_few_positive_points_gives_nan(self):
        fit = _fit_loglog((4, 8, 16), [1.0, 0.0, 0.0], [1.0, 0.0, 0.0])
        assert np.isnan(fit["slope"])
        assert not fit["degenerate"]


class TestScalingReportValidation:
    def test_ladder_must_increase(self):
        with pytest.raises(errors.NashError):
            ScalingReport(Ns=(4, 4), state_gap=np.zeros(2),
                          cost_gap=np.zeros(2), avg_gap=np.zeros(2),
                          slopes={}, replicates=(0,))

    def test_metrics_must_be_nonnegative(self):
        with pytest.raises(errors.NashError):
            ScalingReport(Ns=(4, 8), state_gap=np.array([1.0, -1.0]),
                          cost_gap=np.zeros(2), avg_gap=np.zeros(2),
                          slopes={}, replicates=(0,))

    def test_metrics_must_match_ladder_length(self):
        with pytest.raises(errors.NashError):
            ScalingReport(Ns=(4, 8), state_gap=np.zeros(3),
                          cost_gap=np.zeros(2), avg_gap=np.zeros(2),
                          slopes={}, replicates=(0,))


# ---------------------------------------------------------------------------
# Scaling sweep
# ---------------------------------------------------------------------------

class TestScalingSweep:
    def test_rejects_bad_arguments(self, cash_bundle):
        model, P, Pi, cc = cash_bundle
        with pytest.raises(errors.NashError):
            scaling_sweep(model, P, Pi, cc, (1, 4), 3, 0)
        with pytest.raises(errors.NashError):
            scaling_sweep(model, P, Pi, cc, (8, 4), 3, 0)
        with pytest.raises(errors.NashError):
            scaling_sweep(model, P, Pi, cc, (4, 8), 2, 0)

    def test_cash_sweep_report(self, cash_bundle):
        model, P, Pi, cc = cash_bundle
        ladder = (4, 8, 16, 32, 64)
        rep = scaling_sweep(model, P, Pi, cc, ladder, 8, 0)
        assert rep.Ns == ladder
        assert rep.replicates == tuple(replicate_seed(0, r) for r in range(8))
        assert len(rep.cells) == len(ladder) * 8
        # per-N values are the replicate means of the recorded cells
        for name in ("state_gap", "cost_gap", "avg_gap"):
            cells = np.array([c[name] for c in rep.cells]).reshape(5, 8)
            np.testing.assert_array_equal(cells.mean(axis=1),
                                          getattr(rep, name))
            assert np.all(cells >= 0.0)
            # every gap metric decays roughly like 1/N on this model: the
            # average-gap variance shrinks as 1/N and the state and cost
            # gaps inherit its square through the comparison dynamics
            slope = rep.slopes[name]
            assert -1.5 < slope["slope"] < -0.6
            assert slope["ci_low"] < slope["slope"] < slope["ci_high"]
            assert not slope["degenerate"]

    def test_sweep_is_deterministic(self, cash_bundle):
        model, P, Pi, cc = cash_bundle
        a = scaling_sweep(model, P, Pi, cc, (4, 8), 3, 5)
        b = scaling_sweep(model, P, Pi, cc, (4, 8), 3, 5)
        assert a.cells == b.cells
        np.testing.assert_array_equal(a.state_gap, b.state_gap)

    def test_threads_match_serial_bitwise(self, cash_bundle):
        model, P, Pi, cc = cash_bundle
        serial = scaling_sweep(model, P, Pi, cc, (4, 8, 16), 3, 9)
        parallel = scaling_sweep(model, P, Pi, cc, (4, 8, 16), 3, 9, threads=4)
        assert serial.cells == parallel.cells

    def test_degenerate_model_flags_all_metrics(self):
        model = zero_data_model(sigma=0.0)
        P, Pi = solve_P(model), solve_Pi(model)
        cc = solve_cc_decoupled(model, P)
        rep = scaling_sweep(model, P, Pi, cc, (2, 4, 8), 3, 0)
        for name in ("state_gap", "cost_gap", "avg_gap"):
            assert np.all(getattr(rep, name) == 0.0)
            assert rep.slopes[name]["degenerate"]
            assert np.isnan(rep.slopes[name]["slope"])


# ---------------------------------------------------------------------------
# Perturbations
# ---------------------------------------------------------------------------

class TestPerturbations:
    def test_constant_covers_horizon(self, cash_bundle):
        model = cash_bundle[0]
        base = np.zeros((model.grid.n_nodes, 1))
        delta = perturbation_path(Perturbation("constant", 0.3), model, base)
        np.testing.assert_array_equal(delta, np.full_like(delta, 0.3))

    def test_bump_hits_window_nodes(self, cash_bundle):
        model = cash_bundle[0]
        base = np.zeros((model.grid.n_nodes, 1))
        delta = perturbation_path(
            Perturbation("bump", -2.0, support=(2.5, 5.0)), model, base)
        times = model.grid.nodes()
        inside = (times >= 2.5) & (times <= 5.0)
        np.testing.assert_array_equal(delta[inside, 0], -2.0)
        np.testing.assert_array_equal(delta[~inside, 0], 0.0)

    def test_scaled_multiplies_base_control(self, cash_bundle):
        model = cash_bundle[0]
        base = np.linspace(-1.0, 1.0, model.grid.n_nodes)[:, None]
        delta = perturbation_path(Perturbation("scaled", 0.5), model, base)
        np.testing.assert_allclose(delta, 0.5 * base)

    def test_validation(self, cash_bundle):
        model = cash_bundle[0]
        with pytest.raises(errors.BadPerturbation):
            Perturbation("square", 1.0)
        with pytest.raises(errors.BadPerturbation):
            Perturbation("constant", float("inf"))
        with pytest.raises(errors.BadPerturbation):
            Perturbation("bump", 1.0)
        with pytest.raises(errors.BadPerturbation):
            Perturbation("bump", 1.0, support=(5.0, 2.5))
        with pytest.raises(errors.BadPerturbation):
            Perturbation("bump", 1.0, support=(1.0,))
        base = np.zeros((model.grid.n_nodes, 1))
        with pytest.raises(errors.BadPerturbation):
            perturbation_path(
                Perturbation("bump", 1.0, support=(5.0, 11.0)), model, base)


# ---------------------------------------------------------------------------
# Best-response deviations
# ---------------------------------------------------------------------------

class TestBestResponseDeviation:
    def test_zero_perturbation_replays_exactly(self, cash_bundle):
        model, P, Pi, cc = cash_bundle
        res = simulate_population(
            model, P, Pi, cc, SimConfig(N=12, seed=3, grid=model.grid))
        dev = best_response_deviation(
            model, P, Pi, cc, 12, [Perturbation("constant", 0.0)], 3)
        assert dev.base_cost == res.costs[0]
        assert dev.deviated_costs[0] == dev.base_cost
        assert dev.epsilon_hat == 0.0

    def test_empty_family(self, cash_bundle):
        model, P, Pi, cc = cash_bundle
        dev = best_response_deviation(model, P, Pi, cc, 4, [], 3)
        assert dev.epsilon_hat == 0.0
        assert dev.deviated_costs.size == 0

    def test_epsilon_hat_floor(self):
        with pytest.raises(errors.NashError):
            DeviationResult(base_cost=1.0, deviated_costs=np.array([2.0]),
                            epsilon_hat=-0.5)

    def test_median_improvement_shrinks_with_population(self, cash_bundle):
        model, P, Pi, cc = cash_bundle
        family = [Perturbation("constant", s * m)
                  for m in (0.1, 0.5, 1.0) for s in (+1, -1)]
        medians = {}
        for N in (10, 50, 100):
            eps = [best_response_deviation(model, P, Pi, cc, N, family, seed)
                   .epsilon_hat for seed in range(10)]
            assert all(e >= 0.0 for e in eps)
            medians[N] = float(np.median(eps))
        assert medians[10] >= medians[50] >= medians[100]
        assert medians[100] < medians[10]


class TestLimitingDeviation:
    def test_every_nonzero_deviation_costs_more(self, cash_bundle):
        model, P, Pi, cc = cash_bundle
        family = ([Perturbation("constant", s * m)
                   for m in (0.1, 0.5, 1.0) for s in (+1, -1)]
                  + [Perturbation("scaled", s * 0.05) for s in (+1, -1)]
                  + [Perturbation("bump", s * 1.0, support=(2.5, 5.0))
                     for s in (+1, -1)])
        dev = limiting_deviation_costs(model, P, Pi, cc, family, 5,
                                       M_paths=4000)
        increases = dev.deviated_costs - dev.base_cost
        assert np.all(increases > 0.0)
        assert dev.epsilon_hat == 0.0

    def test_rejects_bad_path_count(self, cash_bundle):
        model, P, Pi, cc = cash_bundle
        with pytest.raises(errors.NashError):
            limiting_deviation_costs(model, P, Pi, cc, [], 5, M_paths=0)


# ---------------------------------------------------------------------------
# Stationarity of the limiting cost
# ---------------------------------------------------------------------------

class TestStationarity:
    def test_batch_cost_matches_scalar_evaluator(self, cash_bundle):
        model, P, Pi, cc = cash_bundle
        res = simulate_population(
            model, P, Pi, cc, SimConfig(N=3, seed=8, grid=model.grid))
        x = np.stack([a.X.values for a in res.agents])
        u = np.stack([a.u.values for a in res.agents])
        batch = _limiting_cost_batch(model, x, u, cc.m.values)
        for i, agent in enumerate(res.agents):
            one = evaluate_limiting_cost(agent, cc.m, model)
            assert batch[i] == pytest.approx(one, rel=1e-12)

    def test_zero_cost_model_is_exactly_stationary(self):
        model = zero_data_model(sigma=1.0)
        params = model.params.replace(M=np.zeros((1, 1)))
        model = validate(params)
        P, Pi = solve_P(model), solve_Pi(model)
        cc = solve_cc_decoupled(model, P)
        worst = stationarity_check(model, P, Pi, cc, 200, 4)
        assert worst == 0.0

    def test_zero_direction_gives_exact_zero(self, cash_bundle):
        model, P, Pi, cc = cash_bundle
        zero_dir = np.zeros((model.grid.n_nodes, model.k))
        worst = stationarity_check(model, P, Pi, cc, 300, 4,
                                   directions=[zero_dir])
        assert worst == 0.0

    def test_central_difference_is_step_independent(self, cash_bundle):
        model, P, Pi, cc = cash_bundle
        dirs = default_directions(model)
        _, fine = stationarity_check(model, P, Pi, cc, 1000, 3,
                                     directions=dirs, h=1e-4,
                                     return_details=True)
        _, coarse = stationarity_check(model, P, Pi, cc, 1000, 3,
                                       directions=dirs, h=1e-3,
                                       return_details=True)
        # the cost is quadratic along any control direction, so the central
        # difference equals the derivative for every step size
        assert np.max(np.abs(fine["derivatives"] - coarse["derivatives"])) < 1e-6

    def test_derivative_is_linear_in_direction(self, cash_bundle):
        model, P, Pi, cc = cash_bundle
        dirs = default_directions(model)
        _, base = stationarity_check(model, P, Pi, cc, 1000, 3,
                                     directions=dirs, return_details=True)
        _, doubled = stationarity_check(model, P, Pi, cc, 1000, 3,
                                        directions=[2.0 * d for d in dirs],
                                        return_details=True)
        assert np.max(np.abs(doubled["derivatives"]
                             - 2.0 * base["derivatives"])) < 1e-6

    def test_cash_control_is_first_order_optimal(self, cash_bundle):
        model, P, Pi, cc = cash_bundle
        worst, details = stationarity_check(model, P, Pi, cc, 4000, 3,
                                            return_details=True)
        assert worst < 0.01 * details["mean_cost"]

    def test_rejects_bad_arguments(self, cash_bundle):
        model, P, Pi, cc = cash_bundle
        with pytest.raises(errors.NashError):
            stationarity_check(model, P, Pi, cc, 0, 1)
        with pytest.raises(errors.NashError):
            stationarity_check(model, P, Pi, cc, 100, 1, h=0.0)
        with pytest.raises(errors.NashError):
            stationarity_check(model, P, Pi, cc, 100, 1,
                               directions=[np.zeros((3, 1))])
