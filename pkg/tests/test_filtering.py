"""State filter: single-step operations, batch kernel, statistical checks."""

import numpy as np
import pytest

from lqmfg import errors
from lqmfg.cash import cash_default_params
from lqmfg.consistency import solve_cc_decoupled
from lqmfg.filtering import (
    FilterState,
    draw_block_increments,
    filter_consistency_stats,
    filter_init,
    filter_step,
    innovation_increment,
    run_filter_batch,
)
from lqmfg.model import Coefficient, TimeGrid, scalar_model, validate
from lqmfg.riccati import solve_P, solve_Pi
from lqmfg.rng import gaussian_increments, noise_generator, replicate_seed


@pytest.fixture(scope="module")
def cash_bundle():
    params = cash_default_params().replace(horizon=TimeGrid(T=10.0, n_steps=2000))
    model = validate(params)
    P = solve_P(model)
    Pi = solve_Pi(model)
    cc = solve_cc_decoupled(model, P)
    return model, P, Pi, cc


# ---------------------------------------------------------------------------
# Noise streams
# ---------------------------------------------------------------------------

class TestRng:
    def test_same_key_same_draws(self):
        a = noise_generator(7, 3, 0).standard_normal(8)
        b = noise_generator(7, 3, 0).standard_normal(8)
        assert np.array_equal(a, b)

    def test_streams_distinct(self):
        base = gaussian_increments(7, 3, 0, 16, 1, 0.01)
        assert not np.array_equal(base, gaussian_increments(7, 3, 1, 16, 1, 0.01))
        assert not np.array_equal(base, gaussian_increments(7, 4, 0, 16, 1, 0.01))
        assert not np.array_equal(base, gaussian_increments(8, 3, 0, 16, 1, 0.01))

    def test_stream_independent_of_block(self):
        model = validate(scalar_model(n_steps=10))
        block = draw_block_increments(model, 5, [1, 2, 3], 0)
        solo = draw_block_increments(model, 5, [2], 0)
        assert np.array_equal(block[1], solo[0])

    def test_increment_scale(self):
        draws = gaussian_increments(0, 1, 0, 200000, 1, 0.04)
        assert abs(draws.std() - 0.2) < 0.002

    def test_bad_channel_and_agent(self):
        with pytest.raises(ValueError):
            noise_generator(0, 1, 2)
        with pytest.raises(ValueError):
            noise_generator(0, -1, 0)

    def test_replicate_seed(self):
        assert replicate_seed(10, 0) == 10
        assert replicate_seed(10, 7) == 17


# ---------------------------------------------------------------------------
# Single-step operations
# ---------------------------------------------------------------------------

class TestFilterStep:
    def test_init_cash(self):
        model = validate(cash_default_params())
        state = filter_init(model)
        assert state.xhat[0] == 3.5
        assert state.t_index == 0

    def test_init_zero_and_vector(self):
        model = validate(scalar_model(x0=0.0))
        assert filter_init(model).xhat[0] == 0.0

    def test_noiseless_step_is_deterministic_propagation(self):
        model = validate(scalar_model(sigma=0.0, n_steps=100))
        dt = model.grid.dt
        state = filter_init(model)
        x = state.xhat.copy()
        f = model.node_values("F")[0]
        g = model.node_values("G")[0]
        dv = (f @ x + g) * dt
        new = filter_step(state, dv, u=[0.3], m=[0.1], model=model,
                          Pi_t=np.zeros((1, 1)), dt=dt)
        a = model.node_values("A")[0]
        b = model.node_values("B")[0]
        bt = model.node_values("B_tilde")[0]
        expected = x + (a @ x + b @ [0.3] + bt @ [0.1]) * dt
        assert np.array_equal(new.xhat, expected)
        assert new.t_index == 1

    def test_zero_observation_matrix_ignores_observations(self):
        model = validate(scalar_model(F=0.0, n_steps=100))
        Pi = solve_Pi(model)
        dt = model.grid.dt
        state = filter_init(model)
        out1 = filter_step(state, [0.9], [0.0], [0.0], model,
                           Pi.values[0], dt)
        out2 = filter_step(state, [-4.2], [0.0], [0.0], model,
                           Pi.values[0], dt)
        assert np.array_equal(out1.xhat, out2.xhat)

    def test_cash_first_step_moves_by_drift_only(self):
        model = validate(cash_default_params())
        dt = model.grid.dt
        state = filter_init(model)
        u, m = 0.7, -2.0
        new = filter_step(state, [123.4], [u], [m], model,
                          Pi_t=np.zeros((1, 1)), dt=dt)
        expected = 3.5 + (0.5 * 3.5 + 0.2 * u + 0.5 * m) * dt
        assert new.xhat[0] == pytest.approx(expected, abs=1e-15)

    def test_grid_overrun(self):
        model = validate(scalar_model(n_steps=10))
        state = FilterState(xhat=[0.0], t_index=10)
        with pytest.raises(errors.GridOverrun):
            filter_step(state, [0.0], [0.0], [0.0], model,
                        np.zeros((1, 1)), model.grid.dt)

    def test_non_finite_rejected(self):
        model = validate(scalar_model(n_steps=10))
        state = filter_init(model)
        with pytest.raises(errors.NonFinite):
            filter_step(state, [np.inf], [0.0], [0.0], model,
                        np.eye(1), model.grid.dt)


class TestInnovation:
    def test_perfectly_predicted_observation_gives_zero(self):
        model = validate(cash_default_params())
        state = filter_init(model)
        dt = model.grid.dt
        dv = (2.8 * 3.5 + 6.0) * dt
        out = innovation_increment(state, [dv], model, dt)
        assert np.allclose(out, 0.0, atol=1e-15)

    def test_identity_channel_passthrough(self):
        model = validate(scalar_model(F=0.0, G=0.0, H=1.0))
        state = filter_init(model)
        out = innovation_increment(state, [0.37], model, model.grid.dt)
        assert out[0] == 0.37

    def test_singular_h_raises(self):
        from lqmfg.model import ValidatedModel

        params = validate(scalar_model()).params.replace(
            H=Coefficient.constant(np.zeros((1, 1))))
        model = ValidatedModel(params, 1, 1)
        state = FilterState(xhat=[1.0], t_index=0)
        with pytest.raises(errors.SingularH):
            innovation_increment(state, [0.5], model, 0.01)

    def test_variance_ratio_near_one(self, cash_bundle):
        model, P, Pi, cc = cash_bundle
        dW = draw_block_increments(model, 11, range(1, 201), 0)
        dWbar = draw_block_increments(model, 11, range(1, 201), 1)
        res = run_filter_batch(model, P, Pi, cc, dW, dWbar,
                               record_paths=False)
        ratio = res.innovation_sumsq.mean(axis=0) / model.grid.T
        assert 0.9 < ratio[0] < 1.1


# ---------------------------------------------------------------------------
# Batch kernel
# ---------------------------------------------------------------------------

class TestBatch:
    def test_batch_matches_single_step_replay(self, cash_bundle):
        model, P, Pi, cc = cash_bundle
        dW = draw_block_increments(model, 3, [1, 2, 3], 0)
        dWbar = draw_block_increments(model, 3, [1, 2, 3], 1)
        res = run_filter_batch(model, P, Pi, cc, dW, dWbar, record_paths=True)

        agent_row = 1
        dt = model.grid.dt
        f_n = model.node_values("F")
        g_n = model.node_values("G")
        h_n = model.node_values("H")
        state = filter_init(model)
        for i in range(model.grid.n_steps):
            x_i = res.X[agent_row, i]
            dv = (x_i @ f_n[i].T + g_n[i]) * dt + dWbar[agent_row, i] @ h_n[i].T
            u_i = res.u[agent_row, i]
            state = filter_step(state, dv, u_i, cc.m.values[i], model,
                                Pi.values[i], dt)
            assert np.array_equal(state.xhat, res.Xhat[agent_row, i + 1])

    def test_zero_noise_filter_is_exact(self):
        params = cash_default_params().replace(
            sigma=Coefficient.constant(np.zeros((1, 1))),
            horizon=TimeGrid(T=10.0, n_steps=500),
        )
        model = validate(params)
        P = solve_P(model)
        Pi = solve_Pi(model)
        cc = solve_cc_decoupled(model, P)
        dW = np.zeros((4, 500, 1))
        dWbar = draw_block_increments(model, 9, range(1, 5), 1)
        res = run_filter_batch(model, P, Pi, cc, dW, dWbar, record_paths=True)
        assert np.array_equal(res.X, res.Xhat)

    def test_observation_path_starts_at_zero(self, cash_bundle):
        model, P, Pi, cc = cash_bundle
        dW = draw_block_increments(model, 1, [1], 0)
        dWbar = draw_block_increments(model, 1, [1], 1)
        res = run_filter_batch(model, P, Pi, cc, dW, dWbar, record_paths=True)
        assert np.all(res.V[:, 0] == 0.0)
        assert res.u.shape == (1, model.grid.n_nodes, 1)

    def test_shape_mismatch_rejected(self, cash_bundle):
        model, P, Pi, cc = cash_bundle
        bad = np.zeros((2, 10, 1))
        with pytest.raises(errors.ConfigMismatch):
            run_filter_batch(model, P, Pi, cc, bad, bad)


# ---------------------------------------------------------------------------
# Statistical consistency
# ---------------------------------------------------------------------------

class TestStatistics:
    def test_error_moments_match_predicted_covariance(self, cash_bundle):
        model, P, Pi, cc = cash_bundle
        stats = filter_consistency_stats(
            model, P, Pi, cc, m_paths=10000, seed=99,
            check_times=(2.5, 5.0, 10.0), block_size=2000,
        )
        for rel in stats["cov_rel_error"]:
            assert rel < 0.05
        for mean, sigma in zip(stats["mean_error"], stats["mean_sigma"]):
            assert abs(mean[0]) <= 4.0 * sigma[0]
        assert 0.9 < stats["innovation_ratio"][0] < 1.1
        assert stats["nodes"] == [500, 1000, 2000]
