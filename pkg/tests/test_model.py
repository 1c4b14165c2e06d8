"""Model definition, validation, coefficient lookup, and JSON round-trip."""

import json

import numpy as np
import pytest

from lqmfg import errors
from lqmfg.model import (
    Coefficient,
    ModelParams,
    TimeGrid,
    dump_model_dict,
    load_model_dict,
    scalar_model,
    validate,
)


def scalar_params(**overrides):
    """Baseline scalar model used across these tests (no affine extension)."""
    return scalar_model(**overrides)


# ---------------------------------------------------------------------------
# TimeGrid
# ---------------------------------------------------------------------------

class TestTimeGrid:
    def test_last_node_is_exactly_T(self):
        grid = TimeGrid(T=10.0, n_steps=1000)
        nodes = grid.nodes()
        assert nodes[-1] == 10.0
        assert nodes[0] == 0.0
        assert len(nodes) == 1001

    def test_nodes_strictly_increasing(self):
        grid = TimeGrid(T=1.0, n_steps=7)
        nodes = grid.nodes()
        assert np.all(np.diff(nodes) > 0)

    def test_dt(self):
        grid = TimeGrid(T=10.0, n_steps=1000)
        assert grid.dt == pytest.approx(0.01, rel=1e-15)

    def test_invalid_grid_rejected(self):
        with pytest.raises(errors.ModelError):
            TimeGrid(T=-1.0, n_steps=10)
        with pytest.raises(errors.ModelError):
            TimeGrid(T=1.0, n_steps=1)

    def test_irrational_step_still_lands_on_T(self):
        grid = TimeGrid(T=1.0, n_steps=3)
        assert grid.nodes()[-1] == 1.0


# ---------------------------------------------------------------------------
# validate: spec examples
# ---------------------------------------------------------------------------

class TestValidate:
    def test_scalar_cash_like_params_valid(self):
        model = validate(scalar_params())
        assert model.n == 1
        assert model.k == 1

    def test_K_equal_identity_rejected(self):
        with pytest.raises(errors.SingularIminusK):
            validate(scalar_params(K=1.0))

    def test_R_zero_rejected(self):
        with pytest.raises(errors.NotPositiveDefinite):
            validate(scalar_params(R=0.0))

    def test_R_negative_rejected(self):
        with pytest.raises(errors.NotPositiveDefinite):
            validate(scalar_params(R=-1.0))

    def test_Q_negative_rejected(self):
        with pytest.raises(errors.NotPositiveSemidefinite):
            validate(scalar_params(Q=-0.5))

    def test_M_negative_rejected(self):
        with pytest.raises(errors.NotPositiveSemidefinite):
            validate(scalar_params(M=-1.0))

    def test_singular_H_rejected(self):
        with pytest.raises(errors.SingularH):
            validate(scalar_params(H=0.0))

    def test_grossly_asymmetric_Q_rejected(self):
        params = two_dim_params()
        params = params.replace(Q=Coefficient.constant(np.array([[1.0, 0.5], [0.0, 1.0]])))
        with pytest.raises(errors.NotSymmetric):
            validate(params)

    def test_tiny_asymmetry_symmetrized_exactly(self):
        eps = 1e-12
        q = np.array([[1.0, 0.3 + eps], [0.3, 1.0]])
        params = two_dim_params().replace(Q=Coefficient.constant(q))
        model = validate(params)
        q_val = model.coefficient_at("Q", 0.0)
        assert np.array_equal(q_val, q_val.T)

    def test_validate_idempotent(self):
        model = validate(scalar_params())
        model2 = validate(model.params)
        for name in ("A", "B", "B_tilde", "sigma", "F", "G", "H", "Q", "R", "K", "M"):
            assert np.array_equal(
                model.coefficient_at(name, 0.0), model2.coefficient_at(name, 0.0)
            )
        assert np.array_equal(model.x0, model2.x0)

    def test_wrong_x0_shape_rejected(self):
        with pytest.raises(errors.DimensionMismatch):
            validate(scalar_params(x0=np.array([1.0, 2.0])))

    def test_wrong_table_length_rejected(self):
        params = scalar_params()
        bad = Coefficient.table(np.full((5, 1, 1), 0.5))  # grid needs n_steps+1 = 11
        with pytest.raises(errors.DimensionMismatch):
            validate(params.replace(A=bad))

    def test_table_coefficient_accepted(self):
        params = scalar_params()
        n_nodes = params.horizon.n_steps + 1
        tab = Coefficient.table(np.linspace(0.1, 0.9, n_nodes).reshape(-1, 1, 1))
        model = validate(params.replace(A=tab))
        assert model.coefficient_at("A", 0.0)[0, 0] == pytest.approx(0.1)


def two_dim_params():
    """A small 2-state, 1-control model for matrix-shaped validation tests."""
    grid = TimeGrid(T=1.0, n_steps=10)
    eye = np.eye(2)
    return ModelParams(
        A=Coefficient.constant(np.array([[0.1, 0.2], [0.0, -0.3]])),
        B=Coefficient.constant(np.array([[1.0], [0.5]])),
        B_tilde=Coefficient.constant(np.array([[0.2], [0.1]])),
        sigma=Coefficient.constant(0.5 * eye),
        F=Coefficient.constant(eye),
        G=Coefficient.constant(np.zeros(2)),
        H=Coefficient.constant(eye),
        Q=Coefficient.constant(eye),
        R=Coefficient.constant(np.array([[1.0]])),
        K=np.array([[0.0]]),
        M=eye,
        x0=np.array([1.0, -1.0]),
        horizon=grid,
    )


class TestValidateMatrix:
    def test_two_dim_model_valid(self):
        model = validate(two_dim_params())
        assert model.n == 2
        assert model.k == 1

    def test_dimension_mismatch_B(self):
        params = two_dim_params().replace(B=Coefficient.constant(np.array([[1.0, 0.0]])))
        with pytest.raises(errors.DimensionMismatch):
            validate(params)


# ---------------------------------------------------------------------------
# coefficient_at: spec examples
# ---------------------------------------------------------------------------

class TestCoefficientAt:
    def test_constant_queried_mid_interval(self):
        model = validate(scalar_params(T=10.0, n_steps=10))
        assert model.coefficient_at("A", 3.7)[0, 0] == 0.5

    def test_table_left_node_convention(self):
        grid = TimeGrid(T=4.0, n_steps=4)  # dt = 1
        params = scalar_params(T=4.0, n_steps=4)
        tab = Coefficient.table(np.array([1.0, 2.0, 3.0, 4.0, 5.0]).reshape(-1, 1, 1))
        model = validate(params.replace(A=tab, horizon=grid))
        assert model.coefficient_at("A", 1.5)[0, 0] == 2.0

    def test_cash_H_at_zero(self):
        from lqmfg.cash import cash_default_params

        model = validate(cash_default_params())
        assert model.coefficient_at("H", 0.0)[0, 0] == 4.0

    def test_grid_nodes_match_raw_table(self):
        grid = TimeGrid(T=2.0, n_steps=4)
        raw = np.array([1.0, 2.0, 3.0, 4.0, 5.0]).reshape(-1, 1, 1)
        params = scalar_params(T=2.0, n_steps=4).replace(
            A=Coefficient.table(raw), horizon=grid
        )
        model = validate(params)
        for idx, t in enumerate(grid.nodes()):
            assert model.coefficient_at("A", t)[0, 0] == raw[idx, 0, 0]

    def test_unknown_coefficient(self):
        model = validate(scalar_params())
        with pytest.raises(errors.UnknownCoefficient):
            model.coefficient_at("Z", 0.0)

    def test_time_out_of_range(self):
        model = validate(scalar_params())
        with pytest.raises(errors.TimeOutOfRange):
            model.coefficient_at("A", -0.1)
        with pytest.raises(errors.TimeOutOfRange):
            model.coefficient_at("A", model.grid.T + 0.1)

    def test_node_values_shape(self):
        model = validate(scalar_params())
        vals = model.node_values("A")
        assert vals.shape == (model.grid.n_steps + 1, 1, 1)
        assert np.all(vals == 0.5)


# ---------------------------------------------------------------------------
# JSON schema round-trip
# ---------------------------------------------------------------------------

class TestJsonSchema:
    def test_round_trip_scalar(self):
        params = scalar_params()
        doc = dump_model_dict(params)
        back = load_model_dict(doc)
        m1, m2 = validate(params), validate(back)
        for name in ("A", "B", "B_tilde", "sigma", "F", "G", "H", "Q", "R", "K", "M"):
            assert np.array_equal(m1.node_values(name), m2.node_values(name))
        assert np.array_equal(m1.x0, m2.x0)

    def test_round_trip_through_json_text(self):
        params = scalar_params()
        doc = json.loads(json.dumps(dump_model_dict(params)))
        model = validate(load_model_dict(doc))
        assert model.n == 1

    def test_affine_ext_round_trip(self):
        from lqmfg.cash import cash_default_params

        params = cash_default_params()
        doc = dump_model_dict(params)
        back = load_model_dict(doc)
        assert back.affine_ext is not None
        assert float(back.affine_ext.l[0]) == 3.0
        model = validate(back)
        r0 = model.affine_r_at_node(0)
        assert r0[0] == 15.0

    def test_missing_key_rejected(self):
        doc = dump_model_dict(scalar_params())
        del doc["coefficients"]["A"]
        with pytest.raises(errors.ModelFormatError):
            load_model_dict(doc)

    def test_table_entry_count_enforced(self):
        doc = dump_model_dict(scalar_params())
        doc["coefficients"]["A"] = {"table": [0.5, 0.5, 0.5]}
        with pytest.raises((errors.ModelFormatError, errors.DimensionMismatch)):
            validate(load_model_dict(doc))

    def test_nested_array_coefficient(self):
        doc = dump_model_dict(scalar_params())
        doc["coefficients"]["A"] = [[0.25]]
        back = load_model_dict(doc)
        model = validate(back)
        assert model.coefficient_at("A", 0.0)[0, 0] == 0.25
