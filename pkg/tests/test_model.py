import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import P_CASE, ref_drift
from mlvi_mpc.errors import ContractViolation
from mlvi_mpc.model import (
    CASE_LEFT,
    CASE_RIGHT,
    RotationDrift,
    build_model,
    exact_converse_factors,
    ih_cost,
    ih_optimal_input,
    linear_model,
    make_case_study,
    step,
    utility_eval,
)

finite = st.floats(-4, 4, allow_nan=False)


def test_step_examples(model):
    assert np.array_equal(step(model, [0, 0], [0]), [0.0, 0.0])
    expected = CASE_LEFT @ CASE_RIGHT @ np.array([1.0, 0.0])  # Rot(1, 0) = I
    np.testing.assert_allclose(step(model, [1, 0], [0]), expected, atol=1e-15)
    np.testing.assert_allclose(step(model, [0, 0], [1]), [0.0, 1.0], atol=1e-15)


def test_step_dimension_errors(model):
    with pytest.raises(ContractViolation):
        step(model, [1, 2, 3], [0])
    with pytest.raises(ContractViolation):
        step(model, [1, 2], [0, 1])
    with pytest.raises(ContractViolation):
        utility_eval(model, [1], [0])


def test_utility_examples(model):
    assert utility_eval(model, [0, 0], [0]) == 0.0
    assert utility_eval(model, [1, 0], [0]) == 2.0
    assert utility_eval(model, [1, 1], [1]) == 4.0


def test_ih_cost_examples(oracle):
    assert ih_cost(oracle, [0, 0]) == 0.0
    assert ih_cost(oracle, [1, 1]) == 10.0
    assert ih_cost(oracle, [1, 0]) == 5.0


@pytest.mark.parametrize("x", [(0.0, 0.0), (1.0, 0.0), (-3.0, -4.0), (1.0, 1.0)])
def test_optimal_input_matches_brute_force_scan(oracle, x):
    x = np.array(x)
    u_grid = np.arange(-10.0, 10.0 + 1e-12, 1e-4)
    f = ref_drift(x)
    nxt = np.stack([np.full_like(u_grid, f[0]), f[1] + u_grid], axis=1)
    rhs = x @ np.diag([2.0, 1.0]) @ x + u_grid ** 2 + np.einsum("ki,ij,kj->k", nxt, P_CASE, nxt)
    u_scan = u_grid[np.argmin(rhs)]
    assert abs(ih_optimal_input(oracle, x)[0] - u_scan) < 1e-3


def test_drift_matches_independent_formula(model):
    rng = np.random.default_rng(3)
    for x in rng.uniform(-4, 4, size=(50, 2)):
        np.testing.assert_allclose(model.transition(x, np.zeros(1)), ref_drift(x), rtol=1e-13, atol=1e-13)


@given(finite, finite)
def test_rotation_is_orthogonal(x1, x2):
    R = RotationDrift.rotation(np.array([x1, x2]))
    assert np.linalg.norm(R.T @ R - np.eye(2)) < 1e-12
    assert abs(np.linalg.det(R) - 1.0) < 1e-12


def test_rotation_example():
    R = RotationDrift.rotation(np.array([2.0, -1.0]))
    assert abs(np.linalg.det(R) - 1.0) < 1e-12


def test_fixed_point_and_lower_bound(model):
    assert np.all(np.abs(model.transition(np.zeros(2), np.zeros(1))) <= 1e-12)
    assert model.utility(np.zeros(2), np.zeros(1)) == 0.0
    rng = np.random.default_rng(0)
    for x, u in zip(rng.normal(size=(100, 2)) * 3, rng.normal(size=(100, 1))):
        lval = model.utility(x, u)
        assert lval >= 0.0
        assert lval >= model.utility_lower_bound(np.linalg.norm(x)) - 1e-12


def test_drift_jacobian_matches_finite_differences(model):
    rng = np.random.default_rng(1)
    h = 1e-6
    for x in rng.uniform(-4, 4, size=(20, 2)):
        A, B = model.transition_jacobian(x, np.zeros(1))
        fd = np.column_stack([(ref_drift(x + h * e) - ref_drift(x - h * e)) / (2 * h) for e in np.eye(2)])
        np.testing.assert_allclose(A, fd, atol=1e-7)
        np.testing.assert_allclose(B, [[0.0], [1.0]])


def _bellman_residuals(model, oracle):
    ax = np.linspace(-4, 4, 21)
    out = []
    for x in (np.array([a, b]) for a in ax for b in ax):
        u = oracle.optimal_input(x)
        nxt = model.transition(x, u)
        out.append(abs(oracle.cost(x) - (model.utility(x, u) + oracle.cost(nxt))))
    return np.array(out)


def test_bellman_identity_exact_factors():
    model, oracle = make_case_study(exact=True)
    assert _bellman_residuals(model, oracle).max() < 1e-6


def test_exact_factors_round_to_printed_constants():
    left, right = exact_converse_factors()
    np.testing.assert_allclose(left, CASE_LEFT, atol=6e-5)
    np.testing.assert_allclose(right, CASE_RIGHT, atol=6e-5)


def test_printed_constants_residual_is_rounding_sized(model, oracle):
    # The printed 4-digit factors break the identity at the 1e-4 relative level.
    res = _bellman_residuals(model, oracle)
    ax = np.linspace(-4, 4, 21)
    v = np.array([oracle.cost(np.array([a, b])) for a in ax for b in ax])
    assert np.max(res / np.maximum(v, 1.0)) < 5e-4


def test_bellman_at_one_one_exact():
    model, oracle = make_case_study(exact=True)
    x = np.array([1.0, 1.0])
    u = np.arange(-10, 10, 1e-4)
    f = model.transition(x, np.zeros(1))
    nxt = np.stack([np.full_like(u, f[0]), f[1] + u], axis=1)
    rhs = model.utility(x, np.zeros(1)) + u ** 2 + np.einsum("ki,ij,kj->k", nxt, P_CASE, nxt)
    assert abs(oracle.cost(x) - rhs.min()) < 1e-6


def test_oracle_closed_loop_converges_from_corners(model, oracle):
    for x in ([4, 4], [4, -4], [-4, 4], [-4, -4]):
        x = np.array(x, dtype=float)
        for _ in range(50):
            x = model.transition(x, oracle.optimal_input(x))
            if np.linalg.norm(x) < 1e-3:
                break
        assert np.linalg.norm(x) < 1e-3


def test_oracle_validation():
    from mlvi_mpc.model import QuadraticIhOracle
    with pytest.raises(ContractViolation):
        QuadraticIhOracle(P=np.array([[1.0, 2.0], [0.0, 1.0]]), B=np.array([[0.0], [1.0]]), R=np.eye(1),
                          Q=np.eye(2), drift=lambda x: x)
    with pytest.raises(ContractViolation):
        QuadraticIhOracle(P=-np.eye(2), B=np.array([[0.0], [1.0]]), R=np.eye(1), Q=np.eye(2), drift=lambda x: x)


def test_linear_family_uses_riccati_oracle():
    A = np.array([[1.1, 0.2], [0.0, 0.9]])
    m = linear_model(A, [[0.0], [1.0]], np.eye(2), np.eye(1))
    x = np.array([1.0, -2.0])
    u = m.oracle.optimal_input(x)
    assert abs(m.oracle.cost(x) - (m.utility(x, u) + m.oracle.cost(m.transition(x, u)))) < 1e-9


def test_build_model_by_name():
    assert build_model("converse2d").name == "converse2d"
    assert build_model("converse2d_exact").name == "converse2d_exact"
    with pytest.raises(ContractViolation):
        build_model("nope")
    with pytest.raises(ContractViolation):
        build_model("linear", {"A": [[1.0]]})
