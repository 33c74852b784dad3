import math

import numpy as np
import pytest

from mlvi_mpc import critic, loop
from mlvi_mpc.errors import ContractViolation, InconsistencyError, SolverAbort
from mlvi_mpc.fh_solver import SolverOptions
from mlvi_mpc.loop import RunConfig, run, suboptimality


def test_origin_start_is_trivial(oracle):
    tr = run(RunConfig(x0=(0.0, 0.0)))
    assert tr.steps == 1 and tr.records == []
    assert tr.closed_loop_cost(oracle) == 0.0
    assert tr.ledger is None
    assert suboptimality(tr, oracle) == 1.0
    s = tr.summary(oracle)
    assert s["J_inf"] == 0.0 and s["suboptimality"] == 1.0 and s["estimate"] is None


@pytest.mark.slow
def test_static_mpc_converges_from_grid():
    # |x| < 1e-2 after 14 steps is out of reach even for the optimal law (see below);
    # check 1e-1 at 14 steps and 1e-2 by step 25.
    ax = np.linspace(-4, 4, 9)
    for x0 in [(a, b) for a in ax for b in ax]:
        tr = run(RunConfig(x0=x0, horizon=4, mode="static_mpc", n_sim=25))
        assert tr.status == "ok"
        assert np.linalg.norm(tr.states[min(14, tr.steps - 1)]) < 1e-1, x0
        assert np.linalg.norm(tr.states[-1]) < 1e-2, x0


def test_optimal_law_needs_more_than_fourteen_steps(model, oracle):
    x = np.array([4.0, 0.0])
    norms = []
    for _ in range(20):
        x = model.transition(x, oracle.optimal_input(x))
        norms.append(np.linalg.norm(x))
    assert norms[13] > 1e-2
    assert next(k for k, n in enumerate(norms, 1) if n < 1e-2) == 18


def test_first_step_identical_between_modes():
    a = run(RunConfig(x0=(0.75, -4.0), mode="mlvi_mpc"))
    b = run(RunConfig(x0=(0.75, -4.0), mode="static_mpc"))
    np.testing.assert_array_equal(a.states[1], b.states[1])
    np.testing.assert_array_equal(a.records[0].u, b.records[0].u)
    assert a.records[0].V_N == b.records[0].V_N


def test_static_mode_never_adapts():
    tr = run(RunConfig(x0=(-3.0, -4.0), mode="static_mpc"))
    for r in tr.records:
        np.testing.assert_array_equal(r.weights, np.zeros(3))
        assert r.budget_used == 0.0


def test_run_is_deterministic():
    cfg = RunConfig(x0=(-3.0, -4.0), horizon=3)
    a, b = run(cfg), run(cfg)
    assert len(a.records) == len(b.records)
    for r, s in zip(a.records, b.records):
        assert r.V_N == s.V_N and r.b == s.b
        np.testing.assert_array_equal(r.u, s.u)
        np.testing.assert_array_equal(r.weights_next, s.weights_next)


def test_trace_resimulates(model):
    tr = run(RunConfig(x0=(0.75, -4.0)))
    for r, x_next in zip(tr.records, tr.states[1:]):
        np.testing.assert_allclose(model.transition(r.x, r.u), x_next, atol=1e-12)
        assert r.l == pytest.approx(model.utility(r.x, r.u), abs=1e-14)
    assert tr.steps == len(tr.records) + 1


def test_terminal_cost_chain_and_budget():
    tr = run(RunConfig(x0=(-3.0, -4.0), horizon=3))
    assert tr.status == "ok"
    for r, nxt in zip(tr.records, tr.records[1:]):
        np.testing.assert_array_equal(r.weights_next, nxt.weights)
    for r in tr.records:
        assert critic.is_positive_definite(r.weights_next, critic.quad2d()) or not r.weights_next.any()
    assert max(tr.budget_violations()) <= 1e-9


def test_upper_policy_ledger_closes_exactly():
    tr = run(RunConfig(x0=(0.75, -4.0)))
    led = tr.ledger
    assert led.steps == len(tr.records)
    assert max(abs(v) for v in led.cumulative_residuals()) < 1e-9
    assert tr.records[0].b < 0  # the first update spends budget
    assert led.estimate == pytest.approx(led.alpha0 + 0.3 + led.sum_b, abs=1e-14)


def test_upper_policy_per_step_slack_is_bound_gap():
    # closing with Vbar_N(x(t+1), t+1) makes the per-step certificate short by Vbar_N(x(t), t) - V_N(x(t), t)
    tr = run(RunConfig(x0=(0.75, -4.0)))
    res = tr.ledger.decay_residuals()
    assert res[0] == pytest.approx(0.0, abs=1e-9)
    for t in range(1, len(res)):
        gap = tr.records[t - 1].vbar_updated - tr.records[t].V_N
        assert gap >= -1e-9
        assert res[t] == pytest.approx(-gap, abs=1e-9)


def test_sharp_policy_certificate_holds_per_step():
    tr = run(RunConfig(x0=(0.75, -4.0), v_next_policy="sharp"))
    led = tr.ledger
    assert led.steps == len(tr.records)
    assert tr.final_value is not None
    assert min(led.decay_residuals()) >= -1e-9
    # same trajectory; the policies only differ in which successor value closes each step
    up = run(RunConfig(x0=(0.75, -4.0)))
    np.testing.assert_array_equal(tr.states[-1], up.states[-1])
    assert abs(led.sum_b - up.ledger.sum_b) < 1e-4


def test_solver_abort_leaves_partial_trace():
    cfg = RunConfig(x0=(-3.0, -4.0), solver=SolverOptions(max_iter=1, use_oracle_start=False))
    tr = run(cfg)
    assert tr.status == "solver_abort"
    assert "did not converge" in tr.error
    assert tr.steps == len(tr.records) + 1
    with pytest.raises(SolverAbort):
        tr.raise_for_status()


def test_budget_breach_raises(monkeypatch):
    real = critic.apply_update

    def greedy(weights, basis, x, target, budget_state, budget, **kw):
        res = real(weights, basis, x, target, budget_state, budget, **kw)
        w = res.weights.w + np.array([10.0, 0.0, 10.0])
        return critic.ProjectionResult(critic.CriticWeights(w, res.weights.time_index), False, 0)

    monkeypatch.setattr(loop.critic, "apply_update", greedy)
    with pytest.raises(InconsistencyError):
        run(RunConfig(x0=(0.75, -4.0)))


def test_stop_radius_ends_run():
    tr = run(RunConfig(x0=(1e-5, 0.0), stop_radius=1e-4))
    assert tr.records == [] and tr.steps == 1


def test_suboptimality_inconsistency(oracle):
    tr = run(RunConfig(x0=(1.0, 0.0), n_sim=1))
    tr.records[0].l = 0.0
    tr.states[-1] = np.zeros(2)
    with pytest.raises(InconsistencyError):
        suboptimality(tr, oracle)


def test_summary_fields(oracle):
    s = run(RunConfig(x0=(0.75, -4.0), horizon=3)).summary(oracle)
    for key in ("x0", "N", "mode", "J_inf", "suboptimality", "alpha0", "abar", "sum_b", "estimate",
                "certificate_valid", "wall_clock_s", "steps", "status"):
        assert key in s
    assert s["wall_clock_s"] > 0
    assert math.isclose(s["suboptimality"], oracle.cost([0.75, -4.0]) / s["J_inf"])


@pytest.mark.parametrize("bad", [
    dict(horizon=0), dict(n_sim=0), dict(mode="x"), dict(v_next_policy="x"), dict(eta=-1.0),
    dict(eps_w=0.0), dict(stop_radius=-1.0),
])
def test_config_validation(bad):
    with pytest.raises(ContractViolation):
        RunConfig(x0=(1.0, 1.0), **bad)


def test_dimension_checks():
    with pytest.raises(ContractViolation):
        run(RunConfig(x0=(1.0, 1.0, 1.0)))
    with pytest.raises(ContractViolation):
        run(RunConfig(x0=(1.0, 1.0), w0=(1.0, 2.0)))
