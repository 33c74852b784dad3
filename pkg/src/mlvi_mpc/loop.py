"""Closed-loop MLVI-MPC with online terminal-cost adaptation, and the static-terminal-cost baseline.

Per step ``t`` (``mlvi_mpc`` mode):

1. solve the N-step problem at ``x(t)`` with terminal cost ``F^t``;
2. evaluate the shifted-sequence upper bound ``Vbar_N(x(t+1), t)`` with tail input ``ubar``;
3. estimate the decay rate ``alpha_hat(t)`` (skipped when ``l(t)`` is below threshold);
4. fit the critic toward the N-step Bellman target and project it under the
   budget ``alpha_hat(t) l(t)`` at ``x_{N+1}``;
5. close the bound ledger for the step;
6. apply ``u*(0)``.

``static_mpc`` mode skips 4 and keeps ``F`` fixed; the ledger is still kept so
both modes report a bound estimate.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from mlvi_mpc import critic
from mlvi_mpc.bounds import BoundLedger, DecaySequence
from mlvi_mpc.errors import ContractViolation, DivergedRolloutError, InconsistencyError, SolverAbort
from mlvi_mpc.fh_solver import FhProblem, SolverOptions, shifted_inputs, solve, upper_bound_next
from mlvi_mpc.model import QuadraticIhOracle, SystemModel, build_model

MODES = ("mlvi_mpc", "static_mpc")
# "upper": close b_t with Vbar_N(x(t+1), t+1), i.e. the upper bound under the updated
# terminal cost (strictly causal). "sharp": close b_t one step later with V_N(x(t+1), t+1).
V_NEXT_POLICIES = ("upper", "sharp")
BUDGET_TOL = 1e-9


@dataclass
class RunConfig:
    x0: tuple
    model: str = "converse2d"
    model_params: dict = field(default_factory=dict)
    horizon: int = 4
    basis: str = "quad2d"
    w0: Optional[tuple] = None
    abar: float = 0.3
    eta: Optional[float] = None  # None: normalised step 0.1 / |phi(x)|^2
    eps_w: float = 1e-8
    fit_max_iters: int = 10_000
    tail_input: float = 0.0
    n_sim: int = 14
    stop_radius: float = 1e-4
    mode: str = "mlvi_mpc"
    v_next_policy: str = "upper"
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        self.x0 = tuple(float(v) for v in np.atleast_1d(self.x0))
        if self.horizon < 1:
            raise ContractViolation("horizon must be >= 1")
        if self.n_sim < 1:
            raise ContractViolation("n_sim must be >= 1")
        if self.stop_radius < 0:
            raise ContractViolation("stop_radius must be >= 0")
        if self.mode not in MODES:
            raise ContractViolation(f"mode must be one of {MODES}")
        if self.v_next_policy not in V_NEXT_POLICIES:
            raise ContractViolation(f"v_next_policy must be one of {V_NEXT_POLICIES}")
        if self.eta is not None and self.eta <= 0:
            raise ContractViolation("eta must be positive")
        if self.eps_w <= 0:
            raise ContractViolation("eps_w must be positive")
        if self.w0 is not None:
            self.w0 = tuple(float(v) for v in self.w0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["x0"] = list(self.x0)
        d["w0"] = None if self.w0 is None else list(self.w0)
        return d


@dataclass
class StepRecord:
    t: int
    x: np.ndarray
    u: np.ndarray
    l: float
    V_N: float
    Vbar_next: float  # Vbar_N(x(t+1), t): shifted sequence under F^t
    vbar_updated: float  # Vbar_N(x(t+1), t+1): same sequence under F^{t+1}
    alpha_hat: float  # nan when l(t) is below threshold
    weights: np.ndarray  # w^t, the terminal cost used at this step
    weights_next: np.ndarray  # w^{t+1}
    b: float = math.nan  # b_t once closed
    budget: float = 0.0
    budget_used: float = 0.0
    fallback: bool = False
    solver_iterations: int = 0
    start: str = ""


@dataclass
class ClosedLoopTrace:
    config: RunConfig
    records: list = field(default_factory=list)
    states: list = field(default_factory=list)  # x(0) .. x(T), one more than records
    ledger: Optional[BoundLedger] = None
    status: str = "ok"
    error: str = ""
    fallbacks: int = 0
    final_value: Optional[float] = None  # V_N(x(T), T), solved only for the sharp policy
    wall_clock_s: float = 0.0

    @property
    def x0(self) -> np.ndarray:
        return self.states[0]

    @property
    def steps(self) -> int:
        return len(self.states)

    @property
    def utilities(self) -> np.ndarray:
        return np.array([r.l for r in self.records])

    def closed_loop_cost(self, oracle: Optional[QuadraticIhOracle] = None) -> float:
        """Truncated ``sum_t l(t)`` plus the oracle tail ``V_inf(x(T))`` when an oracle is given."""
        total = math.fsum(r.l for r in self.records)
        if oracle is not None:
            total += oracle.cost(self.states[-1])
        return total

    def decay_violations(self) -> list:
        """``V_N(x(t+1),t+1) - (V_N(x(t),t) - alpha_hat(t) l(t))`` for consecutive non-frozen steps."""
        out = []
        for r, nxt in zip(self.records, self.records[1:]):
            if math.isfinite(r.alpha_hat):
                out.append(nxt.V_N - (r.V_N - r.alpha_hat * r.l))
        return out

    def budget_violations(self) -> list:
        """Terminal-cost increase at ``x_{N+1}`` minus its budget, per adapted step."""
        return [r.budget_used - r.budget for r in self.records if math.isfinite(r.alpha_hat)]

    def raise_for_status(self):
        if self.status == "solver_abort":
            raise SolverAbort(self.error)
        if self.status == "diverged":
            raise DivergedRolloutError(self.error)

    def summary(self, oracle: Optional[QuadraticIhOracle] = None) -> dict:
        led = self.ledger
        out = {
            "x0": [float(v) for v in self.states[0]],
            "N": self.config.horizon,
            "mode": self.config.mode,
            "J_inf": self.closed_loop_cost(oracle),
        }
        if oracle is not None:
            out["suboptimality"] = suboptimality(self, oracle) if self.status == "ok" else None
        out.update(
            alpha0=None if led is None else led.alpha0,
            abar=self.config.abar,
            sum_b=None if led is None else led.sum_b,
            estimate=None if led is None else led.estimate,
            certificate_valid=False if led is None else led.certificate_valid,
            wall_clock_s=self.wall_clock_s,
            steps=self.steps,
            status=self.status,
            fallbacks=self.fallbacks,
            v_next_policy=self.config.v_next_policy,
        )
        return out


def _tail(config: RunConfig, m: int) -> np.ndarray:
    tail = np.atleast_1d(np.asarray(config.tail_input, dtype=float))
    return np.full(m, tail[0]) if tail.size == 1 and m > 1 else tail


def run(config: RunConfig, model: Optional[SystemModel] = None) -> ClosedLoopTrace:
    """Execute one closed-loop run. Solver failures end the run with a partial trace and a status."""
    t_start = time.perf_counter()
    model = model or build_model(config.model, config.model_params)
    basis = critic.make_basis(config.basis)
    x = np.asarray(config.x0, dtype=float)
    if x.shape != (model.state_dim,):
        raise ContractViolation(f"x0 must have dimension {model.state_dim}")
    ubar = _tail(config, model.input_dim)
    w = critic.CriticWeights(np.zeros(len(basis)) if config.w0 is None else np.array(config.w0), 0)
    if w.w.shape != (len(basis),):
        raise ContractViolation(f"w0 must have {len(basis)} entries")
    adapt = config.mode == "mlvi_mpc"
    trace = ClosedLoopTrace(config=config, states=[x.copy()])
    ledger = BoundLedger(DecaySequence.remark6(config.abar))
    warm = None

    for t in range(config.n_sim):
        if np.linalg.norm(x) <= config.stop_radius:
            break
        F = critic.terminal_cost(w, basis)
        problem = FhProblem(model, config.horizon, F, x)
        try:
            sol = solve(problem, warm_start=warm, options=config.solver)
        except DivergedRolloutError as exc:
            trace.status, trace.error = "diverged", f"t={t}: {exc}"
            break
        if not sol.converged:
            trace.status = "solver_abort"
            trace.error = f"t={t}: FH solve did not converge (grad {sol.grad_inf:.3g})"
            break
        if config.v_next_policy == "sharp" and ledger is not None and t > 0:
            _close(trace, ledger, sol.value)

        u = sol.inputs[0]
        l_t = float(model.utility(x, u))
        vbar = upper_bound_next(problem, sol, ubar)
        x_end = model.transition(sol.states[-1], ubar)
        ah = ledger.record(l_t, sol.value, vbar) if ledger is not None else None
        if t == 0 and ah is None:
            ledger = None  # l(0) ~ 0: the bound is trivial and b_t is undefined
            trace.ledger = None
        else:
            trace.ledger = ledger

        w_next, fallback, budget = w, False, 0.0
        if ah is not None:
            budget = max(ah * l_t, 0.0)
            if adapt:
                target = critic.bellman_target(model, sol, w, basis)
                res = critic.apply_update(
                    w, basis, x, target, x_end, budget,
                    step=config.eta, stop_tol=config.eps_w, max_iters=config.fit_max_iters,
                )
                w_next, fallback = res.weights, res.fallback
        if w_next is w:
            w_next = critic.CriticWeights(w.w, w.time_index + 1)
        f_old, f_new = critic.eval(w, basis, x_end), critic.eval(w_next, basis, x_end)
        if f_new - f_old > budget + BUDGET_TOL * max(1.0, abs(f_old)):
            raise InconsistencyError(f"t={t}: terminal-cost increase {f_new - f_old:.3g} exceeds budget {budget:.3g}")
        rec = StepRecord(
            t=t, x=x.copy(), u=np.array(u, dtype=float), l=l_t, V_N=sol.value,
            Vbar_next=vbar, vbar_updated=vbar - f_old + f_new,
            alpha_hat=math.nan if ah is None else ah,
            weights=w.w.copy(), weights_next=w_next.w.copy(),
            budget=budget, budget_used=f_new - f_old, fallback=fallback,
            solver_iterations=sol.solver_iterations, start=sol.start,
        )
        trace.records.append(rec)
        trace.fallbacks += int(fallback)
        if ledger is not None and config.v_next_policy == "upper":
            _close(trace, ledger, rec.vbar_updated)

        w = w_next
        warm = shifted_inputs(sol, ubar)
        x = sol.states[1].copy()
        trace.states.append(x.copy())

    if (trace.status == "ok" and ledger is not None and config.v_next_policy == "sharp"
            and ledger.steps < len(trace.records)):
        try:
            final = solve(FhProblem(model, config.horizon, critic.terminal_cost(w, basis), x),
                          warm_start=warm, options=config.solver)
            if final.converged:
                trace.final_value = final.value
                _close(trace, ledger, final.value)
            else:
                trace.status, trace.error = "solver_abort", "final FH solve did not converge"
        except DivergedRolloutError as exc:
            trace.status, trace.error = "diverged", f"final solve: {exc}"
    trace.wall_clock_s = time.perf_counter() - t_start
    return trace


def _close(trace: ClosedLoopTrace, ledger: BoundLedger, v_next: float):
    t = ledger.steps
    trace.records[t].b = ledger.close(v_next)


def suboptimality(trace: ClosedLoopTrace, oracle: QuadraticIhOracle) -> float:
    """``V_inf(x0) / J_inf(x0)`` with the truncated-plus-tail closed-loop cost; 1 at the origin."""
    x0 = trace.states[0]
    v_inf = oracle.cost(x0)
    J = trace.closed_loop_cost(oracle)
    if J == 0.0:
        if np.any(x0 != 0.0):
            raise InconsistencyError("zero closed-loop cost from a nonzero initial state")
        return 1.0
    return v_inf / J
