"""Unconstrained finite-horizon optimal control by single shooting.

The input sequence ``u(0..N-1)`` is optimised directly. For the rotation-drift
family with a quadratic terminal cost the compiled kernel does the whole solve;
other models go through :func:`mlvi_mpc.optim.bfgs` with adjoint gradients when
the model supplies derivatives and central differences otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from mlvi_mpc import kernels
from mlvi_mpc.errors import ContractViolation, DivergedRolloutError
from mlvi_mpc.model import RotationDrift, SystemModel
from mlvi_mpc.optim import STATUS_CONVERGED, bfgs, central_difference

Array = np.ndarray


class TerminalCost:
    """Terminal penalty ``F(x)``.

    ``matrix`` is set when ``F(x) = x' W x``; ``gradient`` may return ``None``
    when no analytic derivative exists.
    """

    matrix: Optional[Array] = None

    def __call__(self, x: Array) -> float:
        raise NotImplementedError

    def gradient(self, x: Array) -> Optional[Array]:
        return None


class QuadraticTerminalCost(TerminalCost):
    def __init__(self, W):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        self.matrix = 0.5 * (W + W.T)

    def __call__(self, x):
        return float(x @ self.matrix @ x)

    def gradient(self, x):
        return 2.0 * self.matrix @ x


class ZeroTerminalCost(QuadraticTerminalCost):
    def __init__(self, n: int):
        super().__init__(np.zeros((n, n)))


class FunctionTerminalCost(TerminalCost):
    def __init__(self, fn: Callable[[Array], float], grad: Optional[Callable[[Array], Array]] = None):
        self._fn = fn
        self._grad = grad

    def __call__(self, x):
        return float(self._fn(x))

    def gradient(self, x):
        return None if self._grad is None else self._grad(x)


@dataclass(frozen=True)
class SolverOptions:
    tol_grad: float = 1e-8
    max_iter: int = 500
    u_bound: float = 1e3
    fd_step: float = 1e-6
    use_oracle_start: bool = True
    backend: Optional[str] = None


@dataclass
class FhProblem:
    model: SystemModel
    horizon: int
    terminal_cost: TerminalCost
    initial_state: Array

    def __post_init__(self):
        if self.horizon < 1:
            raise ContractViolation("horizon must be >= 1")
        x = np.atleast_1d(np.asarray(self.initial_state, dtype=float))
        if x.shape != (self.model.state_dim,):
            raise ContractViolation(f"initial state must have dimension {self.model.state_dim}")
        self.initial_state = x


@dataclass
class FhSolution:
    value: float
    inputs: Array  # (N, m)
    states: Array  # (N + 1, n)
    converged: bool
    solver_iterations: int
    grad_inf: float = 0.0
    box_active: bool = False
    start: str = "zero"
    stage_costs: Array = field(default=None, repr=False)


def rollout(model: SystemModel, x0: Array, inputs: Array) -> Array:
    states = np.empty((inputs.shape[0] + 1, model.state_dim))
    states[0] = x0
    for k in range(inputs.shape[0]):
        states[k + 1] = model.transition(states[k], inputs[k])
    return states


def evaluate_cost(model: SystemModel, x0: Array, inputs: Array, terminal_cost: TerminalCost) -> float:
    """``J_N(x0, u) = sum_k l(x_k, u_k) + F(x_N)`` by plain forward simulation."""
    inputs = np.asarray(inputs, dtype=float).reshape(-1, model.input_dim)
    states = rollout(model, np.asarray(x0, dtype=float), inputs)
    total = sum(model.utility(states[k], inputs[k]) for k in range(inputs.shape[0]))
    return float(total + terminal_cost(states[-1]))


def _kernel_params(problem: FhProblem):
    st = problem.model.structure
    if st is None or not isinstance(st.drift, RotationDrift):
        return None
    if problem.terminal_cost.matrix is None or problem.model.state_dim != 2:
        return None
    return st.drift.left, st.drift.right, st.B, st.Q, st.R, problem.terminal_cost.matrix


def _generic_fun_grad(problem: FhProblem, options: SolverOptions):
    model = problem.model
    N, m = problem.horizon, model.input_dim
    x0 = problem.initial_state
    F = problem.terminal_cost

    def cost(z):
        try:
            return evaluate_cost(model, x0, z.reshape(N, m), F)
        except (FloatingPointError, OverflowError):
            return math.inf

    probe = F.gradient(x0)
    if model.has_derivatives and probe is not None:
        def fun_grad(z):
            U = z.reshape(N, m)
            with np.errstate(over="ignore", invalid="ignore"):
                X = rollout(model, x0, U)
                J = sum(model.utility(X[k], U[k]) for k in range(N)) + F(X[N])
                if not math.isfinite(J):
                    return math.inf, np.zeros_like(z)
                lam = F.gradient(X[N])
                G = np.empty((N, m))
                for k in range(N - 1, -1, -1):
                    lx, lu = model.utility_gradient(X[k], U[k])
                    A, Bk = model.transition_jacobian(X[k], U[k])
                    G[k] = lu + Bk.T @ lam
                    lam = lx + A.T @ lam
            return float(J), G.ravel()
    else:
        def fun_grad(z):
            J = cost(z)
            if not math.isfinite(J):
                return math.inf, np.zeros_like(z)
            return J, central_difference(cost, z, options.fd_step)
    return fun_grad


def _oracle_start(problem: FhProblem) -> Optional[Array]:
    oracle = problem.model.oracle
    if oracle is None:
        return None
    x = problem.initial_state.copy()
    U = np.empty((problem.horizon, problem.model.input_dim))
    for k in range(problem.horizon):
        U[k] = oracle.optimal_input(x)
        x = problem.model.transition(x, U[k])
    return U


def _solve_from(problem: FhProblem, U0: Array, options: SolverOptions):
    params = _kernel_params(problem)
    if params is not None:
        impl = kernels.get_backend(options.backend) if options.backend else kernels
        U, J, G, it, status, box = impl.rotquad_solve(
            problem.initial_state, U0, *params,
            tol_grad=options.tol_grad, max_iter=options.max_iter, bound=options.u_bound,
        )
        return U, float(J), float(np.max(np.abs(G))), int(it), int(status), bool(box)
    fg = _generic_fun_grad(problem, options)
    res = bfgs(fg, U0.ravel(), tol_grad=options.tol_grad, max_iter=options.max_iter, bound=options.u_bound)
    return (res.z.reshape(problem.horizon, -1), res.f, res.grad_inf, res.iterations, res.status, res.box_hit)


def solve(
    problem: FhProblem,
    warm_start: Optional[Sequence] = None,
    options: Optional[SolverOptions] = None,
    extra_starts: Sequence[Array] = (),
) -> FhSolution:
    """Minimise the N-step cost with terminal penalty from a deterministic set of starts.

    Starts: the zero sequence, ``warm_start`` (if given), the oracle-guided
    rollout (if the model has an oracle) and ``extra_starts``. The lowest value
    among converged starts wins; if none converged the lowest value overall is
    returned with ``converged=False``.
    """
    options = options or SolverOptions()
    N, m = problem.horizon, problem.model.input_dim
    starts: list[tuple[str, Array]] = [("zero", np.zeros((N, m)))]
    if warm_start is not None:
        ws = np.asarray(warm_start, dtype=float).reshape(-1, m)
        if ws.shape[0] != N:
            raise ContractViolation(f"warm start must have length {N}")
        starts.append(("warm", ws))
    if options.use_oracle_start:
        oracle_U = _oracle_start(problem)
        if oracle_U is not None and np.all(np.isfinite(oracle_U)):
            starts.append(("oracle", oracle_U))
    for i, s in enumerate(extra_starts):
        starts.append((f"extra{i}", np.asarray(s, dtype=float).reshape(N, m)))

    unique: list[tuple[str, Array]] = []
    for label, U0 in starts:
        if not any(np.array_equal(U0, other) for _, other in unique):
            unique.append((label, U0))

    best = None
    for label, U0 in unique:
        try:
            U, J, gi, it, status, box = _solve_from(problem, U0, options)
        except DivergedRolloutError:
            continue
        if not math.isfinite(J):
            continue
        cand = (status == STATUS_CONVERGED, J, U, gi, it, box, label)
        if best is None or (cand[0] and not best[0]) or (cand[0] == best[0] and J < best[1]):
            best = cand
    if best is None:
        raise DivergedRolloutError("every start produced a non-finite rollout")
    converged, J, U, gi, it, box, label = best

    states = rollout(problem.model, problem.initial_state, U)
    stage = np.array([problem.model.utility(states[k], U[k]) for k in range(N)])
    value = float(stage.sum() + problem.terminal_cost(states[N]))
    if not math.isfinite(value):
        raise DivergedRolloutError("non-finite cost at the returned solution")
    return FhSolution(
        value=value, inputs=U, states=states, converged=bool(converged),
        solver_iterations=it, grad_inf=gi, box_active=box, start=label, stage_costs=stage,
    )


def policy(problem: FhProblem, **kwargs) -> Array:
    """Implicit MPC law: first element of the optimal input sequence."""
    return solve(problem, **kwargs).inputs[0]


def shifted_inputs(solution: FhSolution, tail_input) -> Array:
    """``{u*(1), ..., u*(N-1), tail}``, the candidate sequence for the successor state."""
    tail = np.atleast_1d(np.asarray(tail_input, dtype=float))
    return np.vstack([solution.inputs[1:], tail[None, :]])


def upper_bound_next(problem: FhProblem, solution: FhSolution, tail_input) -> float:
    """Cost of the shifted sequence from ``states[1]`` under the problem's terminal cost.

    Upper-bounds the optimal N-step cost at the successor state.
    """
    U = shifted_inputs(solution, tail_input)
    return evaluate_cost(problem.model, solution.states[1], U, problem.terminal_cost)
