"""Offline verification: convolved-decay certificate, tabular value iteration, grid sweeps."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from mlvi_mpc.errors import ContractViolation, DivergedRolloutError
from mlvi_mpc.fh_solver import FunctionTerminalCost, evaluate_cost
from mlvi_mpc.loop import ClosedLoopTrace, RunConfig, run, suboptimality
from mlvi_mpc.model import QuadraticIhOracle, SystemModel, build_model

Array = np.ndarray

# ---------------------------------------------------------------------------
# Convolved-decay certificate with slack e(t)
# ---------------------------------------------------------------------------

E_VARIANTS = ("printed", "proof")
# gamma must stay strictly below 1 - alpha; compare with a margin so that e.g.
# alpha = 0.7, gamma = 0.3 is rejected even though 1 - 0.7 rounds above 0.3
GAMMA_MARGIN = 1e-12


@dataclass
class DecayData:
    """Minimal trajectory data for the certificate.

    ``vbar_next[t]`` is the upper bound ``Vbar_N(x(t+1), t+1)`` at the successor
    state under the terminal cost in force at ``t + 1``.
    """

    utilities: Array
    fh_costs: Array
    vbar_next: Array
    x0: Optional[Array] = None
    x_final: Optional[Array] = None

    def __post_init__(self):
        self.utilities = np.asarray(self.utilities, dtype=float)
        self.fh_costs = np.asarray(self.fh_costs, dtype=float)
        self.vbar_next = np.asarray(self.vbar_next, dtype=float)
        if not (len(self.utilities) == len(self.fh_costs) == len(self.vbar_next)):
            raise ContractViolation("utilities, fh_costs and vbar_next must have equal length")
        if np.any(self.utilities < 0):
            raise ContractViolation("utilities must be nonnegative")

    @classmethod
    def from_trace(cls, trace: ClosedLoopTrace) -> "DecayData":
        r = trace.records
        return cls(
            utilities=[s.l for s in r], fh_costs=[s.V_N for s in r], vbar_next=[s.vbar_updated for s in r],
            x0=trace.states[0], x_final=trace.states[-1],
        )


@dataclass
class Theorem1Report:
    alpha: float
    gamma: float
    variant: str
    c: Array
    e: Array
    slack: Array  # V_N(t) - Vbar(t+1) - alpha c_t - e(t)
    satisfied: Array
    implied_bound: float  # alpha / (1 - gamma)
    valid: bool
    oracle_check: Optional[bool] = None
    closed_loop_cost: Optional[float] = None
    v_inf: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha, "gamma": self.gamma, "variant": self.variant,
            "c": self.c.tolist(), "e": self.e.tolist(), "slack": self.slack.tolist(),
            "satisfied": [bool(s) for s in self.satisfied], "implied_bound": self.implied_bound,
            "valid": self.valid, "oracle_check": self.oracle_check,
            "closed_loop_cost": self.closed_loop_cost, "v_inf": self.v_inf,
        }


def geometric_convolution(utilities: Sequence[float], gamma: float) -> Array:
    """``c_t = sum_{k<=t} gamma^k l(t-k)`` via the recursion ``c_t = gamma c_{t-1} + l(t)``."""
    c = np.empty(len(utilities))
    acc = 0.0
    for t, l in enumerate(utilities):
        acc = gamma * acc + l
        c[t] = acc
    return c


def slack_sequence(data: DecayData, alpha: float, gamma: float, variant: str = "printed") -> Array:
    """``e(t)`` by its recursion.

    ``printed``: ``e(1) = Vbar(1) - V(0) + alpha gamma l(0)`` and for ``t >= 2``
    ``e(t) = e(t-1) + Vbar(t) - Vbar(t-1) + alpha sum_{p<t} gamma^p l(t-p)``.
    ``proof``: the form whose closed solution is
    ``e(t) = Vbar(t) - V(0) + alpha sum_{k<t} c_k``, i.e. increments use ``c_{t-1}``.
    """
    if variant not in E_VARIANTS:
        raise ContractViolation(f"variant must be one of {E_VARIANTS}")
    l = data.utilities
    T = len(l)
    e = np.zeros(T)
    if T < 2:
        return e
    vb = np.concatenate([[math.nan], data.vbar_next])  # vb[t] = Vbar(x(t), t) for t >= 1
    c = geometric_convolution(l, gamma)
    if variant == "printed":
        e[1] = vb[1] - data.fh_costs[0] + alpha * gamma * l[0]
        for t in range(2, T):
            inc = math.fsum(gamma ** p * l[t - p] for p in range(t))
            e[t] = e[t - 1] + vb[t] - vb[t - 1] + alpha * inc
    else:
        e[1] = vb[1] - data.fh_costs[0] + alpha * c[0]
        for t in range(2, T):
            e[t] = e[t - 1] + vb[t] - vb[t - 1] + alpha * c[t - 1]
    return e


def check_theorem1(
    trace,
    alpha: float,
    gamma: float,
    variant: str = "printed",
    oracle: Optional[QuadraticIhOracle] = None,
    tol: float = 1e-9,
) -> Theorem1Report:
    """Evaluate ``V_N(x(t),t) >= Vbar(x(t+1),t+1) + alpha c_t + e(t)`` along a recorded trajectory.

    ``trace`` is a :class:`ClosedLoopTrace` or :class:`DecayData`. With an oracle
    and a valid certificate, ``alpha/(1-gamma) J_inf <= V_inf(x0) + 1e-6`` is
    cross-checked using the truncated closed-loop cost plus the oracle tail.
    """
    if not (0.0 < alpha <= 1.0):
        raise ContractViolation("alpha must lie in (0, 1]")
    if not (0.0 < gamma < 1.0 - alpha - GAMMA_MARGIN):
        raise ContractViolation(f"gamma must lie in (0, 1 - alpha) = (0, {1.0 - alpha:g})")
    data = trace if isinstance(trace, DecayData) else DecayData.from_trace(trace)
    c = geometric_convolution(data.utilities, gamma)
    e = slack_sequence(data, alpha, gamma, variant)
    slack = data.fh_costs - data.vbar_next - alpha * c - e
    satisfied = slack >= -tol
    valid = bool(np.all(satisfied))
    bound = alpha / (1.0 - gamma)
    rep = Theorem1Report(alpha, gamma, variant, c, e, slack, satisfied, bound, valid)
    if oracle is not None and data.x0 is not None:
        J = math.fsum(data.utilities)
        if data.x_final is not None:
            J += oracle.cost(data.x_final)
        rep.closed_loop_cost = J
        rep.v_inf = oracle.cost(data.x0)
        rep.oracle_check = bool(bound * J <= rep.v_inf + 1e-6) if valid else None
    return rep


def gamma_scan(trace, alpha: float, gammas: Optional[Sequence[float]] = None, variant: str = "printed",
               oracle: Optional[QuadraticIhOracle] = None) -> tuple[Optional[float], list]:
    """Largest ``gamma`` on the scan grid (default 0.05, 0.10, ... below ``1 - alpha``) keeping the certificate valid."""
    if gammas is None:
        gammas = [g for g in np.round(np.arange(0.05, 1.0, 0.05), 10) if g < 1.0 - alpha - GAMMA_MARGIN]
    reports = [check_theorem1(trace, alpha, g, variant, oracle) for g in gammas]
    best = max((r.gamma for r in reports if r.valid), default=None)
    return best, reports


# ---------------------------------------------------------------------------
# Tabular multi-step value iteration
# ---------------------------------------------------------------------------


@dataclass
class TabularValueFn:
    """Node values on a rectangular 2-D lattice with bilinear interpolation.

    Outside the lattice the value is the interpolant at the clamped point plus
    ``x'Px - xc'Pxc`` (``penalty`` = ``P``), matching quadratic growth.
    """

    axes: tuple
    values: Array
    penalty: Optional[Array] = None
    flags: Array = None  # per-node: 1 if the optimal prediction left the lattice, 2 if the solve failed

    def __post_init__(self):
        self.axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        self.values = np.asarray(self.values, dtype=float)
        if len(self.axes) != 2 or self.values.shape != tuple(len(a) for a in self.axes):
            raise ContractViolation("values shape must match the two grid axes")
        if any(len(a) < 2 or np.any(np.diff(a) <= 0) for a in self.axes):
            raise ContractViolation("grid axes must be increasing with at least two points")
        if self.flags is None:
            self.flags = np.zeros(self.values.shape, dtype=int)
        self._lo = np.array([a[0] for a in self.axes])
        self._hi = np.array([a[-1] for a in self.axes])

    @classmethod
    def zeros(cls, lo: float, hi: float, n: int, penalty: Optional[Array] = None) -> "TabularValueFn":
        ax = np.linspace(lo, hi, n)
        return cls((ax, ax.copy()), np.zeros((n, n)), penalty)

    @property
    def spacing(self) -> float:
        return float(max(np.max(np.diff(a)) for a in self.axes))

    def nodes(self) -> Array:
        g = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([gi.ravel() for gi in g], axis=1)

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self._lo - 1e-12) and np.all(x <= self._hi + 1e-12))

    def evaluate(self, X) -> Array:
        """Vectorised value at points ``X`` of shape ``(k, 2)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Xc = np.clip(X, self._lo, self._hi)
        ax, ay = self.axes
        i = np.clip(np.searchsorted(ax, Xc[:, 0], side="right") - 1, 0, len(ax) - 2)
        j = np.clip(np.searchsorted(ay, Xc[:, 1], side="right") - 1, 0, len(ay) - 2)
        tx = (Xc[:, 0] - ax[i]) / (ax[i + 1] - ax[i])
        ty = (Xc[:, 1] - ay[j]) / (ay[j + 1] - ay[j])
        V = self.values
        v = ((1 - tx) * (1 - ty) * V[i, j] + tx * (1 - ty) * V[i + 1, j]
             + (1 - tx) * ty * V[i, j + 1] + tx * ty * V[i + 1, j + 1])
        if self.penalty is not None:
            P = self.penalty
            v = v + np.einsum("ki,ij,kj->k", X, P, X) - np.einsum("ki,ij,kj->k", Xc, P, Xc)
        return v

    def __call__(self, x) -> float:
        return float(self.evaluate(np.asarray(x, dtype=float)[None, :])[0])


def _batch_cost(model: SystemModel, x: Array, Z: Array, N: int, vfn: TabularValueFn) -> Array:
    """N-step costs for a batch of flattened input sequences ``Z`` (shape ``(k, N*m)``)."""
    m = model.input_dim
    costs = np.zeros(len(Z))
    X = np.repeat(x[None, :], len(Z), axis=0)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(N):
            U = Z[:, k * m:(k + 1) * m]
            for r in range(len(Z)):
                costs[r] += model.utility(X[r], U[r])
                X[r] = model.transition(X[r], U[r])
        costs += vfn.evaluate(X)
    costs[~np.isfinite(costs)] = np.inf
    return costs


def _node_solve(model: SystemModel, N: int, vfn: TabularValueFn, x: Array, starts: list,
                u_range: float = 5.0, u_points: int = 21, polish: int = 4) -> tuple[float, Array]:
    """Minimise the N-step cost with the interpolated terminal value at one node.

    The objective is only piecewise smooth, so gradient methods stall at the
    lattice kinks. Candidates come from the supplied starts, the oracle rollout
    and (when ``N*m <= 3``) a coarse exhaustive search over ``[-u_range, u_range]``
    per input refined by a local pass; the best ones seed tight Nelder-Mead
    polishes and the lowest value wins.
    """
    m = model.input_dim
    d = N * m
    F = FunctionTerminalCost(vfn)
    cand = [np.zeros(d)] + [np.asarray(s, dtype=float).ravel() for s in starts]
    if model.oracle is not None:
        xx, zs = x.copy(), []
        for _ in range(N):
            u = model.oracle.optimal_input(xx)
            zs.append(u)
            xx = model.transition(xx, u)
        cand.append(np.concatenate(zs))
    Z = np.array(cand)
    if d <= 3:
        pts = u_points if d <= 2 else max(5, u_points // 2)
        ax = np.linspace(-u_range, u_range, pts)
        grid = np.stack([g.ravel() for g in np.meshgrid(*([ax] * d), indexing="ij")], axis=1)
        Z = np.vstack([Z, grid])
    costs = _batch_cost(model, x, Z, N, vfn)
    order = np.argsort(costs, kind="stable")
    if not np.isfinite(costs[order[0]]):
        raise DivergedRolloutError("no finite start")

    def fun(zz):
        try:
            val = evaluate_cost(model, x, zz.reshape(N, m), F)
        except (FloatingPointError, OverflowError):
            return math.inf
        return val if math.isfinite(val) else math.inf

    seeds = [Z[i] for i in order[:polish] if np.isfinite(costs[i])]
    if d <= 3:
        # second, finer exhaustive pass around the best coarse point
        h = 2.0 * u_range / (pts - 1)
        fine = np.linspace(-h, h, 11)
        local = np.stack([g.ravel() for g in np.meshgrid(*([fine] * d), indexing="ij")], axis=1) + Z[order[0]]
        lc = _batch_cost(model, x, local, N, vfn)
        seeds.insert(0, local[int(np.argmin(lc))])

    best_v, best_z = float(costs[order[0]]), Z[order[0]]
    for z0 in seeds:
        res = minimize(fun, z0, method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000, "maxfev": 8000})
        if res.fun < best_v:
            best_v, best_z = float(res.fun), res.x
    return best_v, best_z.reshape(N, m)


def tabular_mlvi_step(model: SystemModel, vfn: TabularValueFn, horizon: int,
                      previous_inputs: Optional[dict] = None) -> tuple[TabularValueFn, dict]:
    """One multi-step value-iteration sweep over the lattice nodes.

    ``V^{i+1}(node) = min_u sum_{k<N} l + V^i(x_u(N))``. Returns the new value
    function and the per-node optimal sequences (reused as starts next sweep).
    The origin node is pinned to zero; nodes whose prediction leaves the lattice
    get flag 1, nodes whose solve failed keep their old value and get flag 2.
    """
    if horizon < 1:
        raise ContractViolation("horizon must be >= 1")
    previous_inputs = previous_inputs or {}
    shape = vfn.values.shape
    new = np.empty(shape)
    flags = np.zeros(shape, dtype=int)
    inputs = {}
    for idx in np.ndindex(*shape):
        x = np.array([ax[i] for ax, i in zip(vfn.axes, idx)])
        if np.all(x == 0.0):
            new[idx] = 0.0
            inputs[idx] = np.zeros((horizon, model.input_dim))
            continue
        starts = [previous_inputs[idx]] if idx in previous_inputs else []
        try:
            v, U = _node_solve(model, horizon, vfn, x, starts)
        except DivergedRolloutError:
            new[idx] = vfn.values[idx]
            flags[idx] = 2
            continue
        new[idx] = v
        inputs[idx] = U
        states = [x]
        for k in range(horizon):
            states.append(model.transition(states[-1], U[k]))
        if not all(vfn.contains(s) for s in states):
            flags[idx] = 1
    return TabularValueFn(vfn.axes, new, vfn.penalty, flags), inputs


def tabular_mlvi(model: SystemModel, vfn0: TabularValueFn, horizon: int, iterations: int) -> list:
    """Iterates ``[V^0, V^1, ..., V^iterations]``."""
    out = [vfn0]
    prev = None
    for _ in range(iterations):
        nxt, prev = tabular_mlvi_step(model, out[-1], horizon, prev)
        out.append(nxt)
    return out


# ---------------------------------------------------------------------------
# Grid sweeps
# ---------------------------------------------------------------------------


def state_grid(lo: float, hi: float, n: int) -> list:
    """``n x n`` initial states over ``[lo, hi]^2``, first coordinate outermost."""
    if n < 1:
        raise ContractViolation("grid resolution must be >= 1")
    ax = np.linspace(lo, hi, n)
    return [(float(a), float(b)) for a in ax for b in ax]


@dataclass
class SweepCell:
    x0: tuple
    mode: str
    status: str
    J_inf: float
    v_inf: Optional[float]
    suboptimality: Optional[float]
    estimate: Optional[float]
    alpha0: Optional[float]
    sum_b: Optional[float]
    certificate_valid: bool
    steps: int
    wall_clock_s: float
    error: str = ""
    max_decay_violation: Optional[float] = None
    max_budget_violation: Optional[float] = None


@dataclass
class SweepTable:
    cells: list = field(default_factory=list)

    @property
    def values(self) -> Array:
        return np.array([np.nan if c.suboptimality is None else c.suboptimality for c in self.cells])

    def min(self) -> float:
        return float(np.nanmin(self.values))

    def mean(self) -> float:
        return float(np.nanmean(self.values))

    def failures(self) -> list:
        return [c for c in self.cells if c.status != "ok"]


def _run_cell(config: RunConfig) -> SweepCell:
    model = build_model(config.model, config.model_params)
    try:
        trace = run(config, model)
    except Exception as exc:  # noqa: BLE001 - failures are recorded per cell
        return SweepCell(config.x0, config.mode, "error", math.nan, None, None, None, None, None,
                         False, 0, 0.0, error=f"{type(exc).__name__}: {exc}")
    oracle = model.oracle
    s = trace.summary(oracle)
    dec = trace.decay_violations()
    bud = trace.budget_violations()
    return SweepCell(
        x0=config.x0, mode=config.mode, status=trace.status, J_inf=s["J_inf"],
        v_inf=None if oracle is None else oracle.cost(np.array(config.x0)),
        suboptimality=s.get("suboptimality"), estimate=s["estimate"], alpha0=s["alpha0"],
        sum_b=s["sum_b"], certificate_valid=s["certificate_valid"], steps=s["steps"],
        wall_clock_s=s["wall_clock_s"], error=trace.error,
        max_decay_violation=max(dec) if dec else None, max_budget_violation=max(bud) if bud else None,
    )


def sweep(configs: Sequence[RunConfig], jobs: int = 1) -> SweepTable:
    """Run every config; results keep the input order. ``jobs > 1`` uses worker processes."""
    configs = list(configs)
    if jobs > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_run_cell, configs))
    else:
        cells = [_run_cell(c) for c in configs]
    return SweepTable(cells)


def grid_configs(base: RunConfig, lo: float, hi: float, n: int) -> list:
    return [replace(base, x0=x0) for x0 in state_grid(lo, hi, n)]


@dataclass
class Comparison:
    adaptive: SweepTable
    static: SweepTable

    def improvements(self) -> Array:
        """Relative cost reduction ``(J_static - J_mlvi) / J_static`` per cell (nan at the origin)."""
        out = []
        for a, s in zip(self.adaptive.cells, self.static.cells):
            out.append(math.nan if not s.J_inf else (s.J_inf - a.J_inf) / s.J_inf)
        return np.array(out)


def compare(base: RunConfig, lo: float, hi: float, n: int, jobs: int = 1) -> Comparison:
    """MLVI-MPC versus static-terminal-cost MPC on the same grid and horizon."""
    grid = grid_configs(base, lo, hi, n)
    adaptive = sweep([replace(c, mode="mlvi_mpc") for c in grid], jobs)
    static = sweep([replace(c, mode="static_mpc") for c in grid], jobs)
    return Comparison(adaptive, static)


__all__ = [
    "DecayData", "Theorem1Report", "check_theorem1", "gamma_scan", "geometric_convolution", "slack_sequence",
    "TabularValueFn", "tabular_mlvi_step", "tabular_mlvi", "state_grid", "SweepCell", "SweepTable", "sweep",
    "grid_configs", "Comparison", "compare", "suboptimality",
]
