"""Linear-in-weights critic used as the adaptive terminal cost.

``V(x) = <w, phi(x)>``. Weights move toward the N-step Bellman target by
gradient descent and are then projected onto the set allowed by the stability
budget and positive definiteness.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from mlvi_mpc import kernels
from mlvi_mpc.errors import ContractViolation, StepSizeError
from mlvi_mpc.fh_solver import FhSolution, FunctionTerminalCost, QuadraticTerminalCost, TerminalCost

Array = np.ndarray

PD_MARGIN = 1e-8


@dataclass(frozen=True)
class BasisSet:
    """Ordered basis ``phi: R^n -> R^l``; every function must vanish at the origin.

    ``quadratic`` marks the 2-state monomial basis ``(x1^2, x1 x2, x2^2)``, for
    which positive definiteness is checked exactly through the induced matrix.
    """

    functions: tuple
    gradients: Optional[tuple] = None
    quadratic: bool = False
    name: str = "custom"

    def __len__(self) -> int:
        return len(self.functions)

    def __call__(self, x) -> Array:
        return np.array([f(x) for f in self.functions], dtype=float)

    def jacobian(self, x) -> Optional[Array]:
        if self.gradients is None:
            return None
        return np.array([g(x) for g in self.gradients], dtype=float)


def quad2d() -> BasisSet:
    return BasisSet(
        functions=(lambda x: x[0] * x[0], lambda x: x[0] * x[1], lambda x: x[1] * x[1]),
        gradients=(
            lambda x: np.array([2.0 * x[0], 0.0]),
            lambda x: np.array([x[1], x[0]]),
            lambda x: np.array([0.0, 2.0 * x[1]]),
        ),
        quadratic=True,
        name="quad2d",
    )


BASES = {"quad2d": quad2d}


def make_basis(name: str) -> BasisSet:
    try:
        return BASES[name]()
    except KeyError:
        raise ContractViolation(f"unknown basis {name!r}; choose from {sorted(BASES)}") from None


@dataclass(frozen=True)
class CriticWeights:
    w: Array
    time_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float).copy())


def quadratic_matrix(w) -> Array:
    """Symmetric ``W`` with ``x'Wx = w1 x1^2 + w2 x1 x2 + w3 x2^2``."""
    return np.array([[w[0], 0.5 * w[1]], [0.5 * w[1], w[2]]])


def _check_len(weights: CriticWeights, basis: BasisSet):
    if weights.w.shape != (len(basis),):
        raise ContractViolation(f"expected {len(basis)} weights, got {weights.w.shape}")


def eval(weights: CriticWeights, basis: BasisSet, x) -> float:  # noqa: A001 - mirrors the operation name
    _check_len(weights, basis)
    return float(weights.w @ basis(np.asarray(x, dtype=float)))


def terminal_cost(weights: CriticWeights, basis: BasisSet) -> TerminalCost:
    """Critic as a terminal cost; quadratic bases map to a matrix so the compiled solver applies."""
    _check_len(weights, basis)
    if basis.quadratic:
        return QuadraticTerminalCost(quadratic_matrix(weights.w))
    w = weights.w.copy()
    grad = None
    if basis.gradients is not None:
        grad = lambda x: basis.jacobian(x).T @ w  # noqa: E731
    return FunctionTerminalCost(lambda x: float(w @ basis(x)), grad)


def bellman_target(model, fh_solution: FhSolution, weights: CriticWeights, basis: BasisSet) -> float:
    """N-step look-ahead target: stage costs along the optimal prediction plus the critic at its end."""
    X, U = fh_solution.states, fh_solution.inputs
    N = U.shape[0]
    beta = sum(model.utility(X[k], U[k]) for k in range(N)) + eval(weights, basis, X[N])
    if abs(beta - fh_solution.value) > 1e-9 * max(1.0, abs(beta)):
        raise ContractViolation("FH solution was not computed with this critic as terminal cost")
    return float(beta)


def fit_weights(
    weights: CriticWeights,
    basis: BasisSet,
    x,
    target: float,
    step: Optional[float] = None,
    stop_tol: float = 1e-8,
    max_iters: int = 10_000,
) -> Array:
    """Gradient descent on ``(<w, phi(x)> - target)^2 / 2`` starting from ``weights.w``.

    ``step=None`` selects the normalised default ``0.1 / |phi(x)|^2``. Stops when
    consecutive iterates are within ``stop_tol``.
    """
    phi = basis(np.asarray(x, dtype=float))
    nphi2 = float(phi @ phi)
    if step is None:
        if nphi2 == 0.0:
            return weights.w.copy()
        step = 0.1 / nphi2
    if step <= 0 or stop_tol <= 0:
        raise ContractViolation("step and stop_tol must be positive")
    w, _, diverged = kernels.gd_fit(weights.w, phi, float(target), float(step), float(stop_tol), int(max_iters))
    if diverged:
        bound = 2.0 / nphi2 if nphi2 > 0 else float("inf")
        raise StepSizeError(f"weight fit diverged; use step < 2/|phi(x)|^2 = {bound:.3g}")
    return w


def is_positive_definite(w, basis: BasisSet, validation: Optional[Array] = None, margin: float = PD_MARGIN) -> bool:
    """Positive-definiteness certificate for ``<w, phi(.)>``.

    Exact eigenvalue test for the quadratic basis, otherwise positivity (with
    margin) on a validation sample that excludes the origin.
    """
    w = np.asarray(w, dtype=float)
    if basis.quadratic:
        return float(np.linalg.eigvalsh(quadratic_matrix(w)).min()) >= margin - 1e-14
    pts = default_validation_grid() if validation is None else validation
    vals = np.array([w @ basis(p) for p in pts])
    return bool(np.all(vals >= margin * np.sum(pts * pts, axis=1) - 1e-14))


def default_validation_grid(lo: float = -4.0, hi: float = 4.0, n: int = 21) -> Array:
    g = np.linspace(lo, hi, n)
    pts = np.array([(a, b) for a in g for b in g])
    return pts[np.any(pts != 0.0, axis=1)]


def project_psd_margin(v, margin: float = PD_MARGIN) -> Array:
    """Euclidean projection (in weight space) onto ``{w : W(w) >= margin * I}``.

    Writing ``p = w1 - margin``, ``q = w3 - margin``, ``r = w2``, the set is
    ``p, q >= 0, pq >= r^2/4``. Off the set, the minimiser is the apex, a point
    on one of the two edge rays, or a smooth-boundary point where the KKT
    multiplier ``mu >= 0`` is a root of a quartic. All such points lie in the
    set, so the nearest candidate is the projection.
    """
    v = np.asarray(v, dtype=float)
    vp, vr, vq = v[0] - margin, v[1], v[2] - margin
    if vp >= 0 and vq >= 0 and vp * vq >= 0.25 * vr * vr:
        return v.copy()

    candidates = [(0.0, 0.0, 0.0), (max(vp, 0.0), 0.0, 0.0), (0.0, 0.0, max(vq, 0.0))]
    # (vp + mu vq)(vq + mu vp)(1 + mu/2)^2 - (vr^2/4)(1 - mu^2)^2 = 0
    P = np.polynomial.polynomial
    prod = P.polymul([vp, vq], [vq, vp])
    lhs = P.polymul(prod, [1.0, 1.0, 0.25])
    rhs = 0.25 * vr * vr * np.array([1.0, 0.0, -2.0, 0.0, 1.0])
    coeffs = P.polysub(lhs, rhs)
    roots = P.polyroots(coeffs) if np.any(coeffs != 0.0) else np.array([])
    for mu in roots:
        if abs(mu.imag) > 1e-9 * max(1.0, abs(mu)) or mu.real < -1e-12:
            continue
        mu = mu.real
        dcoeffs = P.polyder(coeffs)
        for _ in range(3):
            slope = P.polyval(mu, dcoeffs)
            if slope == 0.0:
                break
            mu -= P.polyval(mu, coeffs) / slope
        mu = max(mu, 0.0)
        d = 1.0 - mu * mu
        if d == 0.0:
            continue
        p = (vp + mu * vq) / d
        q = (vq + mu * vp) / d
        r = vr / (1.0 + 0.5 * mu)
        if p >= -1e-12 and q >= -1e-12:
            candidates.append((max(p, 0.0), r, max(q, 0.0)))
    shifted = np.array([vp, vr, vq])
    best = min((np.array(c) for c in candidates), key=lambda c: float(np.linalg.norm(c - shifted)))
    out = best + np.array([margin, 0.0, margin])
    lam = float(np.linalg.eigvalsh(quadratic_matrix(out)).min())
    if lam < margin:
        out = out + (margin - lam) * np.array([1.0, 0.0, 1.0])
    return out


@dataclass(frozen=True)
class ProjectionResult:
    weights: CriticWeights
    fallback: bool
    cycles: int


def project_weights(
    candidate,
    current: CriticWeights,
    basis: BasisSet,
    budget_state,
    budget: float,
    max_cycles: int = 100,
    tol: float = 1e-10,
    validation: Optional[Array] = None,
) -> ProjectionResult:
    """Closest weights to ``candidate`` with a bounded terminal-cost increase at ``budget_state``.

    Constraints: ``<w - current, phi(budget_state)> <= budget`` and positive
    definiteness of ``<w, phi(.)>``. With ``C`` the positive-definite set, the
    minimiser is ``w(lam) = proj_C(candidate - lam * a)`` for the smallest
    ``lam >= 0`` meeting the half-space, and ``a . w(lam)`` is nonincreasing in
    ``lam``; ``lam`` is found by bracketing and bisection (``max_cycles``
    bisection rounds past the bracket, stopping when the bracket is below
    ``tol``). Falls back to ``current`` when no feasible point is found.
    """
    if budget < 0:
        raise ContractViolation("budget must be nonnegative")
    cand = np.asarray(candidate, dtype=float)
    a = basis(np.asarray(budget_state, dtype=float))
    c = float(current.w @ a) + budget
    pts = None
    if basis.quadratic:
        proj_pd = project_psd_margin
    else:
        pts = default_validation_grid() if validation is None else validation
        rows = np.array([basis(p) for p in pts])
        rhs = PD_MARGIN * np.sum(pts * pts, axis=1)
        proj_pd = _polyhedron_projector(rows, rhs)

    slack = 1e-12 * max(1.0, abs(c))

    def feasible(w):
        return float(w @ a) <= c + slack and is_positive_definite(w, basis, pts)

    t = current.time_index + 1
    w0 = proj_pd(cand)
    if float(w0 @ a) <= c + slack:
        ok = is_positive_definite(w0, basis, pts)
        return ProjectionResult(CriticWeights(w0 if ok else current.w, t), not ok, 0)

    aa = float(a @ a)
    if aa == 0.0:
        return ProjectionResult(CriticWeights(current.w, t), True, 0)
    lo, hi = 0.0, max(float(w0 @ a) - c, 1e-12) / aa
    cycles = 0
    while float(proj_pd(cand - hi * a) @ a) > c + slack:
        lo, hi = hi, 2.0 * hi
        cycles += 1
        if cycles > 200:
            return ProjectionResult(CriticWeights(current.w, t), True, cycles)
    for _ in range(max_cycles):
        if hi - lo <= tol * max(1.0, hi):
            break
        mid = 0.5 * (lo + hi)
        if float(proj_pd(cand - mid * a) @ a) > c + slack:
            lo = mid
        else:
            hi = mid
        cycles += 1
    w = proj_pd(cand - hi * a)
    if feasible(w):
        return ProjectionResult(CriticWeights(w, t), False, cycles)
    return ProjectionResult(CriticWeights(current.w, t), True, cycles)


def _polyhedron_projector(rows: Array, rhs: Array, sweeps: int = 200):
    """Approximate projection onto ``{w : rows @ w >= rhs}`` by cyclic half-space projections."""
    norms = np.einsum("ij,ij->i", rows, rows)

    def proj(v):
        w = v.copy()
        for _ in range(sweeps):
            viol = rows @ w - rhs
            idx = np.flatnonzero(viol < 0)
            if idx.size == 0:
                break
            for i in idx:
                s = rows[i] @ w - rhs[i]
                if s < 0 and norms[i] > 0:
                    w = w - (s / norms[i]) * rows[i]
        return w
    return proj


def apply_update(
    weights: CriticWeights,
    basis: BasisSet,
    x,
    target: float,
    budget_state,
    budget: float,
    step: Optional[float] = None,
    stop_tol: float = 1e-8,
    max_iters: int = 10_000,
) -> ProjectionResult:
    """Fit toward ``target`` at ``x`` and project; convenience for the closed loop."""
    w_hat = fit_weights(weights, basis, x, target, step=step, stop_tol=stop_tol, max_iters=max_iters)
    return project_weights(w_hat, weights, basis, budget_state, max(budget, 0.0))
