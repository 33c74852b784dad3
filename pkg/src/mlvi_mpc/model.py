"""Discrete-time system abstraction, stage utility and the converse-optimality case study.

The case-study plant has a known infinite-horizon optimal cost ``x' P x``, which
makes it usable as a ground-truth oracle for closed-loop suboptimality.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_discrete_are, sqrtm

from mlvi_mpc.errors import ContractViolation

Array = np.ndarray

# Printed case-study constants (4-digit precision).
CASE_P = np.array([[5.0, 1.0], [1.0, 3.0]])
CASE_Q = np.array([[2.0, 0.0], [0.0, 1.0]])
CASE_R = np.array([[1.0]])
CASE_B = np.array([[0.0], [1.0]])
CASE_LEFT = np.array([[0.4608, -0.044], [-0.044, 1.1641]])
CASE_RIGHT = np.array([[1.7013, 0.3249], [0.3249, 1.3764]])


def _as_vector(v, dim: int, name: str) -> Array:
    arr = np.atleast_1d(np.asarray(v, dtype=float))
    if arr.ndim != 1 or arr.shape[0] != dim:
        raise ContractViolation(f"{name} must have dimension {dim}, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class RotationDrift:
    """Drift ``f(x) = left @ Rot(x) @ right @ x`` with the state-dependent rotation.

    ``Rot(x) = [[a1/b, -a2/b], [a2/b, a1/b]]`` with ``a1 = 1 + x1**2``,
    ``a2 = x1 * x2`` and ``b = hypot(a1, a2)``. Only defined for two states.
    """

    left: Array
    right: Array

    @staticmethod
    def rotation(x: Array) -> Array:
        a1 = 1.0 + x[0] * x[0]
        a2 = x[0] * x[1]
        b = np.hypot(a1, a2)
        return np.array([[a1 / b, -a2 / b], [a2 / b, a1 / b]])

    def __call__(self, x: Array) -> Array:
        return self.left @ (self.rotation(x) @ (self.right @ x))

    def jacobian(self, x: Array) -> Array:
        x1, x2 = x
        a1 = 1.0 + x1 * x1
        a2 = x1 * x2
        b = np.hypot(a1, a2)
        c, s = a1 / b, a2 / b
        da1 = np.array([2.0 * x1, 0.0])
        da2 = np.array([x2, x1])
        db = (a1 * da1 + a2 * da2) / b
        dc = (da1 * b - a1 * db) / (b * b)
        ds = (da2 * b - a2 * db) / (b * b)
        z = self.right @ x
        rot = np.array([[c, -s], [s, c]])
        # d(Rot z)/dx = Rot @ right + columns from dRot/dx_j applied to z
        dy = rot @ self.right + np.array(
            [dc * z[0] - ds * z[1], ds * z[0] + dc * z[1]]
        )
        return self.left @ dy


@dataclass(frozen=True)
class QuadraticIhOracle:
    """Known infinite-horizon optimal cost ``V_inf(x) = x' P x`` for ``x+ = drift(x) + B u``."""

    P: Array
    B: Array
    R: Array
    Q: Array
    drift: Callable[[Array], Array]

    def __post_init__(self):
        for name in ("P", "Q", "R"):
            mat = getattr(self, name)
            if not np.allclose(mat, mat.T, atol=1e-12):
                raise ContractViolation(f"{name} must be symmetric")
        if np.linalg.eigvalsh(self.P).min() <= 1e-10:
            raise ContractViolation("P must be positive definite")
        if np.linalg.eigvalsh(self.R).min() <= 1e-10:
            raise ContractViolation("R must be positive definite")
        if np.linalg.eigvalsh(self.Q).min() < -1e-10:
            raise ContractViolation("Q must be positive semidefinite")

    @property
    def state_dim(self) -> int:
        return self.P.shape[0]

    def cost(self, x) -> float:
        x = _as_vector(x, self.state_dim, "x")
        return float(x @ self.P @ x)

    def optimal_input(self, x) -> Array:
        x = _as_vector(x, self.state_dim, "x")
        fx = self.drift(x)
        gain = self.R + self.B.T @ self.P @ self.B
        return -np.linalg.solve(gain, self.B.T @ self.P @ fx)


@dataclass(frozen=True)
class QuadraticStructure:
    """Marker for models of the form ``x+ = drift(x) + B u`` with ``l = x'Qx + u'Ru``.

    Solvers use it to switch to the compiled rollout kernels when the drift is
    a :class:`RotationDrift`.
    """

    drift: Callable[[Array], Array]
    B: Array
    Q: Array
    R: Array


@dataclass(frozen=True)
class SystemModel:
    """Discrete-time plant ``x+ = f(x, u)`` with stage utility ``l(x, u) >= 0``.

    Attributes:
        state_dim: Number of states ``n``.
        input_dim: Number of inputs ``m``.
        transition: ``f(x, u) -> x+``.
        utility: ``l(x, u) -> float``.
        utility_lower_bound: Optional class-K-infinity bound ``alpha_l(|x|)``.
        transition_jacobian: Optional ``(x, u) -> (df/dx, df/du)``.
        utility_gradient: Optional ``(x, u) -> (dl/dx, dl/du)``.
        oracle: Optional exact infinite-horizon cost.
        structure: Optional control-affine quadratic structure.
        name: Label used in traces and summaries.
    """

    state_dim: int
    input_dim: int
    transition: Callable[[Array, Array], Array]
    utility: Callable[[Array, Array], float]
    utility_lower_bound: Optional[Callable[[float], float]] = None
    transition_jacobian: Optional[Callable[[Array, Array], tuple[Array, Array]]] = None
    utility_gradient: Optional[Callable[[Array, Array], tuple[Array, Array]]] = None
    oracle: Optional[QuadraticIhOracle] = None
    structure: Optional[QuadraticStructure] = field(default=None, repr=False)
    name: str = "custom"

    @property
    def has_derivatives(self) -> bool:
        return self.transition_jacobian is not None and self.utility_gradient is not None


def step(model: SystemModel, x, u) -> Array:
    """Apply the transition map once."""
    x = _as_vector(x, model.state_dim, "x")
    u = _as_vector(u, model.input_dim, "u")
    return np.asarray(model.transition(x, u), dtype=float)


def utility_eval(model: SystemModel, x, u) -> float:
    x = _as_vector(x, model.state_dim, "x")
    u = _as_vector(u, model.input_dim, "u")
    return float(model.utility(x, u))


def ih_cost(oracle: QuadraticIhOracle, x) -> float:
    return oracle.cost(x)


def ih_optimal_input(oracle: QuadraticIhOracle, x) -> Array:
    """Closed-form minimiser of ``l(x, u) + V_inf(drift(x) + B u)`` over ``u``."""
    return oracle.optimal_input(x)


def control_affine_quadratic(
    drift: Callable[[Array], Array],
    B,
    Q,
    R,
    *,
    drift_jacobian: Optional[Callable[[Array], Array]] = None,
    P=None,
    name: str = "custom",
) -> SystemModel:
    """Build ``x+ = drift(x) + B u`` with ``l = x'Qx + u'Ru`` and an optional oracle ``x'Px``."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n, m = B.shape
    if Q.shape != (n, n) or R.shape != (m, m):
        raise ContractViolation("inconsistent Q/R/B shapes")

    def transition(x, u):
        return drift(x) + B @ u

    def utility(x, u):
        return float(x @ Q @ x + u @ R @ u)

    def utility_gradient(x, u):
        return 2.0 * Q @ x, 2.0 * R @ u

    def transition_jacobian(x, u):
        return drift_jacobian(x), B

    lam_min = float(np.linalg.eigvalsh(Q).min())
    oracle = None
    if P is not None:
        oracle = QuadraticIhOracle(P=np.asarray(P, dtype=float), B=B, R=R, Q=Q, drift=drift)
    return SystemModel(
        state_dim=n,
        input_dim=m,
        transition=transition,
        utility=utility,
        utility_lower_bound=lambda r: lam_min * r * r,
        transition_jacobian=None if drift_jacobian is None else transition_jacobian,
        utility_gradient=utility_gradient,
        oracle=oracle,
        structure=QuadraticStructure(drift=drift, B=B, Q=Q, R=R),
        name=name,
    )


def rotation_drift_model(left, right, B, Q, R, P=None, name: str = "rotation_drift") -> SystemModel:
    drift = RotationDrift(np.asarray(left, dtype=float), np.asarray(right, dtype=float))
    return control_affine_quadratic(drift, B, Q, R, drift_jacobian=drift.jacobian, P=P, name=name)


def linear_model(A, B, Q, R, name: str = "linear") -> SystemModel:
    """Linear plant with the Riccati solution as its oracle."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = solve_discrete_are(A, B, Q, R)
    P = 0.5 * (P + P.T)
    return control_affine_quadratic(
        lambda x: A @ x, B, Q, R, drift_jacobian=lambda x: A, P=P, name=name
    )


def exact_converse_factors(P=CASE_P, Q=CASE_Q, R=CASE_R, B=CASE_B) -> tuple[Array, Array]:
    """Re-derive the drift factors so that ``x'Px`` satisfies the Bellman equation exactly.

    With ``right = (P - Q)^{1/2}`` and ``left = Pi^{-1/2}``, where
    ``Pi = P - P B (R + B'PB)^{-1} B'P``, the rotation cancels and
    ``drift(x)' Pi drift(x) = x'(P - Q)x``.
    """
    P, Q, R, B = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (P, Q, R, B))
    pi = P - P @ B @ np.linalg.solve(R + B.T @ P @ B, B.T @ P)
    right = np.real(sqrtm(P - Q))
    left = np.linalg.inv(np.real(sqrtm(pi)))
    return 0.5 * (left + left.T), 0.5 * (right + right.T)


def make_case_study(exact: bool = False) -> tuple[SystemModel, QuadraticIhOracle]:
    """Two-state converse-optimality plant with ``V_inf(x) = x' [[5, 1], [1, 3]] x``.

    ``exact=False`` uses the printed 4-digit drift matrices (Bellman identity holds
    to about 1e-4 relative); ``exact=True`` re-derives them to machine precision.
    """
    if exact:
        left, right = exact_converse_factors()
        name = "converse2d_exact"
    else:
        left, right = CASE_LEFT, CASE_RIGHT
        name = "converse2d"
    model = rotation_drift_model(left, right, CASE_B, CASE_Q, CASE_R, P=CASE_P, name=name)
    return model, model.oracle


MODEL_FAMILIES = ("converse2d", "converse2d_exact", "rotation_drift", "linear")


def build_model(name: str, params: Optional[dict] = None) -> SystemModel:
    """Construct a model by family name; ``params`` holds matrices for the parametric families."""
    params = params or {}
    if name == "converse2d":
        return make_case_study()[0]
    if name == "converse2d_exact":
        return make_case_study(exact=True)[0]
    if name == "rotation_drift":
        try:
            return rotation_drift_model(
                params["left"], params["right"], params["B"], params["Q"], params["R"],
                P=params.get("P"),
            )
        except KeyError as exc:
            raise ContractViolation(f"rotation_drift model needs parameter {exc}") from None
    if name == "linear":
        try:
            return linear_model(params["A"], params["B"], params["Q"], params["R"])
        except KeyError as exc:
            raise ContractViolation(f"linear model needs parameter {exc}") from None
    raise ContractViolation(f"unknown model {name!r}; choose from {MODEL_FAMILIES}")
