"""Dense BFGS for the small unconstrained input-sequence problems.

The compiled kernel in ``_kernels.pyx`` mirrors :func:`bfgs` step for step; keep
the two in sync when changing the line search or the update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from mlvi_mpc.errors import DivergedRolloutError

ARMIJO_C1 = 1e-4
MAX_BACKTRACKS = 60
FLAT_RTOL = 1e-12

STATUS_CONVERGED = 0
STATUS_MAX_ITER = 1
STATUS_STALLED = 2


@dataclass
class OptResult:
    z: np.ndarray
    f: float
    grad: np.ndarray
    iterations: int
    status: int
    box_hit: bool

    @property
    def grad_inf(self) -> float:
        return float(np.max(np.abs(self.grad))) if self.grad.size else 0.0

    @property
    def converged(self) -> bool:
        return self.status == STATUS_CONVERGED


def bfgs(
    fun_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    z0: np.ndarray,
    tol_grad: float = 1e-8,
    max_iter: int = 500,
    bound: float = 1e3,
) -> OptResult:
    """Minimise ``fun_grad`` from ``z0``.

    Backtracking Armijo line search; near the optimum, where cost differences
    drop below float resolution, a step is also accepted if the cost does not
    rise measurably and the gradient infinity-norm shrinks. Trial points with
    ``max|z| > bound`` are rejected and reported through ``box_hit``.
    """
    z = np.array(z0, dtype=float)
    d = z.size
    f, g = fun_grad(z)
    if not math.isfinite(f):
        raise DivergedRolloutError("non-finite cost at the starting point")
    g = np.asarray(g, dtype=float)
    H = np.eye(d)
    fresh = True
    box_hit = False
    status = STATUS_MAX_ITER
    it = 0
    while it < max_iter:
        gmax = float(np.max(np.abs(g))) if d else 0.0
        if gmax < tol_grad:
            status = STATUS_CONVERGED
            break
        p = -(H @ g)
        gp = float(g @ p)
        if gp >= 0.0:
            H = np.eye(d)
            fresh = True
            p = -g
            gp = -float(g @ g)
        t = 1.0
        accepted = False
        for _ in range(MAX_BACKTRACKS):
            zn = z + t * p
            if float(np.max(np.abs(zn))) > bound:
                box_hit = True
                t *= 0.5
                continue
            fn, gn = fun_grad(zn)
            if math.isfinite(fn):
                if fn <= f + ARMIJO_C1 * t * gp:
                    accepted = True
                    break
                if fn <= f + FLAT_RTOL * (1.0 + abs(f)) and float(np.max(np.abs(gn))) < gmax:
                    accepted = True
                    break
            t *= 0.5
        it += 1
        if not accepted:
            if fresh:
                status = STATUS_STALLED
                break
            H = np.eye(d)
            fresh = True
            continue
        gn = np.asarray(gn, dtype=float)
        s = zn - z
        y = gn - g
        sy = float(s @ y)
        if sy > 1e-14 * float(np.linalg.norm(s) * np.linalg.norm(y)) and sy > 0.0:
            if fresh:
                H = (sy / float(y @ y)) * np.eye(d)
                fresh = False
            rho = 1.0 / sy
            Hy = H @ y
            H = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) + (rho * rho * float(y @ Hy) + rho) * np.outer(s, s)
        z, f, g = zn, fn, gn
    return OptResult(z=z, f=float(f), grad=g, iterations=it, status=status, box_hit=box_hit)


def central_difference(fun: Callable[[np.ndarray], float], z: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient."""
    grad = np.empty_like(z)
    zp = z.copy()
    for i in range(z.size):
        zi = zp[i]
        zp[i] = zi + h
        fp = fun(zp)
        zp[i] = zi - h
        fm = fun(zp)
        zp[i] = zi
        grad[i] = (fp - fm) / (2.0 * h)
    return grad
