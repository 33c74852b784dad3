"""Pure-Python versions of the hot kernels (used when the Cython build is unavailable).

Both kernels specialise to two states, ``x+ = left Rot(x) right x + B u``,
stage cost ``x'Qx + u'Ru`` and a quadratic terminal cost ``x'Wx``.
"""

from __future__ import annotations

import math

import numpy as np

from mlvi_mpc.optim import bfgs


def _drift_and_jacobian(x, left, right):
    x1, x2 = x[0], x[1]
    a1 = 1.0 + x1 * x1
    a2 = x1 * x2
    b = math.hypot(a1, a2)
    c = a1 / b
    s = a2 / b
    z1 = right[0, 0] * x1 + right[0, 1] * x2
    z2 = right[1, 0] * x1 + right[1, 1] * x2
    y1 = c * z1 - s * z2
    y2 = s * z1 + c * z2
    fx = np.array([left[0, 0] * y1 + left[0, 1] * y2, left[1, 0] * y1 + left[1, 1] * y2])

    da1 = (2.0 * x1, 0.0)
    da2 = (x2, x1)
    b2 = b * b
    dy = np.empty((2, 2))
    for j in range(2):
        db = (a1 * da1[j] + a2 * da2[j]) / b
        dc = (da1[j] * b - a1 * db) / b2
        ds = (da2[j] * b - a2 * db) / b2
        dy[0, j] = c * right[0, j] - s * right[1, j] + dc * z1 - ds * z2
        dy[1, j] = s * right[0, j] + c * right[1, j] + ds * z1 + dc * z2
    return fx, left @ dy


def rotquad_rollout(x0, U, left, right, B, Q, R, W):
    """Return ``(cost, gradient wrt U, states)`` via a forward pass and an adjoint sweep."""
    U = np.asarray(U, dtype=float)
    N, m = U.shape
    X = np.empty((N + 1, 2))
    X[0] = x0
    jacs = []
    J = 0.0
    for k in range(N):
        x = X[k]
        u = U[k]
        J += float(x @ Q @ x + u @ R @ u)
        fx, A = _drift_and_jacobian(x, left, right)
        jacs.append(A)
        X[k + 1] = fx + B @ u
    xN = X[N]
    J += float(xN @ W @ xN)
    lam = (W + W.T) @ xN
    G = np.empty((N, m))
    for k in range(N - 1, -1, -1):
        G[k] = (R + R.T) @ U[k] + B.T @ lam
        lam = (Q + Q.T) @ X[k] + jacs[k].T @ lam
    return J, G, X


def rotquad_solve(x0, U0, left, right, B, Q, R, W, tol_grad=1e-8, max_iter=500, bound=1e3):
    """BFGS over the flattened input sequence; returns ``(U, J, grad, iterations, status, box_hit)``."""
    U0 = np.asarray(U0, dtype=float)
    N, m = U0.shape

    def fg(z):
        J, G, _ = rotquad_rollout(x0, z.reshape(N, m), left, right, B, Q, R, W)
        return J, G.ravel()

    res = bfgs(fg, U0.ravel(), tol_grad=tol_grad, max_iter=max_iter, bound=bound)
    return res.z.reshape(N, m), res.f, res.grad.reshape(N, m), res.iterations, res.status, res.box_hit


def gd_fit(w0, phi, target, step, stop_tol, max_iters, max_norm=1e6):
    """Gradient descent ``w <- w - step (<w, phi> - target) phi``; returns ``(w, iterations, diverged)``."""
    w = np.array(w0, dtype=float)
    phi = np.asarray(phi, dtype=float)
    for it in range(1, max_iters + 1):
        w_next = w - step * (float(w @ phi) - target) * phi
        if not np.all(np.isfinite(w_next)) or np.linalg.norm(w_next) > max_norm:
            return w_next, it, True
        moved = np.linalg.norm(w_next - w)
        w = w_next
        if moved <= stop_tol:
            return w, it, False
    return w, max_iters, False
