# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled rollout/adjoint and BFGS for the two-state rotation-drift family.

Mirrors ``_kernels_py`` and ``optim.bfgs``; results agree with them to rounding.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, isfinite

cnp.import_array()

cdef double ARMIJO_C1 = 1e-4
cdef int MAX_BACKTRACKS = 60
cdef double FLAT_RTOL = 1e-12


cdef inline void _drift_jac(double x1, double x2, double[:, ::1] left, double[:, ::1] right,
                            double* fx, double* A) noexcept nogil:
    cdef double a1 = 1.0 + x1 * x1
    cdef double a2 = x1 * x2
    cdef double b = sqrt(a1 * a1 + a2 * a2)
    cdef double c = a1 / b
    cdef double s = a2 / b
    cdef double z1 = right[0, 0] * x1 + right[0, 1] * x2
    cdef double z2 = right[1, 0] * x1 + right[1, 1] * x2
    cdef double y1 = c * z1 - s * z2
    cdef double y2 = s * z1 + c * z2
    fx[0] = left[0, 0] * y1 + left[0, 1] * y2
    fx[1] = left[1, 0] * y1 + left[1, 1] * y2
    cdef double da1[2]
    cdef double da2[2]
    cdef double dy[4]
    cdef double b2 = b * b
    cdef double db, dc, ds
    cdef int j
    da1[0] = 2.0 * x1
    da1[1] = 0.0
    da2[0] = x2
    da2[1] = x1
    for j in range(2):
        db = (a1 * da1[j] + a2 * da2[j]) / b
        dc = (da1[j] * b - a1 * db) / b2
        ds = (da2[j] * b - a2 * db) / b2
        dy[0 * 2 + j] = c * right[0, j] - s * right[1, j] + dc * z1 - ds * z2
        dy[1 * 2 + j] = s * right[0, j] + c * right[1, j] + ds * z1 + dc * z2
    # A = left @ dy (row-major 2x2)
    A[0] = left[0, 0] * dy[0] + left[0, 1] * dy[2]
    A[1] = left[0, 0] * dy[1] + left[0, 1] * dy[3]
    A[2] = left[1, 0] * dy[0] + left[1, 1] * dy[2]
    A[3] = left[1, 0] * dy[1] + left[1, 1] * dy[3]


cdef double _rollout(double[::1] x0, double[::1] z, int N, int m,
                     double[:, ::1] left, double[:, ::1] right, double[:, ::1] B,
                     double[:, ::1] Q, double[:, ::1] R, double[:, ::1] W,
                     double[:, ::1] X, double[:, ::1] jac, double[::1] grad) noexcept nogil:
    cdef int k, i, j
    cdef double J = 0.0
    cdef double fx[2]
    cdef double A[4]
    cdef double lam0, lam1, n0, n1, acc
    X[0, 0] = x0[0]
    X[0, 1] = x0[1]
    for k in range(N):
        J += Q[0, 0] * X[k, 0] * X[k, 0] + (Q[0, 1] + Q[1, 0]) * X[k, 0] * X[k, 1] + Q[1, 1] * X[k, 1] * X[k, 1]
        for i in range(m):
            for j in range(m):
                J += z[k * m + i] * R[i, j] * z[k * m + j]
        _drift_jac(X[k, 0], X[k, 1], left, right, fx, A)
        for i in range(4):
            jac[k, i] = A[i]
        n0 = fx[0]
        n1 = fx[1]
        for j in range(m):
            n0 += B[0, j] * z[k * m + j]
            n1 += B[1, j] * z[k * m + j]
        X[k + 1, 0] = n0
        X[k + 1, 1] = n1
    J += W[0, 0] * X[N, 0] * X[N, 0] + (W[0, 1] + W[1, 0]) * X[N, 0] * X[N, 1] + W[1, 1] * X[N, 1] * X[N, 1]
    lam0 = (W[0, 0] + W[0, 0]) * X[N, 0] + (W[0, 1] + W[1, 0]) * X[N, 1]
    lam1 = (W[1, 0] + W[0, 1]) * X[N, 0] + (W[1, 1] + W[1, 1]) * X[N, 1]
    for k in range(N - 1, -1, -1):
        for i in range(m):
            acc = 0.0
            for j in range(m):
                acc += (R[i, j] + R[j, i]) * z[k * m + j]
            grad[k * m + i] = acc + B[0, i] * lam0 + B[1, i] * lam1
        n0 = (Q[0, 0] + Q[0, 0]) * X[k, 0] + (Q[0, 1] + Q[1, 0]) * X[k, 1] + jac[k, 0] * lam0 + jac[k, 2] * lam1
        n1 = (Q[1, 0] + Q[0, 1]) * X[k, 0] + (Q[1, 1] + Q[1, 1]) * X[k, 1] + jac[k, 1] * lam0 + jac[k, 3] * lam1
        lam0 = n0
        lam1 = n1
    return J


def rotquad_rollout(x0, U, left, right, B, Q, R, W):
    """Return ``(cost, gradient wrt U, states)``."""
    cdef double[:, ::1] Uv = np.ascontiguousarray(U, dtype=np.float64)
    cdef int N = Uv.shape[0]
    cdef int m = Uv.shape[1]
    X = np.empty((N + 1, 2))
    jac = np.empty((N, 4))
    grad = np.empty(N * m)
    cdef double J = _rollout(np.ascontiguousarray(x0, dtype=np.float64),
                             np.ascontiguousarray(U, dtype=np.float64).ravel(), N, m,
                             np.ascontiguousarray(left, dtype=np.float64),
                             np.ascontiguousarray(right, dtype=np.float64),
                             np.ascontiguousarray(B, dtype=np.float64),
                             np.ascontiguousarray(Q, dtype=np.float64),
                             np.ascontiguousarray(R, dtype=np.float64),
                             np.ascontiguousarray(W, dtype=np.float64),
                             X, jac, grad)
    return J, grad.reshape(N, m), X


cdef inline double _absmax(double[::1] v, int d) noexcept nogil:
    cdef double r = 0.0
    cdef int i
    for i in range(d):
        if fabs(v[i]) > r:
            r = fabs(v[i])
    return r


cdef inline void _set_identity(double[:, ::1] H, int d, double scale) noexcept nogil:
    cdef int i, j
    for i in range(d):
        for j in range(d):
            H[i, j] = scale if i == j else 0.0


def rotquad_solve(x0, U0, left, right, B, Q, R, W, double tol_grad=1e-8, int max_iter=500, double bound=1e3):
    """BFGS over the flattened input sequence; returns ``(U, J, grad, iterations, status, box_hit)``."""
    U0 = np.ascontiguousarray(U0, dtype=np.float64)
    cdef int N = U0.shape[0]
    cdef int m = U0.shape[1]
    cdef int d = N * m
    cdef double[::1] xv = np.ascontiguousarray(x0, dtype=np.float64)
    cdef double[:, ::1] Lv = np.ascontiguousarray(left, dtype=np.float64)
    cdef double[:, ::1] Rv_ = np.ascontiguousarray(right, dtype=np.float64)
    cdef double[:, ::1] Bv = np.ascontiguousarray(B, dtype=np.float64)
    cdef double[:, ::1] Qv = np.ascontiguousarray(Q, dtype=np.float64)
    cdef double[:, ::1] Rm = np.ascontiguousarray(R, dtype=np.float64)
    cdef double[:, ::1] Wv = np.ascontiguousarray(W, dtype=np.float64)
    cdef double[:, ::1] X = np.empty((N + 1, 2))
    cdef double[:, ::1] jac = np.empty((N, 4))
    z_arr = U0.ravel().copy()
    cdef double[::1] z = z_arr
    g_arr = np.empty(d)
    cdef double[::1] g = g_arr
    cdef double[::1] zn = np.empty(d)
    cdef double[::1] gn = np.empty(d)
    cdef double[::1] p = np.empty(d)
    cdef double[::1] s = np.empty(d)
    cdef double[::1] y = np.empty(d)
    cdef double[::1] Hy = np.empty(d)
    cdef double[:, ::1] H = np.empty((d, d))
    cdef double f, fn, gp, gmax, t, sy, yy, yHy, rho, ns, ny, coef, znmax
    cdef int it = 0, status = 1, bt, i, j
    cdef bint fresh = True, box_hit = False, accepted

    f = _rollout(xv, z, N, m, Lv, Rv_, Bv, Qv, Rm, Wv, X, jac, g)
    if not isfinite(f):
        from mlvi_mpc.errors import DivergedRolloutError
        raise DivergedRolloutError("non-finite cost at the starting point")
    with nogil:
        _set_identity(H, d, 1.0)
        while it < max_iter:
            gmax = _absmax(g, d)
            if gmax < tol_grad:
                status = 0
                break
            gp = 0.0
            for i in range(d):
                p[i] = 0.0
                for j in range(d):
                    p[i] -= H[i, j] * g[j]
                gp += g[i] * p[i]
            if gp >= 0.0:
                _set_identity(H, d, 1.0)
                fresh = True
                gp = 0.0
                for i in range(d):
                    p[i] = -g[i]
                    gp -= g[i] * g[i]
            t = 1.0
            accepted = False
            for bt in range(MAX_BACKTRACKS):
                for i in range(d):
                    zn[i] = z[i] + t * p[i]
                znmax = _absmax(zn, d)
                if znmax > bound:
                    box_hit = True
                    t *= 0.5
                    continue
                fn = _rollout(xv, zn, N, m, Lv, Rv_, Bv, Qv, Rm, Wv, X, jac, gn)
                if isfinite(fn):
                    if fn <= f + ARMIJO_C1 * t * gp:
                        accepted = True
                        break
                    if fn <= f + FLAT_RTOL * (1.0 + fabs(f)) and _absmax(gn, d) < gmax:
                        accepted = True
                        break
                t *= 0.5
            it += 1
            if not accepted:
                if fresh:
                    status = 2
                    break
                _set_identity(H, d, 1.0)
                fresh = True
                continue
            sy = 0.0
            yy = 0.0
            ns = 0.0
            ny = 0.0
            for i in range(d):
                s[i] = zn[i] - z[i]
                y[i] = gn[i] - g[i]
                sy += s[i] * y[i]
                yy += y[i] * y[i]
                ns += s[i] * s[i]
            ny = sqrt(yy)
            ns = sqrt(ns)
            if sy > 1e-14 * ns * ny and sy > 0.0:
                if fresh:
                    _set_identity(H, d, sy / yy)
                    fresh = False
                rho = 1.0 / sy
                yHy = 0.0
                for i in range(d):
                    Hy[i] = 0.0
                    for j in range(d):
                        Hy[i] += H[i, j] * y[j]
                    yHy += y[i] * Hy[i]
                coef = rho * rho * yHy + rho
                for i in range(d):
                    for j in range(d):
                        H[i, j] = H[i, j] - rho * (s[i] * Hy[j] + Hy[i] * s[j]) + coef * s[i] * s[j]
            for i in range(d):
                z[i] = zn[i]
                g[i] = gn[i]
            f = fn
    return z_arr.reshape(N, m), f, g_arr.reshape(N, m), it, status, bool(box_hit)


def gd_fit(w0, phi, double target, double step, double stop_tol, int max_iters, double max_norm=1e6):
    """Gradient descent ``w <- w - step (<w, phi> - target) phi``; returns ``(w, iterations, diverged)``."""
    w_arr = np.array(w0, dtype=np.float64)
    cdef double[::1] w = w_arr
    cdef double[::1] ph = np.ascontiguousarray(phi, dtype=np.float64)
    cdef int d = w.shape[0]
    cdef int it = 0, i
    cdef double r, moved, nrm, delta
    cdef bint diverged = False
    with nogil:
        while it < max_iters:
            it += 1
            r = -target
            for i in range(d):
                r += w[i] * ph[i]
            moved = 0.0
            nrm = 0.0
            for i in range(d):
                delta = step * r * ph[i]
                w[i] -= delta
                moved += delta * delta
                nrm += w[i] * w[i]
            if not isfinite(nrm) or sqrt(nrm) > max_norm:
                diverged = True
                break
            if sqrt(moved) <= stop_tol:
                break
    return w_arr, it, bool(diverged)
