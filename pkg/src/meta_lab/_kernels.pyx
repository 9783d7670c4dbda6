# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled right-hand side of the averaged dynamics.

Same contract as :mod:`meta_lab._fallback`.  :class:`Rhs` keeps its
integral tables in preallocated buffers and can run whole blocks of RK4
steps without returning to Python, which is where integration time goes.
I4 tables are filled once per symmetry class, using
I4[k,l,a,b] = I4[l,k,a,b] = I4[k,l,b,a].
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, asin, fabs, M_PI, isfinite

from ._fallback import KernelDomainError

cnp.import_array()

cdef double TWO_OVER_PI = 2.0 / M_PI
cdef double FOUR_OVER_PI2 = 4.0 / (M_PI * M_PI)
cdef double ARCSIN_TOL = 1e-10

cdef enum:
    OK = 0
    ERR_F = 1
    ERR_I4_ASIN = 2
    ERR_I4_LAMBDA = 3
    ERR_NONFINITE = 4

_MESSAGES = {
    ERR_F: "f: arcsin argument outside [-1, 1]",
    ERR_I4_ASIN: "I4: arcsin argument outside [-1, 1]",
    ERR_I4_LAMBDA: "I4: Lambda1 * Lambda2 <= 0 for a nonzero Lambda0",
    ERR_NONFINITE: "non-finite state",
}


cdef inline int clamp_asin(double arg, double* out) noexcept nogil:
    if not fabs(arg) <= 1.0 + ARCSIN_TOL:
        return -1
    if arg > 1.0:
        arg = 1.0
    elif arg < -1.0:
        arg = -1.0
    out[0] = asin(arg)
    return 0


cdef inline double i3c(double c11, double c12, double c13, double c23, double c33) noexcept nogil:
    cdef double a = 1.0 + c11
    cdef double lam3 = a * (1.0 + c33) - c13 * c13
    return TWO_OVER_PI * (c23 * a - c12 * c13) / (a * sqrt(lam3))


cdef inline int i4c(double c11, double c12, double c13, double c14, double c22,
                    double c23, double c24, double c33, double c34, double c44,
                    double* out) noexcept nogil:
    cdef double a = 1.0 + c11
    cdef double b = 1.0 + c22
    cdef double lam4 = a * b - c12 * c12
    cdef double lam0 = (lam4 * c34 - c23 * c24 * a - c13 * c14 * b
                        + c12 * c13 * c24 + c12 * c14 * c23)
    cdef double lam1, lam2, s
    if lam0 == 0.0:
        out[0] = 0.0
        return OK
    lam1 = lam4 * (1.0 + c33) - c23 * c23 * a - c13 * c13 * b + 2.0 * c12 * c13 * c23
    lam2 = lam4 * (1.0 + c44) - c24 * c24 * a - c14 * c14 * b + 2.0 * c12 * c14 * c24
    if not (lam1 * lam2 > 0.0):
        return ERR_I4_LAMBDA
    if clamp_asin(lam0 / sqrt(lam1 * lam2), &s) != 0:
        return ERR_I4_ASIN
    out[0] = FOUR_OVER_PI2 / sqrt(lam4) * s
    return OK


cdef inline double det3(double a11, double a12, double a13,
                        double a22, double a23, double a33) noexcept nogil:
    return (a11 * (a22 * a33 - a23 * a23) - a12 * (a12 * a33 - a23 * a13)
            + a13 * (a12 * a23 - a22 * a13))


cdef class Rhs:
    """Averaged ``(dR, dQ)`` for a fixed teacher overlap ``T`` and variant.

    Parameters mirror :class:`meta_lab._fallback.Rhs`.
    """

    cdef readonly Py_ssize_t K, M
    cdef double eta_J, eta_w, inv_V, lam, sigma, gamma
    cdef bint linear, first_order
    cdef double[:, ::1] Tt, Tpt, T
    cdef double[:, ::1] UU, Ux, Vx, VU, F, G, P, Rt
    cdef double[:, :, ::1] I3
    cdef double[:, :, :, ::1] I4
    cdef double[:, ::1] kQ, kR, tQ, tR, aQ, aR

    def __init__(self, K, T, double eta_J, double eta_w, double inv_V, double lam=0.0,
                 double sigma=0.0, double gamma=1.0, bint first_order=False, bint linear=False):
        T = np.array(T, dtype=float, order="C")
        self.K = K
        self.M = T.shape[0]
        self.eta_J, self.eta_w, self.inv_V = eta_J, eta_w, inv_V
        self.lam, self.sigma, self.gamma = lam, sigma, gamma
        self.linear, self.first_order = linear, first_order
        g2 = gamma * gamma
        self.T = T
        if first_order:
            self.Tt = g2 * T
        else:
            self.Tt = g2 * T + (1.0 - g2) * np.eye(self.M)
        self.Tpt = gamma * T
        L = self.K + self.M
        self.UU = np.empty((L, L))
        self.VU = np.empty((L, L))
        self.Ux = np.empty((self.K, L))
        self.Vx = np.empty((self.K, L))
        self.F = np.empty((self.K, self.M))
        self.Rt = np.empty((self.K, self.M))
        self.G = np.empty((self.K, self.K))
        self.P = np.empty((self.K, self.K))
        self.I3 = np.empty((self.K, L, L))
        self.I4 = np.empty((self.K, self.K, L, L))
        self.kQ = np.empty((4 * self.K, self.K))
        self.kR = np.empty((4 * self.K, self.M))
        self.tQ = np.empty((self.K, self.K))
        self.tR = np.empty((self.K, self.M))
        self.aQ = np.empty((self.K, self.K))
        self.aR = np.empty((self.K, self.M))

    cdef int tables(self, double[:, ::1] Q, double[:, ::1] R) noexcept nogil:
        cdef Py_ssize_t K = self.K, M = self.M, L = K + M
        cdef Py_ssize_t k, l, m, a, b
        cdef double s
        cdef int err
        for k in range(K):
            for m in range(M):
                self.Rt[k, m] = self.gamma * R[k, m]
        # u = (t_1..t_M, x_1..x_K) feed g; v = (p_1..p_M, x_1..x_K) enter linearly
        for a in range(M):
            for b in range(M):
                self.UU[a, b] = self.Tt[a, b]
                self.VU[a, b] = self.Tpt[a, b]
            for k in range(K):
                self.UU[a, M + k] = self.Rt[k, a]
                self.UU[M + k, a] = self.Rt[k, a]
                self.VU[a, M + k] = R[k, a]
                self.VU[M + k, a] = self.Rt[k, a]
        for k in range(K):
            for l in range(K):
                self.UU[M + k, M + l] = Q[k, l]
                self.VU[M + k, M + l] = Q[k, l]
                self.Ux[k, M + l] = Q[k, l]
                self.Vx[k, M + l] = Q[k, l]
            for a in range(M):
                self.Ux[k, a] = self.Rt[k, a]
                self.Vx[k, a] = R[k, a]
        if self.linear:
            for k in range(K):
                for m in range(M):
                    self.F[k, m] = self.Rt[k, m]
                for b in range(L):
                    for a in range(L):
                        self.I3[k, b, a] = self.VU[b, a]
                for l in range(K):
                    for a in range(L):
                        for b in range(L):
                            self.I4[k, l, a, b] = self.UU[a, b]
            return OK
        for k in range(K):
            for m in range(M):
                if clamp_asin(self.Rt[k, m] / sqrt((1.0 + Q[k, k]) * (1.0 + self.Tt[m, m])), &s) != 0:
                    return ERR_F
                self.F[k, m] = TWO_OVER_PI * s
        for k in range(K):
            for b in range(L):
                for a in range(L):
                    self.I3[k, b, a] = i3c(Q[k, k], self.Vx[k, b], self.Ux[k, a],
                                           self.VU[b, a], self.UU[a, a])
        for k in range(K):
            for l in range(k, K):
                for a in range(L):
                    for b in range(a, L):
                        err = i4c(Q[k, k], Q[k, l], self.Ux[k, a], self.Ux[k, b], Q[l, l],
                                  self.Ux[l, a], self.Ux[l, b], self.UU[a, a], self.UU[a, b],
                                  self.UU[b, b], &s)
                        if err != OK:
                            return err
                        self.I4[k, l, a, b] = s
                        self.I4[k, l, b, a] = s
                        self.I4[l, k, a, b] = s
                        self.I4[l, k, b, a] = s
        return OK

    cdef int evaluate(self, double[:, ::1] Q, double[:, ::1] R,
                      double[:, ::1] dQ, double[:, ::1] dR) noexcept nogil:
        cdef Py_ssize_t K = self.K, M = self.M
        cdef Py_ssize_t k, l, n, m, i, j
        cdef double acc, pref, c1, c2, w1, w2, w3, s, ew = self.eta_w, eJ = self.eta_J
        cdef double detkl, gk, gl
        cdef int err = self.tables(Q, R)
        if err != OK:
            return err
        for k in range(K):
            for l in range(K):
                acc = 0.0
                for m in range(M):
                    acc = acc + self.F[k, m] * self.F[l, m]
                self.G[k, l] = acc
        c1 = eJ * ew / (K * M)
        c2 = eJ * ew * ew / (K * K * M)
        for k in range(K):
            for n in range(M):
                acc = 0.0
                for m in range(M):
                    acc = acc + c1 * self.F[k, m] * self.I3[k, n, m]
                for i in range(K):
                    acc = acc - c2 * self.G[i, k] * self.I3[k, n, M + i]
                dR[k, n] = acc - self.lam * eJ * R[k, n]
            for l in range(K):
                acc = 0.0
                for n in range(M):
                    acc = acc + c1 * self.F[k, n] * self.I3[k, M + l, n]
                for i in range(K):
                    acc = acc - c2 * self.G[i, k] * self.I3[k, M + l, M + i]
                self.P[k, l] = acc
        pref = eJ * eJ * self.inv_V / (M * M)
        for k in range(K):
            for l in range(k, K):
                w1 = 0.0
                w2 = 0.0
                w3 = 0.0
                for n in range(M):
                    w1 = w1 + self.G[k, l] * self.I4[k, l, n, n]
                    for m in range(M):
                        w1 = w1 + 2.0 * self.F[k, n] * self.F[l, m] * self.I4[k, l, n, m]
                    for i in range(K):
                        w2 = w2 + self.I4[k, l, n, M + i] * (
                            self.F[i, n] * self.G[k, l] + self.F[k, n] * self.G[i, l]
                            + self.F[l, n] * self.G[i, k])
                for i in range(K):
                    for j in range(K):
                        w3 = w3 + self.I4[k, l, M + i, M + j] * (
                            self.G[i, j] * self.G[k, l] + 2.0 * self.G[i, k] * self.G[j, l])
                s = self.P[k, l] + self.P[l, k] + pref * (
                    ew * ew / (K * K) * w1
                    - 2.0 * ew * ew * ew / (K * K * K) * w2
                    + ew * ew * ew * ew / (K * K * K * K) * w3)
                s = s - 2.0 * self.lam * eJ * Q[k, l]
                if self.sigma != 0.0:
                    detkl = (1.0 + Q[k, k]) * (1.0 + Q[l, l]) - Q[k, l] * Q[k, l]
                    s = s + (eJ * eJ * self.inv_V * self.sigma * ew * ew / (K * K * M)
                             * self.G[k, l] * TWO_OVER_PI / sqrt(detkl))
                if self.first_order and self.gamma != 1.0:
                    acc = 0.0
                    for m in range(M):
                        gk = self.Rt[k, m]
                        gl = self.Rt[l, m]
                        # det(I + C) for fields (x_k, x_l, g y_m, g y_m) via the Schur
                        # complement of the duplicated teacher field
                        detkl = det3(1.0 + Q[k, k], Q[k, l], gk, 1.0 + Q[l, l], gl,
                                     0.5 + self.Tt[m, m]) * 2.0
                        acc = acc + (self.G[k, l] + 2.0 * self.F[k, m] * self.F[l, m]) / sqrt(detkl)
                    s = s + (eJ * eJ * self.inv_V * (1.0 - self.gamma * self.gamma) * ew * ew
                             / (K * K * M * M) * FOUR_OVER_PI2 * acc)
                dQ[k, l] = s
                dQ[l, k] = s
        return OK

    def __call__(self, Q, R):
        """``(dR, dQ)`` at the state ``(Q, R)``."""
        cdef double[:, ::1] q = np.array(Q, dtype=float, order="C")
        cdef double[:, ::1] r = np.array(R, dtype=float, order="C")
        dQ = np.empty((self.K, self.K))
        dR = np.empty((self.K, self.M))
        cdef double[:, ::1] dq = dQ
        cdef double[:, ::1] dr = dR
        cdef int err
        with nogil:
            err = self.evaluate(q, r, dq, dr)
        if err != OK:
            raise KernelDomainError(_MESSAGES[err])
        return dR, dQ

    def f_table(self, Q, R):
        """``<g(x_k) g(t_m)>`` against the task teacher (``R_km`` for the linear model)."""
        cdef double[:, ::1] q = np.array(Q, dtype=float, order="C")
        cdef double[:, ::1] r = np.array(R, dtype=float, order="C")
        cdef int err
        with nogil:
            err = self.tables(q, r)
        if err != OK:
            raise KernelDomainError(_MESSAGES[err])
        return np.array(self.F)

    def rk4(self, double[:, ::1] Q, double[:, ::1] R, double h, Py_ssize_t n_steps):
        """Advance ``(Q, R)`` in place by ``n_steps`` classical RK4 steps of size ``h``.

        Q is symmetrised after every step.  Returns ``(steps_done, message)``;
        on failure the arrays hold the last good state and ``message`` says why.
        """
        cdef Py_ssize_t K = self.K, M = self.M
        cdef Py_ssize_t step, st, k, l, n
        cdef double[:, ::1] kQ = self.kQ, kR = self.kR, tQ = self.tQ, tR = self.tR
        cdef double c, v
        cdef int err = OK
        cdef double wts[4]
        cdef double offs[4]
        wts[0] = 1.0; wts[1] = 2.0; wts[2] = 2.0; wts[3] = 1.0
        offs[0] = 0.0; offs[1] = 0.5; offs[2] = 0.5; offs[3] = 1.0
        with nogil:
            for step in range(n_steps):
                for st in range(4):
                    if st == 0:
                        err = self.evaluate(Q, R, kQ[0:K], kR[0:K])
                    else:
                        c = offs[st] * h
                        for k in range(K):
                            for l in range(K):
                                tQ[k, l] = Q[k, l] + c * kQ[(st - 1) * K + k, l]
                            for n in range(M):
                                tR[k, n] = R[k, n] + c * kR[(st - 1) * K + k, n]
                        err = self.evaluate(tQ, tR, kQ[st * K:(st + 1) * K], kR[st * K:(st + 1) * K])
                    if err != OK:
                        break
                if err != OK:
                    break
                for k in range(K):
                    for l in range(K):
                        v = 0.0
                        for st in range(4):
                            v = v + wts[st] * kQ[st * K + k, l]
                        tQ[k, l] = Q[k, l] + h / 6.0 * v
                        if not isfinite(tQ[k, l]):
                            err = ERR_NONFINITE
                    for n in range(M):
                        v = 0.0
                        for st in range(4):
                            v = v + wts[st] * kR[st * K + k, n]
                        tR[k, n] = R[k, n] + h / 6.0 * v
                        if not isfinite(tR[k, n]):
                            err = ERR_NONFINITE
                if err != OK:
                    break
                for k in range(K):
                    for l in range(K):
                        Q[k, l] = 0.5 * (tQ[k, l] + tQ[l, k])
                    for n in range(M):
                        R[k, n] = tR[k, n]
        if err != OK:
            return step, _MESSAGES[err]
        return n_steps, None


def rhs_core(double[:, ::1] Q, double[:, ::1] Rt, double[:, ::1] Tt,
             double[:, ::1] Rp, double[:, ::1] Tpt, double[::1] tp,
             double eta_J, double eta_w, double inv_V, bint linear=False):
    """Generic ``(dR, dQ, F)`` for arbitrary task-teacher and projection overlaps.

    Kept for parity tests against the numpy tables; :class:`Rhs` is the fast path.
    """
    cdef Py_ssize_t K = Rt.shape[0], M = Rt.shape[1]
    cdef Rhs rhs = Rhs(K, np.asarray(Tt), eta_J, eta_w, inv_V, linear=linear)
    rhs.Tpt = np.array(Tpt)
    rhs.Tt = np.array(Tt)
    dQ = np.empty((K, K))
    dR = np.empty((K, M))
    cdef double[:, ::1] dq = dQ
    cdef double[:, ::1] dr = dR
    cdef int err
    # Rt is passed as gamma=1 task overlaps; Rp enters only through the v fields
    if not np.array_equal(np.asarray(Rt), np.asarray(Rp)):
        raise ValueError("compiled rhs_core requires Rt == Rp; use Rhs with gamma for perturbed teachers")
    with nogil:
        err = rhs.evaluate(Q, Rt, dq, dr)
    if err != OK:
        raise KernelDomainError(_MESSAGES[err])
    return dR, dQ, np.array(rhs.F)
