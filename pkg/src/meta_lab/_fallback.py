"""Pure numpy implementation of the averaged right-hand side.

Selected at import when the compiled ``_kernels`` extension is missing (or
when ``META_LAB_PURE=1``).  Must agree with the compiled kernel to rounding.

Field convention shared with the compiled kernel:

* ``x_k``  student local fields, covariance ``Q``
* ``t_m``  task-teacher fields (the ones producing labels), covariance ``Tt``,
  student cross covariance ``Rt``
* ``p_n``  projection-teacher fields (the meta-teacher rows the R overlaps are
  measured against), student cross covariance ``Rp``, cross covariance with
  the task teacher ``Tpt[n, m]`` and variances ``tp[n]``

With an unperturbed teacher ``t`` and ``p`` coincide.
"""

from __future__ import annotations

import math

import numpy as np

TWO_OVER_PI = 2.0 / math.pi
FOUR_OVER_PI2 = 4.0 / math.pi**2
ARCSIN_TOL = 1e-10


class KernelDomainError(ValueError):
    """An integral received a covariance outside its domain (non-PSD state)."""


def _asin_checked(arg: np.ndarray, what: str) -> np.ndarray:
    bad = np.abs(arg) > 1.0 + ARCSIN_TOL
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise KernelDomainError(f"{what}: arcsin argument {arg[idx]!r} outside [-1, 1] at index {idx}")
    return np.arcsin(np.clip(arg, -1.0, 1.0))


def _i3(c11, c12, c13, c23, c33):
    lam3 = (1.0 + c11) * (1.0 + c33) - c13 * c13
    return TWO_OVER_PI * (c23 * (1.0 + c11) - c12 * c13) / ((1.0 + c11) * np.sqrt(lam3))


def _i4(c11, c12, c13, c14, c22, c23, c24, c33, c34, c44):
    lam4 = (1.0 + c11) * (1.0 + c22) - c12 * c12
    lam0 = (lam4 * c34 - c23 * c24 * (1.0 + c11) - c13 * c14 * (1.0 + c22)
            + c12 * c13 * c24 + c12 * c14 * c23)
    lam1 = (lam4 * (1.0 + c33) - c23 * c23 * (1.0 + c11) - c13 * c13 * (1.0 + c22)
            + 2.0 * c12 * c13 * c23)
    lam2 = (lam4 * (1.0 + c44) - c24 * c24 * (1.0 + c11) - c14 * c14 * (1.0 + c22)
            + 2.0 * c12 * c14 * c24)
    denom = lam1 * lam2
    zero = lam0 == 0.0
    if np.any(~zero & ~(denom > 0.0)):
        raise KernelDomainError("I4: Lambda1 * Lambda2 <= 0 for a nonzero Lambda0")
    arg = np.where(zero, 0.0, lam0 / np.sqrt(np.where(denom > 0.0, denom, 1.0)))
    return FOUR_OVER_PI2 / np.sqrt(lam4) * _asin_checked(arg, "I4")


def tables(Q, Rt, Tt, Rp, Tpt, tp, linear=False):
    """Integral tables ``(F, A3, B3, C3, D3, E4, H4, S4)``.

    F[k,m]      <g(x_k) g(t_m)>
    A3[k,n,m]   <g'(x_k) p_n g(t_m)>
    B3[k,n,i]   <g'(x_k) p_n g(x_i)>
    C3[k,l,n]   <g'(x_k) x_l g(t_n)>
    D3[k,l,i]   <g'(x_k) x_l g(x_i)>
    E4[k,l,n,m] <g'(x_k) g'(x_l) g(t_n) g(t_m)>
    H4[k,l,n,i] <g'(x_k) g'(x_l) g(t_n) g(x_i)>
    S4[k,l,i,j] <g'(x_k) g'(x_l) g(x_i) g(x_j)>
    """
    K, M = Rt.shape
    # "g" fields u = (t_1..t_M, x_1..x_K); "linear" fields v = (p_1..p_M, x_1..x_K)
    Ux = np.concatenate([Rt, Q], axis=1)                     # cov(x_k, u_a)
    UU = np.block([[Tt, Rt.T], [Rt, Q]])                     # cov(u_a, u_b)
    Vx = np.concatenate([Rp, Q], axis=1)                     # cov(x_k, v_b)
    VU = np.block([[Tpt, Rp.T], [Rt, Q]])                    # cov(v_b, u_a)
    if linear:
        F = Rt.copy()
        I3 = np.broadcast_to(VU[None, :, :], (K,) + VU.shape)
        I4 = np.broadcast_to(UU[None, None, :, :], (K, K) + UU.shape)
    else:
        qd = np.diag(Q)
        ud = np.diag(UU)
        F = TWO_OVER_PI * _asin_checked(Rt / np.sqrt(np.outer(1.0 + qd, 1.0 + np.diag(Tt))), "f")
        I3 = _i3(qd[:, None, None], Vx[:, :, None], Ux[:, None, :], VU[None, :, :], ud[None, None, :])
        I4 = _i4(qd[:, None, None, None], Q[:, :, None, None],
                 Ux[:, None, :, None], Ux[:, None, None, :],
                 qd[None, :, None, None], Ux[None, :, :, None], Ux[None, :, None, :],
                 ud[None, None, :, None], UU[None, None, :, :], ud[None, None, None, :])
    A3, B3 = I3[:, :M, :M], I3[:, :M, M:]
    C3, D3 = I3[:, M:, :M], I3[:, M:, M:]
    E4, H4, S4 = I4[:, :, :M, :M], I4[:, :, :M, M:], I4[:, :, M:, M:]
    return F, A3, B3, C3, D3, E4, H4, S4


def assemble(tabs, eta_J, eta_w, inv_V):
    """Combine integral tables into ``(dR, dQ)`` for the averaged FO-ANIL dynamics."""
    F, A3, B3, C3, D3, E4, H4, S4 = tabs
    K, M = F.shape
    G = F @ F.T
    c1 = eta_J * eta_w / (K * M)
    c2 = eta_J * eta_w**2 / (K * K * M)
    dR = c1 * np.einsum("km,knm->kn", F, A3) - c2 * np.einsum("ik,kni->kn", G, B3)
    P = c1 * np.einsum("kn,kln->kl", F, C3) - c2 * np.einsum("ik,kli->kl", G, D3)
    dQ = P + P.T
    if inv_V:
        w1 = (G * np.einsum("klnn->kl", E4)
              + 2.0 * np.einsum("kn,lm,klnm->kl", F, F, E4))
        w2 = (np.einsum("klni,in->kl", H4, F) * G
              + np.einsum("klni,kn,il->kl", H4, F, G)
              + np.einsum("klni,ln,ik->kl", H4, F, G))
        w3 = (np.einsum("klij,ij->kl", S4, G) * G
              + 2.0 * np.einsum("klij,ik,jl->kl", S4, G, G))
        pref = eta_J**2 * inv_V / (M * M)
        dQ = dQ + pref * (eta_w**2 / K**2 * w1 - 2.0 * eta_w**3 / K**3 * w2 + eta_w**4 / K**4 * w3)
    dQ = 0.5 * (dQ + dQ.T)
    return dR, dQ


def rhs_core(Q, Rt, Tt, Rp, Tpt, tp, eta_J, eta_w, inv_V, linear=False):
    """``(dR, dQ, F)`` for one state; ``tp`` is unused here but kept for kernel parity."""
    tabs = tables(Q, Rt, Tt, Rp, Tpt, tp, linear)
    dR, dQ = assemble(tabs, eta_J, eta_w, inv_V)
    return dR, dQ, tabs[0]


class Rhs:
    """Averaged ``(dR, dQ)`` for a fixed teacher overlap ``T`` and model variant.

    Parameters
    ----------
    K : int
        Number of student hidden units.
    T : ndarray, shape (M, M)
        Meta-teacher overlaps.
    eta_J, eta_w : float
        Outer and inner learning rates.
    inv_V : float
        ``1 / V``; multiplies the second-order terms of dQ.
    lam, sigma : float
        L2 coefficient and label-noise variance.
    gamma : float
        Teacher similarity.  Task-teacher fields are ``gamma y + sqrt(1-gamma^2) z``.
    first_order : bool
        Use the first-order expansion in ``sqrt(1-gamma^2)`` instead of the exact
        Gaussian reduction.
    linear : bool
        Identity activation.
    """

    def __init__(self, K, T, eta_J, eta_w, inv_V, lam=0.0, sigma=0.0, gamma=1.0,
                 first_order=False, linear=False):
        T = np.ascontiguousarray(T, dtype=float)
        self.K, self.M = int(K), T.shape[0]
        self.eta_J, self.eta_w, self.inv_V = float(eta_J), float(eta_w), float(inv_V)
        self.lam, self.sigma, self.gamma = float(lam), float(sigma), float(gamma)
        self.first_order, self.linear = bool(first_order), bool(linear)
        g2 = self.gamma**2
        self.Tt = g2 * T if first_order else g2 * T + (1.0 - g2) * np.eye(self.M)
        self.Tpt = self.gamma * T

    def _tables(self, Q, R):
        Rt = self.gamma * R
        return tables(Q, Rt, self.Tt, R, self.Tpt, None, self.linear)

    def f_table(self, Q, R):
        return self._tables(Q, R)[0]

    def __call__(self, Q, R):
        Q = np.asarray(Q, dtype=float)
        R = np.asarray(R, dtype=float)
        tabs = self._tables(Q, R)
        dR, dQ = assemble(tabs, self.eta_J, self.eta_w, self.inv_V)
        K, M = self.K, self.M
        eJ, ew = self.eta_J, self.eta_w
        dR = dR - self.lam * eJ * R
        dQ = dQ - 2.0 * self.lam * eJ * Q
        F = tabs[0]
        G = F @ F.T
        if self.sigma:
            qd = np.diag(Q)
            det = np.outer(1.0 + qd, 1.0 + qd) - Q * Q
            dQ = dQ + eJ**2 * self.inv_V * self.sigma * ew**2 / (K * K * M) * G * TWO_OVER_PI / np.sqrt(det)
        if self.first_order and self.gamma != 1.0:
            qd = np.diag(Q)
            Rt = self.gamma * R
            acc = np.zeros((K, K))
            for m in range(M):
                # det(I + C) over (x_k, x_l, g y_m, g y_m); the duplicated field is rotated out
                A = np.empty((K, K, 3, 3))
                A[..., 0, 0] = (1.0 + qd)[:, None]
                A[..., 1, 1] = (1.0 + qd)[None, :]
                A[..., 0, 1] = A[..., 1, 0] = Q
                A[..., 0, 2] = A[..., 2, 0] = Rt[:, m][:, None]
                A[..., 1, 2] = A[..., 2, 1] = Rt[:, m][None, :]
                A[..., 2, 2] = 0.5 + self.Tt[m, m]
                det = 2.0 * np.linalg.det(A)
                acc += (G + 2.0 * np.outer(F[:, m], F[:, m])) / np.sqrt(det)
            dQ = dQ + (eJ**2 * self.inv_V * (1.0 - self.gamma**2) * ew**2 / (K * K * M * M)
                       * FOUR_OVER_PI2 * acc)
        return dR, 0.5 * (dQ + dQ.T)

    def rk4(self, Q, R, h, n_steps):
        """Advance ``(Q, R)`` in place by ``n_steps`` RK4 steps; see the compiled twin."""
        for step in range(n_steps):
            try:
                k1R, k1Q = self(Q, R)
                k2R, k2Q = self(Q + 0.5 * h * k1Q, R + 0.5 * h * k1R)
                k3R, k3Q = self(Q + 0.5 * h * k2Q, R + 0.5 * h * k2R)
                k4R, k4Q = self(Q + h * k3Q, R + h * k3R)
            except KernelDomainError as exc:
                return step, str(exc)
            newQ = Q + h / 6.0 * (k1Q + 2.0 * k2Q + 2.0 * k3Q + k4Q)
            newR = R + h / 6.0 * (k1R + 2.0 * k2R + 2.0 * k3R + k4R)
            if not (np.all(np.isfinite(newQ)) and np.all(np.isfinite(newR))):
                return step, "non-finite state"
            Q[...] = 0.5 * (newQ + newQ.T)
            R[...] = newR
        return n_steps, None
