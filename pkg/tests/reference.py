"""Literal-sum reference for the base RHS, built from the scalar closed forms.

Every term is written out index by index, with no factorization, so it
checks the backends' table algebra independently.
"""

import numpy as np

from meta_lab.integrals import i2, i3, i4


def reference_rhs(Q, R, T, eta_J, eta_w, V):
    K, M = R.shape
    C = np.block([[Q, R], [R.T, T]])

    def cov(idx):
        return C[np.ix_(idx, idx)]

    def y(n):
        return K + n

    f = np.array([[i2(cov([k, y(m)])) for m in range(M)] for k in range(K)])
    G = f @ f.T
    c1 = eta_J * eta_w / (K * M)
    c2 = eta_J * eta_w**2 / (K * K * M)
    dR = np.zeros((K, M))
    dQ = np.zeros((K, K))
    for k in range(K):
        for n in range(M):
            s = 0.0
            for m in range(M):
                s += c1 * f[k, m] * i3(cov([k, y(n), y(m)]))
            for i in range(K):
                for m in range(M):
                    s -= c2 * f[i, m] * f[k, m] * i3(cov([k, y(n), i]))
            dR[k, n] = s
    for k in range(K):
        for l in range(K):
            s = 0.0
            for m in range(M):
                s += c1 * (f[k, m] * i3(cov([k, l, y(m)])) + f[l, m] * i3(cov([l, k, y(m)])))
            for i in range(K):
                for m in range(M):
                    s -= c2 * f[i, m] * (f[k, m] * i3(cov([k, l, i])) + f[l, m] * i3(cov([l, k, i])))
            t = 0.0
            for n in range(M):
                for m in range(M):
                    E = i4(cov([k, l, y(n), y(m)]))
                    t += eta_w**2 / (K * K * M * M) * E * (
                        (G[k, l] if n == m else 0.0) + f[k, n] * f[l, m] + f[k, m] * f[l, n])
            for n in range(M):
                for i in range(K):
                    H = i4(cov([k, l, y(n), i]))
                    t -= 2 * eta_w**3 / (K**3 * M * M) * H * (
                        f[i, n] * G[k, l] + f[k, n] * G[i, l] + f[l, n] * G[i, k])
            for i in range(K):
                for j in range(K):
                    S = i4(cov([k, l, i, j]))
                    t += eta_w**4 / (K**4 * M * M) * S * (
                        G[i, j] * G[k, l] + G[i, k] * G[j, l] + G[i, l] * G[j, k])
            dQ[k, l] = s + eta_J**2 / V * t
    return dR, dQ


def random_state(rng, K, M, scale=1.0):
    """Random (Q, R, T) from a Gram matrix, so the joint overlap is PSD."""
    A = rng.standard_normal((K + M, K + M + 2))
    C = scale * A @ A.T / (K + M)
    return C[:K, :K], C[:K, K:], C[K:, K:]
