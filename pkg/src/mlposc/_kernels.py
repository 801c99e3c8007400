"""Compiled RK4 kernels for the matrix ODEs of the LQG path.

Every coefficient array is tabulated on the half-step lattice
``t_j = j * dt / 2`` (``2N + 1`` samples), so stage ``k + 1/2`` reads index
``2k + 1``.  Kernels return the failing lattice index (or -1) instead of
raising, since numba cannot raise rich exceptions.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def _sym(X):
    return 0.5 * (X + X.T)


@njit(cache=True)
def _riccati_rhs(X, Q, A, S, K, coupled):
    # reverse-time derivative  -dX/dt
    XS = X @ S
    out = Q + A.T @ X + X @ A - XS @ X
    if coupled:
        d = X.shape[0]
        IK = np.eye(d) - K
        G = XS @ X
        out = out + IK.T @ G @ IK
    return out


@njit(cache=True)
def riccati_backward(Q, A, S, K, P, dt, coupled):
    """Integrate ``-dX/dt = Q + A'X + XA - XSX [+ (I-K)'XSX(I-K)]`` from ``X(T) = P``."""
    n = (Q.shape[0] - 1) // 2
    d = P.shape[0]
    X = np.empty((n + 1, d, d))
    X[n] = P
    for k in range(n, 0, -1):
        j = 2 * k
        x = X[k]
        f1 = _riccati_rhs(x, Q[j], A[j], S[j], K[j], coupled)
        f2 = _riccati_rhs(x + 0.5 * dt * f1, Q[j - 1], A[j - 1], S[j - 1], K[j - 1], coupled)
        f3 = _riccati_rhs(x + 0.5 * dt * f2, Q[j - 1], A[j - 1], S[j - 1], K[j - 1], coupled)
        f4 = _riccati_rhs(x + dt * f3, Q[j - 2], A[j - 2], S[j - 2], K[j - 2], coupled)
        nxt = _sym(x + dt / 6.0 * (f1 + 2.0 * f2 + 2.0 * f3 + f4))
        if not np.all(np.isfinite(nxt)) or np.abs(nxt).max() > 1e150:
            return X, k - 1
        X[k - 1] = nxt
    return X, -1


@njit(cache=True)
def _moment_rhs(mu, Sig, Acl, c, D, Qb, qb, rb):
    dmu = Acl @ mu + c
    dS = D + Acl @ Sig + Sig @ Acl.T
    dc = np.trace(Qb @ Sig) + mu @ Qb @ mu + 2.0 * (qb @ mu) + rb
    return dmu, dS, dc


@njit(cache=True)
def moments_forward(Acl, c, D, Qb, qb, rb, mu0, Sig0, dt):
    """Closed-loop mean, covariance and accumulated expected running cost.

    ``dmu = Acl mu + c``, ``dSigma = D + Acl Sigma + Sigma Acl'`` and the
    cost rate ``tr(Qb Sigma) + mu'Qb mu + 2 qb'mu + rb``.
    """
    n = (Acl.shape[0] - 1) // 2
    d = mu0.shape[0]
    mu = np.empty((n + 1, d))
    Sig = np.empty((n + 1, d, d))
    cost = np.zeros(n + 1)
    mu[0] = mu0
    Sig[0] = Sig0
    for k in range(n):
        j = 2 * k
        m, s, cc = mu[k], Sig[k], cost[k]
        a1, b1, c1 = _moment_rhs(m, s, Acl[j], c[j], D[j], Qb[j], qb[j], rb[j])
        a2, b2, c2 = _moment_rhs(m + 0.5 * dt * a1, s + 0.5 * dt * b1, Acl[j + 1], c[j + 1], D[j + 1], Qb[j + 1], qb[j + 1], rb[j + 1])
        a3, b3, c3 = _moment_rhs(m + 0.5 * dt * a2, s + 0.5 * dt * b2, Acl[j + 1], c[j + 1], D[j + 1], Qb[j + 1], qb[j + 1], rb[j + 1])
        a4, b4, c4 = _moment_rhs(m + dt * a3, s + dt * b3, Acl[j + 2], c[j + 2], D[j + 2], Qb[j + 2], qb[j + 2], rb[j + 2])
        mu[k + 1] = m + dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        Sig[k + 1] = _sym(s + dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4))
        cost[k + 1] = cc + dt / 6.0 * (c1 + 2.0 * c2 + 2.0 * c3 + c4)
        if not (np.all(np.isfinite(Sig[k + 1])) and np.isfinite(cost[k + 1])) or np.abs(Sig[k + 1]).max() > 1e150:
            return mu, Sig, cost, k + 1
    return mu, Sig, cost, -1


@njit(cache=True)
def _inference_gain(Sig, d_x, jitter):
    d = Sig.shape[0]
    K = np.zeros((d, d))
    Szz = Sig[d_x:, d_x:] + jitter * np.eye(d - d_x)
    K[:d_x, d_x:] = np.linalg.solve(Szz.T, Sig[:d_x, d_x:].T).T
    K[d_x:, d_x:] = np.eye(d - d_x)
    return K


@njit(cache=True)
def _psi_rhs(Sig, A, S, Psi, D, d_x, jitter):
    K = _inference_gain(Sig, d_x, jitter)
    Acl = A - S @ Psi @ K
    return D + Acl @ Sig + Sig @ Acl.T


@njit(cache=True)
def self_consistent_forward(A, S, C, D, Sig0, d_x, jitter, dt):
    """Covariance under ``u = -R^-1 B' C K(Sigma) s_hat`` with K read off the current Sigma."""
    n = (A.shape[0] - 1) // 2
    d = Sig0.shape[0]
    Sig = np.empty((n + 1, d, d))
    Sig[0] = Sig0
    for k in range(n):
        j = 2 * k
        s = Sig[k]
        f1 = _psi_rhs(s, A[j], S[j], C[j], D[j], d_x, jitter)
        f2 = _psi_rhs(s + 0.5 * dt * f1, A[j + 1], S[j + 1], C[j + 1], D[j + 1], d_x, jitter)
        f3 = _psi_rhs(s + 0.5 * dt * f2, A[j + 1], S[j + 1], C[j + 1], D[j + 1], d_x, jitter)
        f4 = _psi_rhs(s + dt * f3, A[j + 2], S[j + 2], C[j + 2], D[j + 2], d_x, jitter)
        Sig[k + 1] = _sym(s + dt / 6.0 * (f1 + 2.0 * f2 + 2.0 * f3 + f4))
        if not np.all(np.isfinite(Sig[k + 1])) or np.abs(Sig[k + 1]).max() > 1e150:
            return Sig, k + 1
    return Sig, -1


@njit(cache=True)
def _value_rhs(W, a, Acl, c, D, Qb, qb, rb):
    dW = Qb + Acl.T @ W + W @ Acl
    da = 2.0 * qb + Acl.T @ a + 2.0 * (W @ c)
    db = rb + c @ a + np.trace(W @ D)
    return dW, da, db


@njit(cache=True)
def policy_value_backward(Acl, c, D, Qb, qb, rb, P, dt):
    """Quadratic value ``s'Ws + a's + b`` of a fixed affine feedback, backward from ``s'Ps``."""
    n = (Acl.shape[0] - 1) // 2
    d = P.shape[0]
    W = np.empty((n + 1, d, d))
    a = np.zeros((n + 1, d))
    b = np.zeros(n + 1)
    W[n] = P
    for k in range(n, 0, -1):
        j = 2 * k
        w0, a0, b0 = W[k], a[k], b[k]
        W1, A1, B1 = _value_rhs(w0, a0, Acl[j], c[j], D[j], Qb[j], qb[j], rb[j])
        W2, A2, B2 = _value_rhs(w0 + 0.5 * dt * W1, a0 + 0.5 * dt * A1, Acl[j - 1], c[j - 1], D[j - 1], Qb[j - 1], qb[j - 1], rb[j - 1])
        W3, A3, B3 = _value_rhs(w0 + 0.5 * dt * W2, a0 + 0.5 * dt * A2, Acl[j - 1], c[j - 1], D[j - 1], Qb[j - 1], qb[j - 1], rb[j - 1])
        W4, A4, B4 = _value_rhs(w0 + dt * W3, a0 + dt * A3, Acl[j - 2], c[j - 2], D[j - 2], Qb[j - 2], qb[j - 2], rb[j - 2])
        W[k - 1] = _sym(w0 + dt / 6.0 * (W1 + 2.0 * W2 + 2.0 * W3 + W4))
        a[k - 1] = a0 + dt / 6.0 * (A1 + 2.0 * A2 + 2.0 * A3 + A4)
        b[k - 1] = b0 + dt / 6.0 * (B1 + 2.0 * B2 + 2.0 * B3 + B4)
        if not np.all(np.isfinite(W[k - 1])) or np.abs(W[k - 1]).max() > 1e150:
            return W, a, b, k - 1
    return W, a, b, -1
