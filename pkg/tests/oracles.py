"""Independent reference implementations used as test oracles."""

import numpy as np

from d2c.task import LqrWeights


def random_ltv(rng, n_x, n_u, T, scale=0.5):
    """Stable-ish random time-varying (A, B) stacks."""
    A = np.empty((T - 1, n_x, n_x))
    for t in range(T - 1):
        Qm, _ = np.linalg.qr(rng.standard_normal((n_x, n_x)))
        A[t] = scale * Qm
    B = 0.25 * rng.standard_normal((T - 1, n_x, n_u))
    return A, B


def random_weights(rng, n_x, n_u, T):
    Q = np.empty((T - 1, n_x, n_x))
    R = np.empty((T - 1, n_u, n_u))
    for t in range(T - 1):
        G = rng.normal(size=(n_x, n_x))
        Q[t] = G @ G.T / n_x
        H = rng.normal(size=(n_u, n_u))
        R[t] = H @ H.T / n_u + 0.1 * np.eye(n_u)
    G = rng.normal(size=(n_x, n_x))
    return LqrWeights(Q, R, G @ G.T)


def batch_lqr_oracle(A, B, Q, R, QT):
    """Gains by solving, from every start time s, the whole remaining horizon as one least-squares problem.

    States are stacked as X = Sx x_s + Su U; minimising X'Qbar X + U'Rbar U over U
    gives U* = -(Su'Qbar Su + Rbar)^{-1} Su'Qbar Sx x_s.  The first block row is K_s
    and the optimal value is x_s' P_s x_s.  No Riccati recursion is involved.
    """
    steps, n_x, n_u = B.shape
    K = np.empty((steps, n_u, n_x))
    P = np.empty((steps + 1, n_x, n_x))
    P[steps] = QT
    for s in range(steps):
        h = steps - s
        Sx = np.zeros(((h + 1) * n_x, n_x))
        Su = np.zeros(((h + 1) * n_x, h * n_u))
        Sx[:n_x] = np.eye(n_x)
        for k in range(1, h + 1):
            t = s + k - 1
            Sx[k * n_x:(k + 1) * n_x] = A[t] @ Sx[(k - 1) * n_x:k * n_x]
            Su[k * n_x:(k + 1) * n_x] = A[t] @ Su[(k - 1) * n_x:k * n_x]
            Su[k * n_x:(k + 1) * n_x, (k - 1) * n_u:k * n_u] = B[t]
        Qbar = np.zeros(((h + 1) * n_x, (h + 1) * n_x))
        Rbar = np.zeros((h * n_u, h * n_u))
        for k in range(h):
            Qbar[k * n_x:(k + 1) * n_x, k * n_x:(k + 1) * n_x] = Q[s + k]
            Rbar[k * n_u:(k + 1) * n_u, k * n_u:(k + 1) * n_u] = R[s + k]
        Qbar[h * n_x:, h * n_x:] = QT
        H = Su.T @ Qbar @ Su + Rbar
        F = np.linalg.lstsq(H, Su.T @ Qbar @ Sx, rcond=None)[0]
        K[s] = -F[:n_u]
        P[s] = Sx.T @ Qbar @ Sx - (Su.T @ Qbar @ Sx).T @ F
    return K, P
