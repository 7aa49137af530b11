"""Finite-horizon time-varying LQR by backward Riccati recursion."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .sysid import LtvModel
from .task import LqrWeights


class SynthesisError(np.linalg.LinAlgError):
    def __init__(self, t, msg):
        super().__init__(f"timestep {t}: {msg}")
        self.t = t


@dataclass
class GainSchedule:
    """``K[t]`` is ``(n_u, n_x)`` for t = 1..T-1; ``P[t]`` is ``(n_x, n_x)`` for t = 1..T."""

    K: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=float)
        self.P = np.asarray(self.P, dtype=float)
        if self.P.shape[0] != self.K.shape[0] + 1:
            raise ValueError(f"need len(P) == len(K) + 1, got {self.P.shape[0]} and {self.K.shape[0]}")

    @property
    def horizon(self) -> int:
        return self.P.shape[0]

    @classmethod
    def zeros(cls, horizon, n_x, n_u) -> "GainSchedule":
        return cls(np.zeros((horizon - 1, n_u, n_x)), np.zeros((horizon, n_x, n_x)))

    def to_dict(self) -> dict:
        return {"K": self.K.tolist(), "P": self.P.tolist()}

    @classmethod
    def from_dict(cls, d) -> "GainSchedule":
        return cls(d["K"], d["P"])

    def save(self, path, meta: dict | None = None) -> None:
        with open(path, "w") as fh:
            json.dump({"kind": "gain_schedule", "meta": meta or {}, **self.to_dict()}, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "GainSchedule":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def solve_riccati(model: LtvModel, weights: LqrWeights) -> GainSchedule:
    """
    P_T = Q_T and, for t = T-1 .. 1,

        K_t = -(R_t + B_t' P_{t+1} B_t)^{-1} B_t' P_{t+1} A_t
        P_t = Q_t + A_t' P_{t+1} A_t + A_t' P_{t+1} B_t K_t

    with P_t symmetrised after every step.  The noise level never enters.
    """
    if weights.horizon != model.horizon:
        raise ValueError(f"weights horizon {weights.horizon} != model horizon {model.horizon}")
    A, B = model.A, model.B
    steps, n_x, n_u = A.shape[0], model.n_x, model.n_u
    if weights.Q.shape[1:] != (n_x, n_x) or weights.R.shape[1:] != (n_u, n_u):
        raise ValueError("weight dimensions do not match the model")

    K = np.empty((steps, n_u, n_x))
    P = np.empty((steps + 1, n_x, n_x))
    P[steps] = weights.Q_T
    for t in range(steps - 1, -1, -1):
        Pn = P[t + 1]
        BtP = B[t].T @ Pn
        S = weights.R[t] + BtP @ B[t]
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise SynthesisError(t + 1, "R_t + B_t' P_{t+1} B_t is not positive definite") from None
        rhs = BtP @ A[t]
        K[t] = -np.linalg.solve(L.T, np.linalg.solve(L, rhs))
        Pt = weights.Q[t] + A[t].T @ Pn @ A[t] + rhs.T @ K[t]
        P[t] = 0.5 * (Pt + Pt.T)
    return GainSchedule(K, P)


def closed_loop_matrices(model: LtvModel, gains: GainSchedule) -> np.ndarray:
    """``A_t + B_t K_t`` for every t."""
    if gains.K.shape[0] != model.A.shape[0]:
        raise ValueError("gain schedule and model horizons differ")
    return model.A + model.B @ gains.K
