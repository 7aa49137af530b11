"""Quadratic-to-goal task costs ``c(x, u) = d'Q d + 1/2 u'R u`` and LQR surrogate weights."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np


def wrap_angle(a):
    """Wrap into (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def state_difference(x, y, periodic: Sequence[int] = ()) -> np.ndarray:
    """``x - y`` with the ``periodic`` coordinates wrapped into (-pi, pi]."""
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    if len(periodic):
        d = d.copy()
        idx = list(periodic)
        d[..., idx] = wrap_angle(d[..., idx])
    return d


def as_matrix(value, n: int, what: str = "matrix") -> np.ndarray:
    """Scalars expand to ``value * I``; 1-d inputs become diagonals."""
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        return float(a) * np.eye(n)
    if a.ndim == 1:
        a = np.diag(a)
    if a.shape != (n, n):
        raise ValueError(f"{what} has shape {a.shape}, expected {(n, n)}")
    return a


def _check_psd(M, what, strict=False):
    if not np.allclose(M, M.T, atol=1e-12):
        raise ValueError(f"{what} must be symmetric")
    lo = np.linalg.eigvalsh(M).min()
    if strict and lo <= 0:
        raise ValueError(f"{what} must be positive definite (min eigenvalue {lo:.3g})")
    if lo < -1e-12:
        raise ValueError(f"{what} must be positive semidefinite (min eigenvalue {lo:.3g})")


@dataclass
class CostSpec:
    Q: np.ndarray
    R: np.ndarray
    Q_T: np.ndarray
    goal: np.ndarray
    periodic: tuple[int, ...] = ()

    def __post_init__(self):
        self.goal = np.asarray(self.goal, dtype=float).reshape(-1)
        n_x = self.goal.shape[0]
        self.Q = as_matrix(self.Q, n_x, "Q")
        self.Q_T = as_matrix(self.Q_T, n_x, "Q_T")
        R = np.asarray(self.R, dtype=float)
        n_u = 1 if R.ndim == 0 else R.shape[0]
        self.R = as_matrix(R, n_u, "R")
        _check_psd(self.Q, "Q")
        _check_psd(self.Q_T, "Q_T")
        _check_psd(self.R, "R", strict=True)
        self.periodic = tuple(int(i) for i in self.periodic)

    @property
    def n_x(self) -> int:
        return self.goal.shape[0]

    @property
    def n_u(self) -> int:
        return self.R.shape[0]

    def deviation(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.n_x,):
            raise ValueError(f"state has trailing dimension {x.shape[-1:]}, expected {self.n_x}")
        return state_difference(x, self.goal, self.periodic)

    def to_dict(self) -> dict:
        return {
            "Q": self.Q.tolist(),
            "R": self.R.tolist(),
            "Q_T": self.Q_T.tolist(),
            "goal": self.goal.tolist(),
            "periodic": list(self.periodic),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], n_x: int | None = None, n_u: int | None = None) -> "CostSpec":
        missing = [k for k in ("Q", "R", "Q_T", "goal") if k not in d]
        if missing:
            raise KeyError(f"cost config missing key(s): {', '.join(missing)}")
        goal = np.asarray(d["goal"], dtype=float).reshape(-1)
        if n_x is not None and goal.shape != (n_x,):
            raise ValueError(f"cost.goal has length {goal.shape[0]}, expected {n_x}")
        n_x = goal.shape[0]
        R = d["R"]
        if n_u is not None:
            R = as_matrix(R, n_u, "R")
        return cls(
            Q=as_matrix(d["Q"], n_x, "Q"),
            R=R,
            Q_T=as_matrix(d["Q_T"], n_x, "Q_T"),
            goal=goal,
            periodic=tuple(d.get("periodic", ())),
        )


def _quad(d, M):
    return np.einsum("...i,ij,...j->...", d, M, d)


def stage_cost(x, u, spec: CostSpec):
    """``l(x) + 1/2 u'R u``; broadcasts over leading axes."""
    u = np.asarray(u, dtype=float)
    if u.shape[-1:] != (spec.n_u,):
        raise ValueError(f"control has trailing dimension {u.shape[-1:]}, expected {spec.n_u}")
    d = spec.deviation(x)
    out = _quad(d, spec.Q) + 0.5 * _quad(u, spec.R)
    return out if np.ndim(out) else float(out)


def terminal_cost(x, spec: CostSpec):
    d = spec.deviation(x)
    out = _quad(d, spec.Q_T)
    return out if np.ndim(out) else float(out)


def total_cost(trajectory, spec: CostSpec) -> float:
    """Sum of stage costs over ``t = 1..T-1`` plus the terminal cost."""
    states, controls = trajectory.states, trajectory.controls
    if controls.shape[0] != states.shape[0] - 1:
        raise ValueError("trajectory needs T states and T-1 controls")
    return float(np.sum(stage_cost(states[:-1], controls, spec)) + terminal_cost(states[-1], spec))


@dataclass
class LqrWeights:
    """Time-varying weights ``Q_t, R_t`` (t = 1..T-1) and ``Q_T`` of the LQR surrogate."""

    Q: np.ndarray
    R: np.ndarray
    Q_T: np.ndarray = field(default=None)

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        self.Q_T = np.asarray(self.Q_T, dtype=float)
        if self.Q.ndim != 3 or self.R.ndim != 3 or self.Q.shape[0] != self.R.shape[0]:
            raise ValueError("Q and R must be stacks of matrices with the same length")
        for t in range(self.R.shape[0]):
            _check_psd(self.R[t], f"R[{t}]", strict=True)
            _check_psd(self.Q[t], f"Q[{t}]")
        _check_psd(self.Q_T, "Q_T")

    @property
    def horizon(self) -> int:
        return self.Q.shape[0] + 1

    @classmethod
    def constant(cls, Q, R, Q_T, horizon: int) -> "LqrWeights":
        Q, R, Q_T = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (Q, R, Q_T))
        n = horizon - 1
        return cls(np.repeat(Q[None], n, axis=0), np.repeat(R[None], n, axis=0), Q_T)

    @classmethod
    def from_cost(cls, cost: CostSpec, horizon: int) -> "LqrWeights":
        """Default surrogate: the task's own ``Q``, ``R`` and ``Q_T``, time-invariant."""
        return cls.constant(cost.Q, cost.R, cost.Q_T, horizon)

    @classmethod
    def task_equivalent(cls, cost: CostSpec, horizon: int) -> "LqrWeights":
        """Weights whose quadratic form equals the task cost (note the 1/2 on R)."""
        return cls.constant(cost.Q, 0.5 * cost.R, cost.Q_T, horizon)

    def to_dict(self) -> dict:
        return {"Q": self.Q.tolist(), "R": self.R.tolist(), "Q_T": self.Q_T.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], horizon: int | None = None, n_x=None, n_u=None) -> "LqrWeights":
        Q, R = np.asarray(d["Q"], dtype=float), np.asarray(d["R"], dtype=float)
        if Q.ndim == 3:
            return cls(Q, R, d["Q_T"])
        if horizon is None:
            raise ValueError("horizon required for time-invariant weights")
        if n_x is not None:
            Q = as_matrix(Q, n_x, "Q")
            Q_T = as_matrix(d["Q_T"], n_x, "Q_T")
        else:
            Q_T = np.asarray(d["Q_T"], dtype=float)
        if n_u is not None:
            R = as_matrix(R, n_u, "R")
        return cls.constant(Q, R, Q_T, horizon)
