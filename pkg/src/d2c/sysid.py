"""
Linear time-varying identification around a nominal trajectory.

For every timestep the perturbation data are stacked column-wise as

    X_t = [dx_t; du_t]   ((n_x + n_u) x N),   Y_t = dx_{t+1}   (n_x x N)

and ``[A_t | B_t]`` is fitted either by (ridge) least squares

    [A_t | B_t] = Y_t X_t' (X_t X_t' + lam I)^{-1}

or by the moment estimator that assumes ``X_t X_t' = N sigma I``:

    [A_t | B_t] = Y_t X_t' / (N sigma)
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ConfigurationError, System, Trajectory

ESTIMATORS = ("exact", "scaled")
MODES = ("state-reset", "trajectory")


class SingularDesignError(np.linalg.LinAlgError):
    def __init__(self, t, msg):
        super().__init__(f"timestep {t}: {msg}")
        self.t = t


@dataclass
class LtvModel:
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        if self.A.ndim != 3 or self.B.ndim != 3 or self.A.shape[0] != self.B.shape[0]:
            raise ValueError(f"A {self.A.shape} and B {self.B.shape} must be equal-length matrix stacks")
        if self.A.shape[1] != self.A.shape[2] or self.B.shape[1] != self.A.shape[1]:
            raise ValueError(f"incompatible A {self.A.shape} and B {self.B.shape}")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.B))):
            raise ValueError("model contains non-finite entries")

    @property
    def horizon(self) -> int:
        return self.A.shape[0] + 1

    @property
    def n_x(self) -> int:
        return self.A.shape[1]

    @property
    def n_u(self) -> int:
        return self.B.shape[2]

    @classmethod
    def constant(cls, A, B, horizon: int) -> "LtvModel":
        A, B = np.atleast_2d(A), np.atleast_2d(B)
        return cls(np.repeat(A[None], horizon - 1, axis=0), np.repeat(B[None], horizon - 1, axis=0))

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "B": self.B.tolist()}

    @classmethod
    def from_dict(cls, d) -> "LtvModel":
        return cls(d["A"], d["B"])

    def save(self, path, meta: dict | None = None) -> None:
        payload = {"kind": "ltv_model", "meta": meta or {}, **self.to_dict()}
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "LtvModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class SysidConfig:
    sigma: float = 1e-4
    N: int = 100
    estimator: str = "exact"
    ridge: float = 1e-8
    mode: str = "state-reset"
    threads: int = 1

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")


@dataclass
class PerturbationDataset:
    """``X[t]`` is ``(n_x + n_u, N)``, ``Y[t]`` is ``(n_x, N)``."""

    X: np.ndarray
    Y: np.ndarray
    sigma: float
    mode: str = "state-reset"
    n_x: int = field(init=False)

    def __post_init__(self):
        if self.X.shape[0] != self.Y.shape[0] or self.X.shape[2] != self.Y.shape[2]:
            raise ValueError("X and Y must have matching timestep and column counts")
        self.n_x = self.Y.shape[1]

    @property
    def N(self) -> int:
        return self.X.shape[2]

    def to_csv(self, path) -> None:
        n_x, n_u = self.n_x, self.X.shape[1] - self.n_x
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "sample"] + [f"dx[{i}]" for i in range(n_x)] + [f"du[{i}]" for i in range(n_u)]
                       + [f"dx_next[{i}]" for i in range(n_x)])
            for t in range(self.X.shape[0]):
                for k in range(self.N):
                    w.writerow([t + 1, k] + [repr(float(v)) for v in self.X[t, :, k]]
                               + [repr(float(v)) for v in self.Y[t, :, k]])


def _propagate(system: System, states, controls, threads: int):
    if threads <= 1:
        return system._step(states, controls)
    from concurrent.futures import ThreadPoolExecutor

    idx = np.array_split(np.arange(states.shape[0]), threads)
    with ThreadPoolExecutor(threads) as pool:
        parts = list(pool.map(lambda i: system._step(states[i], controls[i]), idx))
    return np.concatenate(parts)


def collect_perturbation_data(system: System, nominal: Trajectory, cfg: SysidConfig, rng) -> PerturbationDataset:
    """Run perturbation experiments about ``nominal`` (the noiseless path under the nominal controls).

    Perturbations are drawn up front in timestep-major order, so the data do
    not depend on how the one-step experiments are scheduled.
    """
    xs, us = nominal.states, nominal.controls
    T, n_x, n_u = xs.shape[0], system.n_x, system.n_u
    N, std = cfg.N, np.sqrt(cfg.sigma)
    X = np.empty((T - 1, n_x + n_u, N))
    Y = np.empty((T - 1, n_x, N))

    if cfg.mode == "state-reset":
        if not system.supports_set_state:
            raise ConfigurationError(f"{system.name} cannot set its state; use mode='trajectory'")
        dx = std * rng.standard_normal((T - 1, N, n_x))
        du = std * rng.standard_normal((T - 1, N, n_u))
        for t in range(T - 1):
            nxt = _propagate(system, xs[t] + dx[t], us[t] + du[t], cfg.threads)
            X[t, :n_x] = dx[t].T
            X[t, n_x:] = du[t].T
            Y[t] = (nxt - xs[t + 1]).T
    else:
        du = std * rng.standard_normal((N, T - 1, n_u))
        x = np.broadcast_to(xs[0], (N, n_x)).copy()
        for t in range(T - 1):
            nxt = _propagate(system, x, us[t] + du[:, t], cfg.threads)
            X[t, :n_x] = (x - xs[t]).T
            X[t, n_x:] = du[:, t].T
            Y[t] = (nxt - xs[t + 1]).T
            x = nxt
    return PerturbationDataset(X, Y, cfg.sigma, cfg.mode)


def estimate_ltv(data: PerturbationDataset, cfg: SysidConfig) -> LtvModel:
    n_x = data.n_x
    steps, n_z = data.X.shape[0], data.X.shape[1]
    AB = np.empty((steps, n_x, n_z))
    for t in range(steps):
        X, Y = data.X[t], data.Y[t]
        YX = Y @ X.T
        if cfg.estimator == "scaled":
            AB[t] = YX / (data.N * data.sigma)
            continue
        G = X @ X.T + cfg.ridge * np.eye(n_z)
        if cfg.ridge == 0 and np.linalg.matrix_rank(G) < n_z:
            raise SingularDesignError(t + 1, f"X X' is rank deficient ({np.linalg.matrix_rank(G)} < {n_z}); "
                                             "add samples or set ridge > 0")
        try:
            # G is symmetric, so (YX' G^{-1})' = G^{-1} X Y'
            AB[t] = np.linalg.solve(G, YX.T).T
        except np.linalg.LinAlgError as exc:
            raise SingularDesignError(t + 1, str(exc)) from exc
    return LtvModel(AB[:, :, :n_x], AB[:, :, n_x:])


def identify(system: System, nominal: Trajectory, cfg: SysidConfig, rng) -> LtvModel:
    return estimate_ltv(collect_perturbation_data(system, nominal, cfg, rng), cfg)


def model_fit_report(model: LtvModel, data: PerturbationDataset) -> dict:
    """One-step-ahead prediction RMSE per timestep, next to the zero model's RMSE."""
    n_x = data.n_x
    rmse, zero = [], []
    for t in range(data.X.shape[0]):
        pred = model.A[t] @ data.X[t, :n_x] + model.B[t] @ data.X[t, n_x:]
        rmse.append(float(np.sqrt(np.mean((data.Y[t] - pred) ** 2))))
        zero.append(float(np.sqrt(np.mean(data.Y[t] ** 2))))
    return {"rmse": rmse, "zero_model_rmse": zero, "max_rmse": max(rmse), "mean_rmse": float(np.mean(rmse))}
