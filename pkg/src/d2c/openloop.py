"""
Zeroth-order open-loop trajectory optimisation.

Each iteration perturbs the current control sequence ``U`` with i.i.d.
Gaussian noise of variance ``sigma_du`` per coordinate, evaluates the noiseless
episode cost of every perturbed sequence, and folds the results into running
estimates of the mean cost and of the gradient, one rollout at a time:

    Jbar^{j+1} = (1 - 1/j) Jbar^j + (1/j) J_j
    g^{j+1}    = (1 - 1/j) g^j + (J_j - Jbar^{j+1}) dU_j / (j sigma_du)

after which ``U <- U - alpha g``.  Perturbations for an iteration are drawn up
front in rollout order, so evaluating the rollouts in parallel cannot change
the result.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dynamics import System, Trajectory, simulate, trajectory_costs
from .task import CostSpec

Objective = Callable[[np.ndarray], np.ndarray]


class RolloutError(RuntimeError):
    pass


class OptimizationDiverged(RuntimeError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


@dataclass
class GradEstimatorConfig:
    sigma_du: float = 1e-3
    m: int = 100
    alpha: float = 1e-3
    max_iters: int = 1000
    tol: float = 1e-6
    decay: float = 1.0
    patience: int = 3
    threads: int = 1

    def __post_init__(self):
        for name in ("sigma_du", "tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.alpha >= 0:
            raise ValueError("alpha must be >= 0")
        if self.m < 2:
            raise ValueError("m must be >= 2")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")


@dataclass
class GradientEstimate:
    mean_cost: float
    gradient: np.ndarray
    rollouts_used: int


@dataclass
class OptimizeResult:
    controls: np.ndarray
    history: list[dict] = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.history)

    @property
    def final_cost(self) -> float:
        return self.history[-1]["mean_cost"] if self.history else float("nan")

    def history_to_csv(self, path) -> None:
        j0 = self.history[0]["mean_cost"] if self.history else 1.0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "mean_cost", "grad_norm", "elapsed_seconds", "cost_fraction"])
            for h in self.history:
                frac = h["mean_cost"] / j0 if j0 else float("nan")
                w.writerow([h["iter"], repr(h["mean_cost"]), repr(h["grad_norm"]), f"{h['elapsed']:.6f}", repr(frac)])


def rollout_objective(system: System, cost: CostSpec, threads: int = 1) -> Objective:
    """Noiseless episode cost for a batch of control sequences ``(m, T-1, n_u)``."""

    def evaluate(batch):
        states = simulate(system, batch)
        return trajectory_costs(states, batch, cost).sum(axis=-1)

    if threads <= 1:
        return evaluate

    def evaluate_parallel(batch):
        chunks = np.array_split(batch, threads)
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(evaluate, chunks))
        return np.concatenate(parts)

    return evaluate_parallel


def estimate_cost_and_gradient(objective: Objective, U, cfg: GradEstimatorConfig, rng) -> GradientEstimate:
    U = np.asarray(U, dtype=float)
    m = cfg.m
    dU = np.sqrt(cfg.sigma_du) * rng.standard_normal((m,) + U.shape)
    costs = np.asarray(objective(U[None] + dU), dtype=float)
    bad = np.flatnonzero(~np.isfinite(costs))
    if bad.size:
        raise RolloutError(f"rollout {int(bad[0])} of {m} returned a non-finite cost ({costs[bad[0]]})")

    J = 0.0
    g = np.zeros(U.size)
    flat = dU.reshape(m, -1)
    for j in range(1, m + 1):
        Jj = costs[j - 1]
        J = (1 - 1 / j) * J + Jj / j
        g = (1 - 1 / j) * g + (Jj - J) / (j * cfg.sigma_du) * flat[j - 1]
    return GradientEstimate(float(J), g.reshape(U.shape), m)


def optimize(objective: Objective, U0, cfg: GradEstimatorConfig, rng, callback=None) -> OptimizeResult:
    """Plain gradient descent on the estimated gradient until the cost settles."""
    U = np.array(U0, dtype=float)
    if not np.all(np.isfinite(U)):
        raise ValueError("initial control sequence must be finite")
    history: list[dict] = []
    start = time.perf_counter()
    prev = None
    calm = 0
    for n in range(cfg.max_iters):
        try:
            est = estimate_cost_and_gradient(objective, U, cfg, rng)
        except RolloutError as exc:
            raise OptimizationDiverged(f"iteration {n}: {exc}", history) from exc
        if not np.isfinite(est.mean_cost) or est.mean_cost > 1e12:
            raise OptimizationDiverged(f"iteration {n}: cost {est.mean_cost:.3g} diverged", history)
        history.append(
            {
                "iter": n,
                "mean_cost": est.mean_cost,
                "grad_norm": float(np.linalg.norm(est.gradient)),
                "elapsed": time.perf_counter() - start,
            }
        )
        if callback is not None:
            callback(n, U, est)
        U = U - cfg.alpha * cfg.decay**n * est.gradient
        if prev is not None and abs(est.mean_cost - prev) < cfg.tol:
            calm += 1
            if calm >= cfg.patience:
                return OptimizeResult(U, history, True)
        else:
            calm = 0
        prev = est.mean_cost
    return OptimizeResult(U, history, False)


def nominal_trajectory(system: System, cost: CostSpec, U) -> Trajectory:
    """Noiseless rollout under ``U``; this is the nominal path used downstream."""
    U = np.asarray(U, dtype=float)
    states = simulate(system, U)
    return Trajectory(states, U.copy(), np.zeros_like(U), trajectory_costs(states, U, cost))
