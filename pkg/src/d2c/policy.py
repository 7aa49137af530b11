"""
The D2C policy ``u_t = ubar_t + K_t (x_t - xbar_t)`` and its executor.

Execution is vectorised over a batch of noise realisations.  Noise is always
supplied as pre-drawn standard normals, so open- and closed-loop runs that
start from the same seed see the same disturbance sequence.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .dynamics import NoiseSpec, System, Trajectory, trajectory_costs
from .lqr import GainSchedule
from .task import CostSpec, state_difference


class ExecutionTruncated(RuntimeError):
    """A rollout produced a non-finite state; ``partial`` holds what was simulated."""

    def __init__(self, t, partial: Trajectory):
        super().__init__(f"non-finite state at t={t}")
        self.t = t
        self.partial = partial


@dataclass
class D2cPolicy:
    nominal_controls: np.ndarray
    nominal_states: np.ndarray
    gains: GainSchedule
    periodic: tuple[int, ...] = ()
    metadata: dict = field(default_factory=dict)
    u_low: np.ndarray | None = None
    u_high: np.ndarray | None = None

    def __post_init__(self):
        self.nominal_controls = np.asarray(self.nominal_controls, dtype=float)
        self.nominal_states = np.asarray(self.nominal_states, dtype=float)
        T = self.nominal_states.shape[0]
        if self.nominal_controls.shape[0] != T - 1:
            raise ValueError("need T nominal states and T-1 nominal controls")
        if self.gains.K.shape != (T - 1, self.n_u, self.n_x):
            raise ValueError(f"gain shape {self.gains.K.shape} incompatible with the nominal path")
        self.periodic = tuple(int(i) for i in self.periodic)

    @property
    def horizon(self) -> int:
        return self.nominal_states.shape[0]

    @property
    def n_x(self) -> int:
        return self.nominal_states.shape[1]

    @property
    def n_u(self) -> int:
        return self.nominal_controls.shape[1]

    def open_loop(self) -> "D2cPolicy":
        return D2cPolicy(self.nominal_controls, self.nominal_states,
                         GainSchedule.zeros(self.horizon, self.n_x, self.n_u),
                         self.periodic, dict(self.metadata), self.u_low, self.u_high)

    def act(self, t: int, x) -> np.ndarray:
        """Control at timestep ``t`` (1-based, 1 <= t <= T-1)."""
        if not 1 <= t <= self.horizon - 1:
            raise IndexError(f"t={t} outside 1..{self.horizon - 1}")
        return self._act(t - 1, np.asarray(x, dtype=float))

    def _act(self, i, x):
        dx = state_difference(x, self.nominal_states[i], self.periodic)
        u = self.nominal_controls[i] + np.einsum("ij,...j->...i", self.gains.K[i], dx)
        if self.u_low is not None or self.u_high is not None:
            u = np.clip(u, self.u_low, self.u_high)
        return u

    # -- persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "kind": "d2c_policy",
            "nominal_controls": self.nominal_controls.tolist(),
            "nominal_states": self.nominal_states.tolist(),
            "gains": self.gains.to_dict(),
            "periodic": list(self.periodic),
            "metadata": self.metadata,
        }
        if self.u_low is not None or self.u_high is not None:
            d["u_low"] = None if self.u_low is None else np.asarray(self.u_low).tolist()
            d["u_high"] = None if self.u_high is None else np.asarray(self.u_high).tolist()
        return d

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path, system: System | None = None, atol: float = 1e-9) -> "D2cPolicy":
        with open(path) as fh:
            d = json.load(fh)
        pol = cls(
            d["nominal_controls"],
            d["nominal_states"],
            GainSchedule.from_dict(d["gains"]),
            tuple(d.get("periodic", ())),
            d.get("metadata", {}),
            d.get("u_low"),
            d.get("u_high"),
        )
        if system is not None:
            pol.verify(system, atol)
        return pol

    def verify(self, system: System, atol: float = 1e-9) -> None:
        """Check that the nominal states are the noiseless rollout of the nominal controls."""
        from .dynamics import simulate

        xs = simulate(system, self.nominal_controls)
        err = float(np.max(np.abs(xs - self.nominal_states)))
        if err > atol:
            raise ValueError(f"nominal states do not reproduce under the nominal controls (max error {err:.3g})")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class BatchResult:
    """Batched closed-loop rollouts.  Diverged rows are NaN from the failure step on."""

    states: np.ndarray
    controls: np.ndarray
    noises: np.ndarray
    costs: np.ndarray
    deviations: np.ndarray
    diverged: np.ndarray

    @property
    def total_costs(self) -> np.ndarray:
        return self.costs.sum(axis=-1)


def execute_batch(system: System, cost: CostSpec, policy: D2cPolicy, noises: np.ndarray,
                  open_loop: bool = False) -> BatchResult:
    """Run ``len(noises)`` rollouts; ``noises`` are already scaled ``(M, T-1, n_u)``."""
    if policy.horizon != system.horizon:
        raise ValueError(f"policy horizon {policy.horizon} != system horizon {system.horizon}")
    pol = policy.open_loop() if open_loop else policy
    M, T = noises.shape[0], policy.horizon
    states = np.empty((M, T, system.n_x))
    controls = np.empty((M, T - 1, system.n_u))
    devs = np.empty((M, T, system.n_x))
    x = np.broadcast_to(system.x1, (M, system.n_x)).copy()
    states[:, 0] = x
    devs[:, 0] = state_difference(x, pol.nominal_states[0], pol.periodic)
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(T - 1):
            u = pol._act(i, x)
            controls[:, i] = u
            x = system._step(x, u + noises[:, i])
            states[:, i + 1] = x
            devs[:, i + 1] = state_difference(x, pol.nominal_states[i + 1], pol.periodic)
        costs = trajectory_costs(states, controls, cost)
    bad = ~np.isfinite(states).all(axis=-1)
    diverged = bad.any(axis=-1) | ~np.isfinite(costs).all(axis=-1)
    return BatchResult(states, controls, noises, costs, devs, diverged)


def _single(system, cost, policy, noise, rng, open_loop):
    noise = noise or NoiseSpec()
    z = rng.standard_normal((1, policy.horizon - 1, system.n_u)) if rng is not None else None
    if z is None:
        if noise.epsilon > 0:
            raise ValueError("a seeded rng is required when epsilon > 0")
        z = np.zeros((1, policy.horizon - 1, system.n_u))
    res = execute_batch(system, cost, policy, noise.scale(z, system.n_u), open_loop)
    traj = Trajectory(res.states[0], res.controls[0], res.noises[0], res.costs[0], res.deviations[0])
    if res.diverged[0]:
        finite = np.isfinite(res.states[0]).all(axis=-1)
        t = int(np.argmin(finite)) + 1 if not finite.all() else policy.horizon
        raise ExecutionTruncated(t, traj)
    return traj


def execute(system: System, cost: CostSpec, policy: D2cPolicy, noise: NoiseSpec | None, rng) -> Trajectory:
    """One closed-loop episode; ``trajectory.deviations[t] = x_t - xbar_t``."""
    return _single(system, cost, policy, noise, rng, open_loop=False)


def execute_open_loop(system: System, cost: CostSpec, policy: D2cPolicy, noise: NoiseSpec | None, rng) -> Trajectory:
    """One episode applying only the nominal controls."""
    return _single(system, cost, policy, noise, rng, open_loop=True)
