"""
Black-box simulators used by the D2C pipeline.

Every built-in system has the control-affine form

    x_{t+1} = f(x_t) + B(x_t) (u_t + eps * w_t)

Noise only ever enters through the control channel.  The mechanical systems
(pendulum, cart-pole) are integrated with semi-implicit Euler on a state laid
out as ``[positions, velocities]``:

    v' = v + dt * a(q, v, u)
    q' = q + dt * v'

All transition functions are pure and vectorised over leading batch axes, so a
batch of rollouts is just a stacked array of states.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .task import CostSpec, stage_cost, terminal_cost


class DimensionError(ValueError):
    """Array shapes disagree with the system dimensions."""


class DomainError(ValueError):
    """Non-finite input handed to a simulator."""


class ConfigurationError(ValueError):
    """A simulator was asked for something it cannot do."""


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------


@dataclass
class SystemSpec:
    name: str
    horizon: int
    dt: float
    params: dict[str, Any] = field(default_factory=dict)
    x1: np.ndarray | None = None

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError(f"horizon must be >= 2, got {self.horizon}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.x1 is not None:
            self.x1 = np.asarray(self.x1, dtype=float).reshape(-1)

    @property
    def T(self) -> int:
        return self.horizon

    def to_dict(self) -> dict:
        params = {}
        for k, v in self.params.items():
            params[k] = np.asarray(v).tolist() if isinstance(v, (np.ndarray, list)) else v
        return {
            "name": self.name,
            "horizon": int(self.horizon),
            "dt": float(self.dt),
            "params": params,
            "x1": None if self.x1 is None else self.x1.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SystemSpec":
        missing = [k for k in ("name", "horizon", "dt") if k not in d]
        if missing:
            raise KeyError(f"system config missing key(s): {', '.join(missing)}")
        return cls(
            name=str(d["name"]),
            horizon=int(d["horizon"]),
            dt=float(d["dt"]),
            params=dict(d.get("params") or {}),
            x1=d.get("x1"),
        )


@dataclass
class NoiseSpec:
    """Control-channel noise ``eps * w`` with ``w ~ N(0, covariance)``."""

    epsilon: float = 0.0
    covariance: np.ndarray | None = None

    def __post_init__(self):
        if self.epsilon < 0 or not math.isfinite(self.epsilon):
            raise ValueError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if self.covariance is not None:
            cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
            if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T):
                raise ValueError("noise covariance must be a symmetric square matrix")
            if np.linalg.eigvalsh(cov).min() < -1e-12:
                raise ValueError("noise covariance must be positive semidefinite")
            self.covariance = cov

    def cov(self, n_u: int) -> np.ndarray:
        if self.covariance is None:
            return np.eye(n_u)
        if self.covariance.shape != (n_u, n_u):
            raise DimensionError(f"noise covariance is {self.covariance.shape}, expected {(n_u, n_u)}")
        return self.covariance

    def factor(self, n_u: int) -> np.ndarray:
        """Square-root factor L with L L' = covariance (PSD-safe)."""
        cov = self.cov(n_u)
        if self.covariance is None:
            return cov
        lam, V = np.linalg.eigh(cov)
        return V * np.sqrt(np.clip(lam, 0.0, None))

    def sample(self, rng: np.random.Generator, shape: tuple[int, ...], n_u: int) -> np.ndarray:
        """Draw scaled noises ``eps * w`` of shape ``shape + (n_u,)``.

        The standard normals are always drawn, even at eps = 0, so the random
        stream consumed does not depend on eps.
        """
        z = rng.standard_normal(shape + (n_u,))
        return self.scale(z, n_u)

    def scale(self, z: np.ndarray, n_u: int) -> np.ndarray:
        return self.epsilon * (z @ self.factor(n_u).T)


# ---------------------------------------------------------------------------
# Systems
# ---------------------------------------------------------------------------


class System:
    """Base class.  Subclasses provide ``_step``, ``control_matrix`` and ``jacobians``."""

    name = "system"
    n_x: int
    n_u: int
    periodic: tuple[int, ...] = ()
    supports_set_state = True

    def __init__(self, spec: SystemSpec):
        self.spec = spec
        self.dt = spec.dt
        self.horizon = spec.horizon
        x1 = spec.x1 if spec.x1 is not None else np.zeros(self.n_x)
        if x1.shape != (self.n_x,):
            raise DimensionError(f"{self.name}: x1 has shape {x1.shape}, expected ({self.n_x},)")
        self.x1 = x1

    # -- transition ---------------------------------------------------------

    def step(self, state, control, noise=None) -> np.ndarray:
        """One transition ``f(x) + B(x)(u + noise)``; ``noise`` is already scaled by eps."""
        x = self._check(state, self.n_x, "state")
        u = self._check(control, self.n_u, "control")
        if noise is not None:
            u = u + self._check(noise, self.n_u, "noise")
        return self._step(x, u)

    def _step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def control_matrix(self, state) -> np.ndarray:
        raise NotImplementedError

    def jacobians(self, state) -> tuple[np.ndarray, np.ndarray]:
        """Exact ``(df/dx, B)`` of the one-step map at ``state`` (control-independent)."""
        raise NotImplementedError

    def _check(self, a, n: int, what: str) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        if a.shape[-1:] != (n,):
            raise DimensionError(f"{self.name}: {what} has trailing dimension {a.shape[-1:]}, expected {n}")
        if not np.all(np.isfinite(a)):
            raise DomainError(f"{self.name}: non-finite {what}")
        return a

    def __repr__(self):
        return f"{type(self).__name__}(T={self.horizon}, dt={self.dt})"


def _params(spec: SystemSpec, defaults: dict) -> dict:
    unknown = sorted(set(spec.params) - set(defaults))
    if unknown:
        raise ConfigurationError(f"{spec.name}: unknown param(s) {', '.join(unknown)}; "
                                 f"expected a subset of {sorted(defaults)}")
    return {**defaults, **spec.params}


class MechanicalSystem(System):
    """Second-order system ``q'' = a(q, v, u)`` with semi-implicit Euler."""

    n_q: int

    @property
    def n_x(self):
        return 2 * self.n_q

    def accel(self, q, v, u):
        raise NotImplementedError

    def accel_jacobians(self, q, v):
        """Return ``(da/dq, da/dv, da/du)`` for a single unbatched state."""
        raise NotImplementedError

    def _step(self, x, u):
        q, v = x[..., : self.n_q], x[..., self.n_q :]
        v_next = v + self.dt * self.accel(q, v, u)
        q_next = q + self.dt * v_next
        return np.concatenate([q_next, v_next], axis=-1)

    def jacobians(self, state):
        x = self._check(state, self.n_x, "state")
        nq, dt = self.n_q, self.dt
        a_q, a_v, a_u = self.accel_jacobians(x[:nq], x[nq:])
        dv_dq = dt * a_q
        dv_dv = np.eye(nq) + dt * a_v
        A = np.block([[np.eye(nq) + dt * dv_dq, dt * dv_dv], [dv_dq, dv_dv]])
        B = np.vstack([dt * dt * a_u, dt * a_u])
        return A, B

    def control_matrix(self, state):
        return self.jacobians(state)[1]


class Pendulum(MechanicalSystem):
    """Damped pendulum, theta = 0 hanging down, theta = pi upright.

    m l^2 theta'' = u - b theta' - m g l sin(theta)
    """

    name = "pendulum"
    n_q = 1
    n_u = 1
    periodic = (0,)
    defaults = {"m": 1.0, "l": 1.0, "g": 9.81, "b": 0.1}

    def __init__(self, spec):
        p = _params(spec, self.defaults)
        self.m, self.l, self.g, self.b = (float(p[k]) for k in ("m", "l", "g", "b"))
        super().__init__(spec)

    def accel(self, q, v, u):
        inertia = self.m * self.l**2
        return (u - self.b * v - self.m * self.g * self.l * np.sin(q)) / inertia

    def accel_jacobians(self, q, v):
        inertia = self.m * self.l**2
        a_q = np.array([[-self.m * self.g * self.l * np.cos(q[0]) / inertia]])
        a_v = np.array([[-self.b / inertia]])
        a_u = np.array([[1.0 / inertia]])
        return a_q, a_v, a_u

    def energy(self, x):
        x = np.asarray(x, dtype=float)
        theta, omega = x[..., 0], x[..., 1]
        return 0.5 * self.m * self.l**2 * omega**2 + self.m * self.g * self.l * (1 - np.cos(theta))


class CartPole(MechanicalSystem):
    """Frictionless cart-pole.  State ``[x, theta, x_dot, theta_dot]``.

    theta = 0 is hanging down, theta = pi is upright; the force acts on the cart.
    ``half_length`` is the distance from pivot to the pole's centre of mass.
    """

    name = "cartpole"
    n_q = 2
    n_u = 1
    periodic = (1,)
    defaults = {"cart_mass": 1.0, "pole_mass": 0.1, "half_length": 0.5, "g": 9.81}

    def __init__(self, spec):
        p = _params(spec, self.defaults)
        self.mc = float(p["cart_mass"])
        self.mp = float(p["pole_mass"])
        self.lh = float(p["half_length"])
        self.g = float(p["g"])
        super().__init__(spec)

    def _terms(self, theta, theta_dot, force):
        # s, c are sin/cos of the angle measured from upright
        s, c = -np.sin(theta), -np.cos(theta)
        mt = self.mc + self.mp
        pml = self.mp * self.lh
        temp = (force + pml * theta_dot**2 * s) / mt
        denom = self.lh * (4.0 / 3.0 - self.mp * c**2 / mt)
        theta_acc = (self.g * s - c * temp) / denom
        x_acc = temp - pml * theta_acc * c / mt
        return s, c, temp, denom, theta_acc, x_acc

    def accel(self, q, v, u):
        _, _, _, _, theta_acc, x_acc = self._terms(q[..., 1], v[..., 1], u[..., 0])
        return np.stack([x_acc, theta_acc], axis=-1)

    def accel_jacobians(self, q, v):
        theta, theta_dot = q[1], v[1]
        # accelerations are affine in the force, so evaluate the drift at F = 0
        s, c, temp, denom, th_acc, _ = self._terms(theta, theta_dot, 0.0)
        mt = self.mc + self.mp
        pml = self.mp * self.lh

        # d(s)/dtheta = c, d(c)/dtheta = -s
        dtemp_dth = pml * theta_dot**2 * c / mt
        dtemp_dthd = 2.0 * pml * theta_dot * s / mt
        dtemp_dF = 1.0 / mt
        ddenom_dth = 2.0 * self.lh * self.mp * c * s / mt

        dnum_dth = self.g * c + s * temp - c * dtemp_dth
        dthacc_dth = (dnum_dth - th_acc * ddenom_dth) / denom
        dthacc_dthd = -c * dtemp_dthd / denom
        dthacc_dF = -c * dtemp_dF / denom

        dxacc_dth = dtemp_dth - pml / mt * (dthacc_dth * c - th_acc * s)
        dxacc_dthd = dtemp_dthd - pml * c / mt * dthacc_dthd
        dxacc_dF = dtemp_dF - pml * c / mt * dthacc_dF

        a_q = np.array([[0.0, dxacc_dth], [0.0, dthacc_dth]])
        a_v = np.array([[0.0, dxacc_dthd], [0.0, dthacc_dthd]])
        a_u = np.array([[dxacc_dF], [dthacc_dF]])
        return a_q, a_v, a_u


class LinearSystem(System):
    """Exact linear reference system ``x' = A x + B (u + eps w)``."""

    name = "linear"

    def __init__(self, spec):
        p = spec.params
        if "A" not in p or "B" not in p:
            raise KeyError("linear system params need 'A' and 'B'")
        _params(spec, {"A": None, "B": None, "periodic": ()})
        self.A = np.atleast_2d(np.asarray(p["A"], dtype=float))
        self.B = np.atleast_2d(np.asarray(p["B"], dtype=float))
        if self.A.shape[0] != self.A.shape[1] or self.B.shape[0] != self.A.shape[0]:
            raise DimensionError(f"incompatible A {self.A.shape} and B {self.B.shape}")
        self.n_x, self.n_u = self.B.shape
        self.periodic = tuple(int(i) for i in p.get("periodic", ()))
        super().__init__(spec)

    def _step(self, x, u):
        # einsum keeps each row's reduction independent of the batch size
        return np.einsum("ij,...j->...i", self.A, x) + np.einsum("ij,...j->...i", self.B, u)

    def jacobians(self, state):
        self._check(state, self.n_x, "state")
        return self.A.copy(), self.B.copy()

    def control_matrix(self, state):
        return self.B.copy()


SYSTEMS: dict[str, type[System]] = {
    "pendulum": Pendulum,
    "cartpole": CartPole,
    "linear": LinearSystem,
}


def make_system(spec: SystemSpec) -> System:
    try:
        cls = SYSTEMS[spec.name]
    except KeyError:
        raise KeyError(f"unknown system {spec.name!r}; choose from {sorted(SYSTEMS)}") from None
    return cls(spec)


def step(state, control, noise, spec: SystemSpec | System) -> np.ndarray:
    system = spec if isinstance(spec, System) else make_system(spec)
    return system.step(state, control, noise)


# ---------------------------------------------------------------------------
# Stateful cursor for black-box style access
# ---------------------------------------------------------------------------


class Simulator:
    """A simulator positioned at a state.  Each instance owns its own state."""

    def __init__(self, system: System, state=None):
        self.system = system
        self.state = np.array(system.x1 if state is None else state, dtype=float)

    def set_state(self, state) -> "Simulator":
        if not self.system.supports_set_state:
            raise ConfigurationError(f"{self.system.name} does not support set_state")
        self.state = self.system._check(np.array(state, dtype=float), self.system.n_x, "state")
        return self

    def advance(self, control, noise=None) -> np.ndarray:
        self.state = self.system.step(self.state, control, noise)
        return self.state


def set_state(system: System, state) -> Simulator:
    return Simulator(system).set_state(state)


class OpaqueSystem(System):
    """Wraps a system and hides ``set_state`` (trajectory-only access)."""

    supports_set_state = False

    def __init__(self, inner: System):
        self.inner = inner
        self.name = inner.name
        self.n_x, self.n_u = inner.n_x, inner.n_u
        self.periodic = inner.periodic
        self.spec = inner.spec
        self.dt, self.horizon, self.x1 = inner.dt, inner.horizon, inner.x1

    def _step(self, x, u):
        return self.inner._step(x, u)

    def jacobians(self, state):
        return self.inner.jacobians(state)

    def control_matrix(self, state):
        return self.inner.control_matrix(state)


# ---------------------------------------------------------------------------
# Trajectories and rollouts
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """One rollout: ``T`` states, ``T-1`` controls and noises, ``T`` cost entries.

    ``costs[t]`` is the stage cost for ``t < T-1`` and the terminal cost at ``T-1``.
    """

    states: np.ndarray
    controls: np.ndarray
    noises: np.ndarray
    costs: np.ndarray
    deviations: np.ndarray | None = None

    @property
    def T(self) -> int:
        return self.states.shape[0]

    @property
    def total_cost(self) -> float:
        return float(np.sum(self.costs))

    def to_csv(self, path) -> None:
        n_x, n_u = self.states.shape[1], self.controls.shape[1]
        header = ["t"] + [f"x[{i}]" for i in range(n_x)] + [f"u[{i}]" for i in range(n_u)] + ["stage_cost"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t in range(self.T):
                u = [repr(float(v)) for v in self.controls[t]] if t < self.T - 1 else [""] * n_u
                w.writerow([t + 1] + [repr(float(v)) for v in self.states[t]] + u + [repr(float(self.costs[t]))])

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        n_x = sum(h.startswith("x[") for h in header)
        n_u = sum(h.startswith("u[") for h in header)
        states = np.array([[float(v) for v in r[1 : 1 + n_x]] for r in body])
        controls = np.array([[float(v) for v in r[1 + n_x : 1 + n_x + n_u]] for r in body[:-1]])
        costs = np.array([float(r[-1]) for r in body])
        return cls(states, controls.reshape(-1, n_u), np.zeros((len(body) - 1, n_u)), costs)


def trajectory_costs(states: np.ndarray, controls: np.ndarray, cost: CostSpec) -> np.ndarray:
    """Per-step cost entries for (batched) state/control arrays."""
    stage = np.asarray(stage_cost(states[..., :-1, :], controls, cost))
    term = np.asarray(terminal_cost(states[..., -1, :], cost))
    return np.concatenate([stage, term[..., None]], axis=-1)


def simulate(system: System, controls: np.ndarray, noises: np.ndarray | None = None) -> np.ndarray:
    """Open-loop states for (batched) control sequences of shape ``(..., T-1, n_u)``."""
    controls = np.asarray(controls, dtype=float)
    T = controls.shape[-2] + 1
    x = np.broadcast_to(system.x1, controls.shape[:-2] + (system.n_x,)).copy()
    states = np.empty(controls.shape[:-2] + (T, system.n_x))
    states[..., 0, :] = x
    u = controls if noises is None else controls + noises
    for t in range(T - 1):
        x = system._step(x, u[..., t, :])
        states[..., t + 1, :] = x
    return states


def rollout(
    system: System,
    controls,
    noise: NoiseSpec | None,
    rng: np.random.Generator | None,
    cost: CostSpec,
) -> Trajectory:
    """Open-loop episode under ``controls`` with control-channel noise."""
    controls = np.asarray(controls, dtype=float)
    if controls.shape != (system.horizon - 1, system.n_u):
        raise DimensionError(f"controls shape {controls.shape}, expected {(system.horizon - 1, system.n_u)}")
    system._check(controls, system.n_u, "control")
    noise = noise or NoiseSpec()
    if noise.epsilon > 0:
        if rng is None:
            raise ValueError("a seeded rng is required when epsilon > 0")
        noises = noise.sample(rng, (system.horizon - 1,), system.n_u)
    else:
        noises = np.zeros_like(controls)
    states = simulate(system, controls, noises)
    return Trajectory(states, controls.copy(), noises, trajectory_costs(states, controls, cost))


def analytic_ltv(system: System, nominal: Trajectory):
    """Exact ``(A_t, B_t)`` of the one-step map along the nominal states."""
    from .sysid import LtvModel

    T = nominal.states.shape[0]
    A = np.empty((T - 1, system.n_x, system.n_x))
    B = np.empty((T - 1, system.n_x, system.n_u))
    for t in range(T - 1):
        A[t], B[t] = system.jacobians(nominal.states[t])
    return LtvModel(A, B)
