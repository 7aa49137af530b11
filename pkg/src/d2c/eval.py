"""
Monte-Carlo evaluation of D2C policies and numerical checks of the
decoupling orders:

* the mean-cost gap ``E[J] - Jbar`` shrinks like eps^2,
* the cost variance shrinks like eps^2,
* the nonlinear state deviation differs from its linearised counterpart by
  a term that shrinks like eps^2,
* feedback lowers the cost variance relative to the bare nominal plan.

Every estimate is a function of pre-drawn standard normals reduced in rollout
order, so results are reproducible bit-for-bit for a fixed seed no matter how
rollouts are split across threads.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .dynamics import System
from .lqr import GainSchedule, closed_loop_matrices
from .policy import BatchResult, D2cPolicy, execute_batch
from .sysid import LtvModel
from .task import CostSpec, LqrWeights

DEFAULT_GRID = (0.0125, 0.025, 0.05, 0.1)


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------


def noise_covariance(policy: D2cPolicy, scale: str = "absolute", covariance=None) -> np.ndarray:
    """Covariance ``W`` of the unit noise ``w``.

    ``"absolute"`` uses ``covariance`` (identity by default).  ``"max_control"``
    uses ``diag(max_t |ubar_t|^2)`` so that eps reads as a fraction of the
    largest nominal control.
    """
    n_u = policy.n_u
    if scale == "absolute":
        return np.eye(n_u) if covariance is None else np.atleast_2d(np.asarray(covariance, dtype=float))
    if scale == "max_control":
        umax = np.abs(policy.nominal_controls).max(axis=0)
        return np.diag(umax**2)
    raise ValueError(f"unknown noise scale {scale!r}")


def _factor(W):
    lam, V = np.linalg.eigh(W)
    return V * np.sqrt(np.clip(lam, 0.0, None))


def draw_unit_noise(rng, M: int, steps: int, n_u: int, antithetic: bool = False) -> np.ndarray:
    """Standard normals ``(M, steps, n_u)``; antithetic rows come in ``(z, -z)`` pairs."""
    if not antithetic:
        return rng.standard_normal((M, steps, n_u))
    if M % 2:
        raise ValueError("antithetic sampling needs an even number of rollouts")
    half = rng.standard_normal((M // 2, steps, n_u))
    z = np.empty((M, steps, n_u))
    z[0::2], z[1::2] = half, -half
    return z


def run_rollouts(system: System, cost: CostSpec, policy: D2cPolicy, noises: np.ndarray,
                 open_loop: bool = False, threads: int = 1) -> BatchResult:
    if threads <= 1:
        return execute_batch(system, cost, policy, noises, open_loop)
    idx = np.array_split(np.arange(noises.shape[0]), threads)
    with ThreadPoolExecutor(threads) as pool:
        parts = list(pool.map(lambda i: execute_batch(system, cost, policy, noises[i], open_loop), idx))
    return BatchResult(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                         ("states", "controls", "noises", "costs", "deviations", "diverged")))


def fallen(result: BatchResult, periodic, angle: float) -> np.ndarray:
    """Rollouts whose wrapped angular deviation ever exceeds ``angle``."""
    if not periodic:
        return np.zeros(result.deviations.shape[0], dtype=bool)
    with np.errstate(invalid="ignore"):
        dev = np.abs(result.deviations[:, :, list(periodic)])
        return np.nan_to_num(dev, nan=np.inf).max(axis=(1, 2)) > angle


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    epsilon: float
    num_rollouts: int
    mode: str
    nominal_cost: float
    mean_cost: float
    mean_cost_se: float
    cost_variance: float
    terminal_mse: float
    terminal_mse_se: float
    divergence_fraction: float
    costs: list | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)


def _variance(x) -> float:
    # shifting by a sample makes identical draws give exactly zero
    x = np.asarray(x, dtype=float)
    return float((x - x[0]).var(ddof=1)) if x.size > 1 else 0.0


def summarize(result: BatchResult, epsilon, mode, nominal_cost, keep_samples=False,
              periodic=(), divergence_angle=math.pi / 2, antithetic=False) -> EvalReport:
    J = result.total_costs
    M = J.shape[0]
    diverged = result.diverged | fallen(result, periodic, divergence_angle)
    finite = np.isfinite(J)
    Jf = J[finite]
    if antithetic and finite.all():
        pairs = 0.5 * (J[0::2] + J[1::2])
        se = float(pairs.std(ddof=1) / math.sqrt(pairs.size)) if pairs.size > 1 else float("nan")
    else:
        se = float(Jf.std(ddof=1) / math.sqrt(Jf.size)) if Jf.size > 1 else float("nan")
    sq = np.sum(result.deviations[:, -1] ** 2, axis=-1)
    sq = sq[np.isfinite(sq)]
    return EvalReport(
        epsilon=float(epsilon),
        num_rollouts=int(M),
        mode=mode,
        nominal_cost=float(nominal_cost),
        mean_cost=float(Jf.mean()) if Jf.size else float("nan"),
        mean_cost_se=se,
        cost_variance=_variance(Jf),
        terminal_mse=float(sq.mean()) if sq.size else float("nan"),
        terminal_mse_se=float(sq.std(ddof=1) / math.sqrt(sq.size)) if sq.size > 1 else 0.0,
        divergence_fraction=float(diverged.mean()),
        costs=J.tolist() if keep_samples else None,
    )


def nominal_cost(system: System, cost: CostSpec, policy: D2cPolicy) -> float:
    res = execute_batch(system, cost, policy, np.zeros((1, policy.horizon - 1, policy.n_u)), open_loop=True)
    return float(res.total_costs[0])


def monte_carlo_eval(system: System, cost: CostSpec, policy: D2cPolicy, epsilon: float, M: int, rng,
                     mode: str = "closed", noise_cov=None, threads: int = 1, keep_samples: bool = False,
                     divergence_angle: float = math.pi / 2, antithetic: bool = False) -> EvalReport:
    """Sample mean/variance of the episode cost and the terminal MSE over ``M`` rollouts."""
    if M < 2:
        raise ValueError("M must be >= 2")
    if mode not in ("closed", "open"):
        raise ValueError(f"mode must be 'closed' or 'open', got {mode!r}")
    W = np.eye(policy.n_u) if noise_cov is None else np.atleast_2d(noise_cov)
    z = draw_unit_noise(rng, M, policy.horizon - 1, policy.n_u, antithetic)
    res = run_rollouts(system, cost, policy, epsilon * (z @ _factor(W).T), mode == "open", threads)
    return summarize(res, epsilon, mode, nominal_cost(system, cost, policy), keep_samples,
                     policy.periodic, divergence_angle, antithetic)


def analytic_linear_cost(model: LtvModel, gains: GainSchedule, weights: LqrWeights, epsilon: float,
                         noise_cov=None, nominal_states=None, nominal_controls=None, dx1=None) -> float:
    """Exact expected quadratic cost of a linear-Gaussian closed loop.

    The state is ``x_t = xbar_t + dx_t`` and the control ``u_t = ubar_t + K_t dx_t`` with

        dx_{t+1} = (A_t + B_t K_t) dx_t + eps B_t w_t,   w_t ~ N(0, W),

    and the cost is ``sum_t x_t'Q_t x_t + u_t'R_t u_t + x_T'Q_T x_T``.  The mean
    and covariance of ``dx_t`` are propagated forward and paired with the
    weights through ``E[z'Mz] = m'Mm + tr(M Sigma)``.
    """
    Abar = closed_loop_matrices(model, gains)
    n_x, n_u, steps = model.n_x, model.n_u, model.A.shape[0]
    if weights.horizon != model.horizon:
        raise ValueError("weights and model horizons differ")
    W = np.eye(n_u) if noise_cov is None else np.atleast_2d(np.asarray(noise_cov, dtype=float))
    if W.shape != (n_u, n_u):
        raise ValueError(f"noise covariance shape {W.shape}, expected {(n_u, n_u)}")
    xbar = np.zeros((steps + 1, n_x)) if nominal_states is None else np.asarray(nominal_states, dtype=float)
    ubar = np.zeros((steps, n_u)) if nominal_controls is None else np.asarray(nominal_controls, dtype=float)
    if xbar.shape != (steps + 1, n_x) or ubar.shape != (steps, n_u):
        raise ValueError("nominal path dimensions do not match the model")

    mean = np.zeros(n_x) if dx1 is None else np.asarray(dx1, dtype=float)
    Sigma = np.zeros((n_x, n_x))
    total = 0.0
    for t in range(steps):
        Q, R, K = weights.Q[t], weights.R[t], gains.K[t]
        x = xbar[t] + mean
        u = ubar[t] + K @ mean
        total += x @ Q @ x + np.trace(Q @ Sigma) + u @ R @ u + np.trace(K.T @ R @ K @ Sigma)
        mean = Abar[t] @ mean
        Sigma = Abar[t] @ Sigma @ Abar[t].T + epsilon**2 * model.B[t] @ W @ model.B[t].T
    x = xbar[-1] + mean
    total += x @ weights.Q_T @ x + np.trace(weights.Q_T @ Sigma)
    return float(total)


# ---------------------------------------------------------------------------
# order-of-magnitude studies
# ---------------------------------------------------------------------------


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    r2: float
    stderr: float
    ci_low: float
    ci_high: float

    @classmethod
    def fit(cls, eps, values, level: float = 0.95) -> "SlopeFit":
        x, y = np.log(np.asarray(eps)), np.log(np.asarray(values))
        r = stats.linregress(x, y)
        dof = len(x) - 2
        half = stats.t.ppf(0.5 + level / 2, dof) * r.stderr if dof > 0 else float("nan")
        return cls(float(r.slope), float(r.intercept), float(r.rvalue**2), float(r.stderr),
                   float(r.slope - half), float(r.slope + half))


@dataclass
class ScalingReport:
    epsilons: list
    num_rollouts: int
    nominal_cost: float
    mean_gap: list = field(default_factory=list)
    mean_gap_se: list = field(default_factory=list)
    cost_variance: list = field(default_factory=list)
    mean_slope: SlopeFit | None = None
    variance_slope: SlopeFit | None = None
    inconclusive: bool = False
    notes: list = field(default_factory=list)
    linearity: dict | None = None

    def __post_init__(self):
        eps = np.asarray(self.epsilons, dtype=float)
        if eps.size < 2 or np.any(eps <= 0) or np.any(np.diff(eps) <= 0):
            raise ValueError("epsilon grid must be strictly increasing and positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)


def epsilon_scaling_study(system: System, cost: CostSpec, policy: D2cPolicy, grid=DEFAULT_GRID, M: int = 5000,
                          rng=None, antithetic: bool = True, noise_cov=None, threads: int = 1,
                          guard: float = 3.0) -> ScalingReport:
    """Fit log-log slopes of ``|E[J] - Jbar|`` and ``Var(J)`` against eps.

    The same unit noises are reused at every eps.  With ``antithetic`` the
    noises come in ``(w, -w)`` pairs, which cancels the odd-order terms of the
    sample mean exactly and leaves the eps^2 gap visible above the sampling
    noise.  If the smallest-eps gap is not ``guard`` standard errors away from
    zero, or the gaps flip sign or fail to grow, the mean slope is not fitted
    and the report is marked inconclusive.
    """
    rng = np.random.default_rng() if rng is None else rng
    grid = [float(e) for e in grid]
    W = np.eye(policy.n_u) if noise_cov is None else np.atleast_2d(noise_cov)
    z = draw_unit_noise(rng, M, policy.horizon - 1, policy.n_u, antithetic) @ _factor(W).T
    Jbar = nominal_cost(system, cost, policy)
    rep = ScalingReport(grid, M, Jbar)
    for eps in grid:
        r = summarize(run_rollouts(system, cost, policy, eps * z, False, threads), eps, "closed", Jbar,
                      antithetic=antithetic)
        rep.mean_gap.append(r.mean_cost - Jbar)
        rep.mean_gap_se.append(r.mean_cost_se)
        rep.cost_variance.append(r.cost_variance)

    gaps = np.asarray(rep.mean_gap)
    if abs(gaps[0]) < guard * rep.mean_gap_se[0]:
        rep.inconclusive = True
        rep.notes.append(f"smallest-eps mean gap {gaps[0]:.3g} is within {guard} standard errors "
                         f"({rep.mean_gap_se[0]:.3g}) of zero")
    if np.any(np.sign(gaps) != np.sign(gaps[0])):
        rep.inconclusive = True
        rep.notes.append("mean gap changes sign across the grid")
    elif np.any(np.diff(np.abs(gaps)) <= 0):
        rep.inconclusive = True
        rep.notes.append("mean gap is not monotone in eps")
    if not rep.inconclusive:
        rep.mean_slope = SlopeFit.fit(grid, np.abs(gaps))
    if np.all(np.asarray(rep.cost_variance) > 0):
        rep.variance_slope = SlopeFit.fit(grid, rep.cost_variance)
    return rep


def perturbation_linearity_check(system: System, policy: D2cPolicy, model: LtvModel, grid=DEFAULT_GRID,
                                 M: int = 2000, rng=None, noise_cov=None, threads: int = 1) -> dict:
    """Compare the nonlinear closed-loop deviation with its linear propagation.

    The linear deviation ``dx^l_{t+1} = (A_t + B_t K_t) dx^l_t + eps B_t w_t``
    is driven by exactly the noises recorded in the nonlinear rollouts; the
    statistic is ``E||dx_T - dx^l_T||`` at each eps.
    """
    rng = np.random.default_rng() if rng is None else rng
    grid = [float(e) for e in grid]
    W = np.eye(policy.n_u) if noise_cov is None else np.atleast_2d(noise_cov)
    z = draw_unit_noise(rng, M, policy.horizon - 1, policy.n_u) @ _factor(W).T
    Abar = closed_loop_matrices(model, policy.gains)
    dummy = CostSpec(np.zeros((policy.n_x, policy.n_x)), np.eye(policy.n_u), np.zeros((policy.n_x, policy.n_x)),
                  np.zeros(policy.n_x))
    out = {"epsilons": grid, "num_rollouts": M, "mean_residual": [], "residual_se": [], "max_residual": []}
    for eps in grid:
        noises = eps * z
        res = run_rollouts(system, dummy, policy, noises, False, threads)
        dl = np.zeros((M, policy.n_x))
        for t in range(policy.horizon - 1):
            dl = dl @ Abar[t].T + noises[:, t] @ model.B[t].T
        r = np.linalg.norm(res.deviations[:, -1] - dl, axis=-1)
        out["mean_residual"].append(float(r.mean()))
        out["residual_se"].append(float(r.std(ddof=1) / math.sqrt(M)))
        out["max_residual"].append(float(r.max()))
    res_arr = np.asarray(out["mean_residual"])
    if np.all(res_arr > 0):
        out["slope"] = asdict(SlopeFit.fit(grid, res_arr))
    else:
        out["slope"] = None
    return out


def pitman_morgan(a, b) -> tuple[float, float]:
    """Paired test of ``Var(a) = Var(b)``; returns ``(t statistic, one-sided p for Var(a) < Var(b))``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    n = a.size
    r = np.corrcoef(a + b, a - b)[0, 1]
    # corr(a+b, a-b) has the sign of Var(a) - Var(b)
    tstat = r * math.sqrt((n - 2) / max(1 - r * r, 1e-300))
    return float(tstat), float(stats.t.cdf(tstat, n - 2))


def variance_comparison(system: System, cost: CostSpec, policy: D2cPolicy, epsilon: float, M: int = 5000,
                        rng=None, noise_cov=None, threads: int = 1, level: float = 0.95,
                        n_boot: int = 1000) -> dict:
    """Closed- versus open-loop cost variance on common random numbers."""
    rng = np.random.default_rng() if rng is None else rng
    W = np.eye(policy.n_u) if noise_cov is None else np.atleast_2d(noise_cov)
    z = draw_unit_noise(rng, M, policy.horizon - 1, policy.n_u)
    noises = epsilon * (z @ _factor(W).T)
    closed = run_rollouts(system, cost, policy, noises, False, threads)
    opened = run_rollouts(system, cost, policy, noises, True, threads)
    coupled = bool(np.array_equal(closed.noises, opened.noises))
    Jc, Jo = closed.total_costs, opened.total_costs
    vc, vo = _variance(Jc), _variance(Jo)
    out = {"epsilon": float(epsilon), "num_rollouts": M, "closed_variance": vc, "open_variance": vo,
           "coupled": coupled}
    if vo == 0.0 and vc == 0.0:
        out.update(ratio=1.0, ci_low=1.0, ci_high=1.0, p_value=1.0, significant=False)
        return out
    ratio = vc / vo if vo > 0 else float("inf")
    _, p = pitman_morgan(Jc, Jo)
    # paired bootstrap for the ratio; its own stream so the estimate above is untouched
    boot_rng = np.random.default_rng(rng.integers(2**63))
    ratios = np.empty(n_boot)
    for k in range(n_boot):
        i = boot_rng.integers(0, M, M)
        ratios[k] = Jc[i].var(ddof=1) / Jo[i].var(ddof=1)
    lo, hi = np.quantile(ratios, [(1 - level) / 2, (1 + level) / 2])
    out.update(ratio=float(ratio), ci_low=float(lo), ci_high=float(hi), p_value=p,
               significant=bool(p < 1 - level and hi < 1.0))
    return out


def robustness_curve(system: System, cost: CostSpec, policy: D2cPolicy, grid, M: int = 1000, rng=None,
                     noise_cov=None, threads: int = 1, divergence_angle: float = math.pi / 2) -> list[dict]:
    """Terminal MSE and divergence fraction against eps, closed and open loop on common noises."""
    rng = np.random.default_rng() if rng is None else rng
    W = np.eye(policy.n_u) if noise_cov is None else np.atleast_2d(noise_cov)
    z = draw_unit_noise(rng, M, policy.horizon - 1, policy.n_u) @ _factor(W).T
    Jbar = nominal_cost(system, cost, policy)
    rows = []
    for eps in grid:
        for mode in ("closed", "open"):
            res = run_rollouts(system, cost, policy, eps * z, mode == "open", threads)
            r = summarize(res, eps, mode, Jbar, periodic=policy.periodic, divergence_angle=divergence_angle)
            rows.append({"mode": mode, "epsilon": float(eps), "mean": r.mean_cost, "var": r.cost_variance,
                         "terminal_mse": r.terminal_mse, "terminal_mse_se": r.terminal_mse_se,
                         "divergence_frac": r.divergence_fraction})
    return rows


def curve_shape(rows: list[dict]) -> dict:
    """First closed-loop divergence and whether closed-loop MSE <= open-loop MSE below it."""
    closed = [r for r in rows if r["mode"] == "closed"]
    opened = {r["epsilon"]: r for r in rows if r["mode"] == "open"}
    first = next((r["epsilon"] for r in closed if r["divergence_frac"] > 0), None)
    below = [r for r in closed if first is None or r["epsilon"] < first]
    ok = all(r["terminal_mse"] <= opened[r["epsilon"]]["terminal_mse"] for r in below)
    return {"first_divergence_epsilon": first, "closed_le_open_below_threshold": ok}


def write_rows_csv(rows: list[dict], path, columns=None) -> None:
    columns = columns or list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
