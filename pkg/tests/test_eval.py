import math

import numpy as np
import pytest

from d2c import eval as ev
from d2c.dynamics import simulate
from d2c.lqr import GainSchedule, solve_riccati
from d2c.policy import D2cPolicy
from d2c.sysid import LtvModel
from d2c.task import LqrWeights


@pytest.fixture
def lin(linear_system, linear_cost):
    """Linear reference system with an LQR policy around a non-trivial nominal."""
    T = linear_system.horizon
    model = LtvModel.constant(linear_system.A, linear_system.B, T)
    gains = solve_riccati(model, LqrWeights.from_cost(linear_cost, T))
    U = -0.5 * np.ones((T - 1, 1))
    policy = D2cPolicy(U, simulate(linear_system, U), gains)
    return linear_system, linear_cost, policy, model


def quadratic_form_oracle(system, cost, policy):
    """Write the closed-loop episode cost as J(w) = w'Hw + g'w + c in the stacked unit noise w.

    Built column by column from the linear maps w -> (x_t, u_t); the mean and
    variance for w ~ N(0, I) are then tr(H) + c and 2 tr(H^2) + g'g.
    """
    T, n_x = policy.horizon, system.n_x
    n_w = T - 1
    A, B = system.A, system.B
    # affine maps: x_t = x0_t + Gx_t w,  u_t = u0_t + Gu_t w
    x0, Gx = system.x1.copy(), np.zeros((n_x, n_w))
    H, g, c = np.zeros((n_w, n_w)), np.zeros(n_w), 0.0

    def add(M, m0, G):
        nonlocal H, g, c
        H += G.T @ M @ G
        g += 2 * G.T @ M @ m0
        c += m0 @ M @ m0

    for t in range(T - 1):
        K = policy.gains.K[t]
        u0 = policy.nominal_controls[t] + K @ (x0 - policy.nominal_states[t])
        Gu = K @ Gx
        add(cost.Q, x0, Gx)
        add(0.5 * cost.R, u0, Gu)
        E = np.zeros((1, n_w))
        E[0, t] = 1.0
        x0 = A @ x0 + B @ u0
        Gx = A @ Gx + B @ (Gu + E)
    add(cost.Q_T, x0, Gx)
    return H, g, c


def test_zero_noise_is_deterministic(lin):
    system, cost, policy, _ = lin
    r = ev.monte_carlo_eval(system, cost, policy, 0.0, 200, np.random.default_rng(0))
    assert r.cost_variance == 0.0
    assert r.mean_cost == pytest.approx(r.nominal_cost, abs=1e-12)
    assert r.terminal_mse == 0.0
    assert r.divergence_fraction == 0.0


def test_zero_noise_pendulum_policy(pendulum_run):
    r = ev.monte_carlo_eval(pendulum_run.system, pendulum_run.cost, pendulum_run.policy, 0.0, 100,
                            np.random.default_rng(0))
    assert r.cost_variance == 0.0 and r.terminal_mse == 0.0
    assert r.mean_cost == pytest.approx(r.nominal_cost, rel=1e-12)


def test_analytic_scalar_hand_case():
    # T = 2, A = B = Q = R = Q_T = 1, K = -0.5, eps = 1, xbar = (1, 0.5), ubar = -0.5:
    # stage 1 + 0.25, terminal 0.25 + Sigma_2 = 1  ->  2.5
    model = LtvModel.constant([[1.0]], [[1.0]], 2)
    gains = GainSchedule(np.full((1, 1, 1), -0.5), np.zeros((2, 1, 1)))
    w = LqrWeights.constant(1.0, 1.0, 1.0, 2)
    val = ev.analytic_linear_cost(model, gains, w, 1.0, nominal_states=[[1.0], [0.5]], nominal_controls=[[-0.5]])
    assert val == pytest.approx(2.5, abs=1e-12)


def test_analytic_zero_noise_is_nominal_cost(lin):
    system, cost, policy, model = lin
    w = LqrWeights.task_equivalent(cost, system.horizon)
    val = ev.analytic_linear_cost(model, policy.gains, w, 0.0, nominal_states=policy.nominal_states,
                                  nominal_controls=policy.nominal_controls)
    assert val == pytest.approx(ev.nominal_cost(system, cost, policy), rel=1e-12)


def test_quadratic_oracle_agrees_with_covariance_recursion(lin):
    system, cost, policy, model = lin
    H, g, c = quadratic_form_oracle(system, cost, policy)
    w = LqrWeights.task_equivalent(cost, system.horizon)
    eps = 0.3
    analytic = ev.analytic_linear_cost(model, policy.gains, w, eps, nominal_states=policy.nominal_states,
                                       nominal_controls=policy.nominal_controls)
    assert analytic == pytest.approx(eps**2 * np.trace(H) + c, rel=1e-12)


@pytest.mark.parametrize("eps", [0.1, 0.5])
def test_monte_carlo_matches_closed_form(lin, eps):
    system, cost, policy, model = lin
    H, g, c = quadratic_form_oracle(system, cost, policy)
    mean = eps**2 * np.trace(H) + c
    var = 2 * eps**4 * np.trace(H @ H) + eps**2 * g @ g
    r = ev.monte_carlo_eval(system, cost, policy, eps, 5000, np.random.default_rng(1), keep_samples=True)
    assert abs(r.mean_cost - mean) < 3 * r.mean_cost_se
    J = np.asarray(r.costs)
    d2 = (J - J.mean()) ** 2
    var_se = d2.std(ddof=1) / math.sqrt(J.size)
    assert abs(r.cost_variance - var) < 3 * var_se


def test_terminal_mse_matches_covariance(lin):
    system, cost, policy, model = lin
    eps = 0.4
    Abar = model.A + model.B @ policy.gains.K
    S = np.zeros((2, 2))
    for t in range(system.horizon - 1):
        S = Abar[t] @ S @ Abar[t].T + eps**2 * model.B[t] @ model.B[t].T
    r = ev.monte_carlo_eval(system, cost, policy, eps, 5000, np.random.default_rng(2))
    assert abs(r.terminal_mse - np.trace(S)) < 3 * r.terminal_mse_se


def test_standard_error_shrinks_like_sqrt_m(lin):
    system, cost, policy, _ = lin
    ratios = []
    for seed in range(10):
        a = ev.monte_carlo_eval(system, cost, policy, 0.2, 1000, np.random.default_rng(seed))
        b = ev.monte_carlo_eval(system, cost, policy, 0.2, 2000, np.random.default_rng(seed + 100))
        ratios.append(b.mean_cost_se / a.mean_cost_se)
    assert 0.6 <= np.mean(ratios) <= 0.85


def test_threads_bit_identical(lin):
    system, cost, policy, _ = lin
    a = ev.monte_carlo_eval(system, cost, policy, 0.3, 999, np.random.default_rng(3), keep_samples=True)
    b = ev.monte_carlo_eval(system, cost, policy, 0.3, 999, np.random.default_rng(3), threads=4, keep_samples=True)
    assert a == b


def test_scaling_study_linear_gap_is_exact_quadratic(lin):
    system, cost, policy, model = lin
    H, _, _ = quadratic_form_oracle(system, cost, policy)
    rep = ev.epsilon_scaling_study(system, cost, policy, M=4000, rng=np.random.default_rng(4))
    assert not rep.inconclusive
    gaps = np.asarray(rep.mean_gap) / np.asarray(rep.epsilons) ** 2
    # antithetic pairs cancel the linear term, so gap / eps^2 is the same sample statistic at every eps
    assert np.ptp(gaps) < 1e-8 * abs(gaps[0])
    se = rep.mean_gap_se[-1] / rep.epsilons[-1] ** 2
    assert abs(gaps[-1] - np.trace(H)) < 3 * se
    assert rep.mean_slope.slope == pytest.approx(2.0, abs=1e-6)
    assert rep.variance_slope.slope == pytest.approx(2.0, abs=0.05)


def test_scaling_guard_flags_noise_floor(lin):
    system, cost, policy, _ = lin
    rep = ev.epsilon_scaling_study(system, cost, policy, M=10, rng=np.random.default_rng(5), antithetic=False)
    assert rep.inconclusive
    assert rep.mean_slope is None
    assert rep.notes


def test_scaling_grid_validation(lin):
    system, cost, policy, _ = lin
    with pytest.raises(ValueError):
        ev.epsilon_scaling_study(system, cost, policy, grid=[0.1, 0.05], M=10, rng=np.random.default_rng(0))


def test_linearity_check_exact_on_linear_system(lin):
    system, _, policy, model = lin
    out = ev.perturbation_linearity_check(system, policy, model, M=500, rng=np.random.default_rng(6))
    assert max(out["max_residual"]) <= 1e-10


def test_variance_comparison_zero_noise(lin):
    system, cost, policy, _ = lin
    out = ev.variance_comparison(system, cost, policy, 0.0, M=100, rng=np.random.default_rng(0))
    assert out["closed_variance"] == 0.0 and out["open_variance"] == 0.0
    assert out["ratio"] == 1.0 and out["coupled"]


def test_variance_ordering_linear(lin):
    system, cost, policy, model = lin
    out = ev.variance_comparison(system, cost, policy, 0.3, M=2000, rng=np.random.default_rng(7))
    assert out["coupled"]
    assert out["ratio"] < 1 and out["significant"]
    w = LqrWeights.task_equivalent(cost, system.horizon)
    kw = dict(nominal_states=policy.nominal_states, nominal_controls=policy.nominal_controls)
    closed = ev.analytic_linear_cost(model, policy.gains, w, 0.3, **kw)
    opened = ev.analytic_linear_cost(model, GainSchedule.zeros(system.horizon, 2, 1), w, 0.3, **kw)
    assert closed <= opened


def test_pitman_morgan_direction():
    rng = np.random.default_rng(0)
    z = rng.normal(size=5000)
    e = rng.normal(size=5000)
    _, p_less = ev.pitman_morgan(0.5 * z + 0.1 * e, z)
    _, p_more = ev.pitman_morgan(2 * z + 0.1 * e, z)
    assert p_less < 1e-6
    assert p_more > 1 - 1e-6


def test_robustness_curve_linear(lin):
    system, cost, policy, _ = lin
    grid = [0.0, 0.2, 0.4, 0.8]
    rows = ev.robustness_curve(system, cost, policy, grid, M=2000, rng=np.random.default_rng(8))
    closed = [r for r in rows if r["mode"] == "closed"]
    assert closed[0]["terminal_mse"] == 0.0
    for a, b in zip(closed, closed[1:]):
        assert b["terminal_mse"] >= a["terminal_mse"] - 2 * max(a["terminal_mse_se"], b["terminal_mse_se"])
    shape = ev.curve_shape(rows)
    assert shape["first_divergence_epsilon"] is None
    assert shape["closed_le_open_below_threshold"]


def test_curve_shape_logic():
    rows = [
        {"mode": "closed", "epsilon": 0.1, "terminal_mse": 1.0, "divergence_frac": 0.0},
        {"mode": "open", "epsilon": 0.1, "terminal_mse": 2.0, "divergence_frac": 0.0},
        {"mode": "closed", "epsilon": 0.2, "terminal_mse": 9.0, "divergence_frac": 0.1},
        {"mode": "open", "epsilon": 0.2, "terminal_mse": 3.0, "divergence_frac": 0.5},
    ]
    assert ev.curve_shape(rows) == {"first_divergence_epsilon": 0.2, "closed_le_open_below_threshold": True}


def test_noise_covariance_scales(lin):
    _, _, policy, _ = lin
    assert np.array_equal(ev.noise_covariance(policy), np.eye(1))
    assert ev.noise_covariance(policy, "max_control")[0, 0] == pytest.approx(0.25)
    with pytest.raises(ValueError):
        ev.noise_covariance(policy, "relative")


def test_antithetic_draws_pair_up():
    z = ev.draw_unit_noise(np.random.default_rng(0), 6, 3, 2, antithetic=True)
    assert np.array_equal(z[0::2], -z[1::2])
    with pytest.raises(ValueError):
        ev.draw_unit_noise(np.random.default_rng(0), 5, 3, 2, antithetic=True)


def test_slope_fit_exact_power_law():
    eps = np.array([0.1, 0.2, 0.4, 0.8])
    f = ev.SlopeFit.fit(eps, 3.0 * eps**2)
    assert f.slope == pytest.approx(2.0, abs=1e-12)
    assert f.r2 == pytest.approx(1.0, abs=1e-12)
    assert f.stderr == pytest.approx(0.0, abs=1e-12) and f.ci_low == pytest.approx(f.ci_high)


def test_report_json_and_csv(tmp_path, lin):
    system, cost, policy, _ = lin
    r = ev.monte_carlo_eval(system, cost, policy, 0.1, 10, np.random.default_rng(0))
    r.to_json(tmp_path / "r.json")
    rows = ev.robustness_curve(system, cost, policy, [0.1], M=10, rng=np.random.default_rng(0))
    ev.write_rows_csv(rows, tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0].startswith("mode,epsilon,mean")


def test_monte_carlo_input_validation(lin):
    system, cost, policy, _ = lin
    with pytest.raises(ValueError):
        ev.monte_carlo_eval(system, cost, policy, 0.1, 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        ev.monte_carlo_eval(system, cost, policy, 0.1, 10, np.random.default_rng(0), mode="half")
