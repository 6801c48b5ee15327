import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hion.errors import ConfigError
from hion.simulator import Scenario, comparison_scenario, run_closed_loop
from hion.slmpc import SlmpcConfig, SlmpcPolicy, linearize, solve_sequence, solve_step
from hion.systems import CostSpec, make_system

from oracles import slmpc_qp_cvxpy

LIN = make_system("linear2")
VDP = make_system("vanderpol")


def lin_cfg(**kw):
    base = dict(system="linear2", cost=CostSpec("compare"))
    base.update(kw)
    return SlmpcConfig(**base)


# ---------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ConfigError):
        SlmpcConfig(horizon=0.0)
    with pytest.raises(ConfigError):
        SlmpcConfig(n_steps=1)
    with pytest.raises(ConfigError):
        SlmpcConfig(sampling_period=-0.5)
    with pytest.raises(ConfigError):
        SlmpcConfig(u_bound=0.0)
    with pytest.raises(ConfigError):
        SlmpcConfig(control_blocks="moves")
    with pytest.raises(ConfigError):
        SlmpcConfig(system="linear2", cost=CostSpec("vdp_track"))


def test_blocking_geometry():
    cfg = SlmpcConfig()
    assert cfg.dt == pytest.approx(0.1)
    assert cfg.steps_per_control == 5 and cfg.n_controls == 5
    step = SlmpcConfig(control_blocks="step")
    assert step.steps_per_control == 1 and step.n_controls == 25


# ---------------------------------------------------------------- linearize


def test_linearize_linear_system():
    rng = np.random.default_rng(0)
    for _ in range(10):
        A, B, c = linearize(LIN, rng.normal(size=2) * 5, rng.normal(size=1))
        np.testing.assert_array_equal(A, [[0, 1], [0, 0]])
        np.testing.assert_array_equal(B, [[0], [1]])
        np.testing.assert_allclose(c, 0, atol=1e-12)


def test_linearize_vanderpol_at_origin():
    A, B, c = linearize(VDP, [0.0, 0.0], [0.0])
    np.testing.assert_array_equal(A, [[0, 1], [-1, 1]])
    np.testing.assert_array_equal(B, [[0], [1]])
    np.testing.assert_array_equal(c, [0, 0])


def test_linearization_error_is_second_order():
    x, u = np.array([0.8, -1.3]), np.array([0.4])
    A, B, c = linearize(VDP, x, u)
    errs = []
    d = np.array([0.6, -0.9])
    for eps in (1e-2, 1e-3):
        xe = x + eps * d
        errs.append(np.abs(VDP.dynamics_f(xe, u) - (A @ xe + B @ u + c)).max())
    assert errs[1] < errs[0] / 50
    np.testing.assert_allclose(A @ x + B @ u + c, VDP.dynamics_f(x, u), atol=1e-14)


# ---------------------------------------------------------------- solve


def test_at_rest_on_reference_needs_no_control():
    for cost in ("compare", "linear_quadratic"):
        u = solve_step([1.0, 0.0], [1.0], lin_cfg(cost=CostSpec(cost)))
        assert abs(u) < 1e-6


def test_doubling_errors_doubles_control():
    cfg = lin_cfg()
    x, r = np.array([0.3, -0.7]), 1.2
    u1 = solve_step(x, [r], cfg)
    # translate so the reference sits at 0, then scale the error
    u2 = solve_step(2 * (x - [r, 0]) + [r, 0], [r], cfg)
    assert u2 == pytest.approx(2 * u1, rel=1e-9)


@pytest.mark.parametrize("blocks", ["sampling", "step"])
@pytest.mark.parametrize(
    "system, x, u_lin, r",
    [("linear2", (0.0, 0.0), 0.0, 1.0), ("vanderpol", (0.5, -0.3), 0.2, -1.0), ("vanderpol", (-1.2, 1.1), 0.0, 1.0)],
)
def test_matches_convex_program(blocks, system, x, u_lin, r):
    cfg = SlmpcConfig(system=system, control_blocks=blocks)
    sys_ = make_system(system)
    ours = solve_sequence(sys_, x, [r], cfg, u_lin)
    A, B, c = linearize(sys_, x, u_lin)
    ref = slmpc_qp_cvxpy(A, B, c, np.array(x), r, cfg.horizon, cfg.n_steps, cfg.steps_per_control, (1.0, 0.1, 0.0))
    np.testing.assert_allclose(ours, ref, rtol=1e-4, atol=1e-4)


def test_lq_cost_matches_convex_program():
    cfg = lin_cfg(cost=CostSpec("linear_quadratic"), control_blocks="step")
    ours = solve_sequence(LIN, (0.2, 0.5), [0.0], cfg)
    A, B, c = linearize(LIN, (0.2, 0.5), 0.0)
    ref = slmpc_qp_cvxpy(A, B, c, np.array([0.2, 0.5]), 0.0, 2.5, 25, 1, (0.0, 1.0, 0.5))
    np.testing.assert_allclose(ours, ref, rtol=1e-5, atol=1e-6)


def test_control_bound_clips():
    u = solve_step([0.0, 0.0], [5.0], lin_cfg(u_bound=0.25))
    assert u == 0.25


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-2, 2))
def test_first_control_is_continuous(x0, x1, r):
    cfg = SlmpcConfig()
    eps = 1e-7
    a = solve_step([x0, x1], [r], cfg)
    b = solve_step([x0 + eps, x1 - eps], [r], cfg)
    assert abs(a - b) < 1e-3


# ---------------------------------------------------------------- closed loop


def test_double_integrator_is_stabilized():
    cfg = lin_cfg()
    sc = Scenario("linear2", "compare", 0.5, 10.0, [(0.0, 0.0)], (1.0, 0.0))
    traj, _ = run_closed_loop(SlmpcPolicy(cfg), sc)
    assert abs(traj.x[-1, 0]) < 0.1
    assert np.all(np.abs(traj.x[-200:, 0]) < 0.1)


def test_hold_plan_reproduces_linear_plant():
    # linearization is exact for the double integrator, so the estimate matches the plant
    sc = Scenario("linear2", "compare", 0.5, 3.0, [(0.0, 1.0)], (0.0, 0.0))
    traj, _ = run_closed_loop(SlmpcPolicy(lin_cfg()), sc)
    np.testing.assert_allclose(traj.x_est, traj.x, atol=1e-10)
    assert np.isnan(traj.lam).all()


def test_control_is_held_between_observations():
    traj, _ = run_closed_loop(SlmpcPolicy(SlmpcConfig()), comparison_scenario(0.5))
    for p in np.unique(traj.phase):
        u = traj.u[traj.phase == p]
        assert np.all(u == u[0])


def test_fixture_run_is_finite_and_reset_between_runs():
    pol = SlmpcPolicy(SlmpcConfig())
    _, m1 = run_closed_loop(pol, comparison_scenario(0.5))
    _, m2 = run_closed_loop(pol, comparison_scenario(0.5))
    assert np.isfinite(m1["J"]) and m1 == m2
