"""Closed-loop engine: cold start, shifting, refinement, simulation."""

import numpy as np
import pytest

from nkmpc.engine import (HorizonExhausted, MpcConfig, SimulationFailure,
                          StepFailure, aggregates, cold_start, initial_guess,
                          newton_refine, shift_horizon, simulate)
from nkmpc.ocp import HorizonSolution, evaluate_F
from test_ocp import exact_zero_point


def test_config_validation():
    with pytest.raises(ValueError):
        MpcConfig(dt=0.0)
    with pytest.raises(ValueError):
        MpcConfig(horizon=1)
    with pytest.raises(ValueError):
        MpcConfig(steps=-1)
    with pytest.raises(ValueError):
        MpcConfig(refinements=0)
    with pytest.raises(ValueError):
        MpcConfig(model="model9").build_model()


def test_initial_guess_zeroes_slack_rows():
    config = MpcConfig(model="model1", horizon=5)
    model = config.build_model()
    U = initial_guess(model, config)
    F = evaluate_F(model, U, np.asarray(config.x0), 0.0)
    stage = F[:15].reshape(5, 3)
    assert np.max(np.abs(stage[:, 1])) < 1e-15
    assert np.max(np.abs(stage[:, 2])) < 1e-15


def test_cold_start_model1_reaches_minimum_time():
    config = MpcConfig(model="model1", horizon=20)
    model = config.build_model()
    U, stats = cold_start(config, model, np.array([-1.0, 0.0]))
    assert abs(U.p - 2.0) <= 1e-2
    assert stats.res_after <= 10 * config.gmres_tol
    assert stats.step == 0


def test_cold_start_model2_reaches_minimum_time():
    config = MpcConfig(model="model2", horizon=20)
    model = config.build_model()
    U, stats = cold_start(config, model, np.array([-1.0, 0.0]))
    assert abs(U.p - 2.0) <= 5e-2
    assert stats.res_after <= 10 * config.gmres_tol


def test_shift_horizon_identity():
    model = MpcConfig(model="model1", horizon=4).build_model()
    U = HorizonSolution.zeros(model, 4)
    U.u[:, 0] = [1.0, 2.0, 3.0, 4.0]
    U.p = 1.5
    out = shift_horizon(U, 0.0)
    assert np.allclose(out.flat, U.flat)


def test_shift_horizon_hand_example():
    model = MpcConfig(model="model1", horizon=2).build_model()
    U = HorizonSolution.zeros(model, 2)
    a, b = 0.4, 1.2
    U.u[:, 0] = [a, b]
    U.p = 1.0
    out = shift_horizon(U, 0.25)
    assert out.p == pytest.approx(0.75)
    assert out.u[0, 0] == pytest.approx((a + b) / 2.0)
    assert out.u[1, 0] == pytest.approx(b)


def test_shift_horizon_exhaustion():
    model = MpcConfig(model="model1", horizon=3).build_model()
    U = HorizonSolution.zeros(model, 3)
    U.p = 0.1
    with pytest.raises(HorizonExhausted):
        shift_horizon(U, 0.2)


def test_newton_refine_fixed_at_exact_root():
    model, U, x_t = exact_zero_point()
    config = MpcConfig(model="model1", horizon=2, preconditioning=False)
    out, stats = newton_refine(model, U, x_t, 0.0, step=1, config=config)
    assert np.allclose(out.flat, U.flat)
    assert stats.res_before < 1e-12
    assert stats.gmres_iters == 0
    assert stats.accepted


def test_newton_refine_divergence_raises_step_failure():
    model, U, x_t = exact_zero_point()
    bad = U.updated(np.full(U.dim, 50.0))
    config = MpcConfig(model="model1", horizon=2, preconditioning=False,
                       divergence_threshold=1e-6)
    with pytest.raises(StepFailure) as err:
        newton_refine(model, bad, x_t, 0.0, step=3, config=config)
    assert err.value.step == 3
    assert err.value.stats.res_before > 1e-6


def test_simulate_zero_steps():
    config = MpcConfig(model="model1", horizon=20, steps=0, dt=0.004)
    traj = simulate(config)
    assert len(traj.states) == 1
    assert len(traj.controls) == 0
    assert traj.success


def test_simulate_failure_keeps_partial_trajectory():
    config = MpcConfig(model="model1", horizon=20, steps=10, dt=0.004,
                       divergence_threshold=1e-12)
    with pytest.raises(SimulationFailure) as err:
        simulate(config)
    traj = err.value.trajectory
    assert not traj.success
    assert len(traj.states) == 2
    assert not traj.stats[-1].accepted


def test_short_closed_loop_invariants():
    config = MpcConfig(model="model1", horizon=20, steps=50, dt=2.0 / 500,
                       refinements=2, compare_unpreconditioned=True)
    traj = simulate(config)
    assert traj.success
    assert len(traj.states) == 51
    assert len(traj.controls) == 50
    # Applied controls are clamped.
    assert np.max(np.abs(traj.controls)) <= 1.0
    for s in traj.stats[1:]:
        # The horizon clock tracks remaining time early in the run.
        t_j = s.step * config.dt
        assert abs(t_j + s.p - 2.0) <= 0.1
        # Accepted refinements do not increase the residual.
        if s.accepted:
            assert s.res_after <= s.res_before
        # Preconditioning never needs more iterations than none.
        assert s.gmres_iters <= s.gmres_iters_noprec


def test_aggregates_recomputable():
    config = MpcConfig(model="model1", horizon=20, steps=5, dt=0.004)
    traj = simulate(config)
    agg = aggregates(traj, config)
    refine = [s.gmres_iters for s in traj.stats if s.step > 0]
    assert agg["steps_completed"] == 5
    assert agg["avg_gmres_iters"] == pytest.approx(float(np.mean(refine)))
    assert agg["final_state_norm"] == pytest.approx(
        float(np.linalg.norm(traj.states[-1])))
