import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from ctrlagents.controllers import ControllerSpec
from ctrlagents.plants import derivative, make_plant, pendulum_energy
from ctrlagents.scenarios import Scenario
from ctrlagents.simulator import DIVERGENCE_BOUND, SimConfig, default_sim, integrate_step, run_episode

ZERO = ControllerSpec("P", {"Kp": 0.0})


def _rk4_final(plant, x0, u, dt, T):
    x = np.array(x0, dtype=float)
    for _ in range(int(round(T / dt))):
        x = integrate_step(plant, x, u, dt)
    return x


def test_rk4_is_fourth_order_against_adaptive_oracle():
    plant = make_plant("pendulum")
    x0, u, T = [1.2, -0.5], 0.3, 1.0
    ref = solve_ivp(lambda t, x: derivative(plant, x, u), (0, T), x0, method="DOP853", rtol=1e-13, atol=1e-13).y[:, -1]
    errs = [np.linalg.norm(_rk4_final(plant, x0, u, h, T) - ref) for h in (0.04, 0.02, 0.01)]
    orders = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    assert min(orders) >= 3.8


def test_undamped_pendulum_energy_drift_is_tiny():
    plant = make_plant("pendulum", {"b": 0.0})
    sim = SimConfig(dt=1e-3, horizon=10.0)
    traj = run_episode(plant, ZERO, Scenario("n", (1.0, 1.0)), sim)
    E = np.array([pendulum_energy(plant, x) for x in traj.states])
    assert np.max(np.abs(E - E[0])) < 1e-6


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(dt=0.0)
    with pytest.raises(ValueError):
        SimConfig(dt=0.01, horizon=0.05)
    with pytest.raises(ValueError):
        SimConfig(dt=0.01, horizon=1.005)
    assert default_sim("ball_beam").n_steps == 2000


def test_shapes_and_initial_error():
    plant = make_plant("dc_motor")
    sim = default_sim("dc_motor")
    traj = run_episode(plant, ControllerSpec("P", {"Kp": 10.0}), Scenario("I", (math.pi, math.pi)), sim)
    n = sim.n_steps + 1
    assert traj.t.shape == (n,) and traj.states.shape == (n, 3) and traj.u.shape == (n,)
    assert traj.e[0] == pytest.approx(-math.pi)
    assert not traj.diverged


def test_commands_respect_saturation():
    plant = make_plant("dc_motor")
    traj = run_episode(plant, ControllerSpec("P", {"Kp": 1e4}), Scenario("I", (math.pi, math.pi)), default_sim("dc_motor"))
    assert np.max(np.abs(traj.u)) <= plant.input_limit
    assert np.max(np.abs(traj.u)) == plant.input_limit


def test_same_seed_same_trajectory():
    plant = make_plant("pendulum")
    sc = Scenario("X", (1.4, 1.7), randomness_level=0.01, disturbance_level=0.05, param_uncertainty=0.2)
    spec = ControllerSpec("FSF", {"K1": 10.0, "K2": 1.0})
    a = run_episode(plant, spec, sc, default_sim("pendulum"), seed=9)
    b = run_episode(plant, spec, sc, default_sim("pendulum"), seed=9)
    c = run_episode(plant, spec, sc, default_sim("pendulum"), seed=10)
    np.testing.assert_array_equal(a.states, b.states)
    assert not np.array_equal(a.states, c.states)


def test_divergence_freezes_state():
    plant = make_plant("pendulum")
    # finite-time blow-up: x' = x^2
    object.__setattr__(plant, "rhs", lambda x, u: [x[0] * x[0], 0.0])
    traj = run_episode(plant, ZERO, Scenario("n", (1.0, 1.0)), SimConfig(dt=0.01, horizon=2.0))
    assert traj.diverged
    k = int(np.argmax(np.abs(traj.states[:, 0]) > DIVERGENCE_BOUND)) if np.any(np.abs(traj.states[:, 0]) > DIVERGENCE_BOUND) else None
    assert np.all(np.isfinite(traj.states))
    assert np.all(traj.states[-1] == traj.states[-2])
    if k is not None:
        assert np.all(traj.states[k:] == traj.states[k])


def test_disturbance_reaches_the_plant():
    plant = make_plant("dc_motor")
    sim = default_sim("dc_motor")
    quiet = run_episode(plant, ZERO, Scenario("a", (0.0, 0.0)), sim, seed=1)
    pushed = run_episode(plant, ZERO, Scenario("b", (0.0, 0.0), disturbance_level=2.0), sim, seed=1)
    assert np.all(quiet.states == 0.0)
    assert np.max(np.abs(pushed.states[:, 2])) > 0.0
    assert np.all(pushed.u == 0.0)  # logged command excludes the disturbance


def test_csv_export():
    plant = make_plant("pendulum")
    traj = run_episode(plant, ZERO, Scenario("n", (0.1, 0.1)), SimConfig(dt=0.01, horizon=0.1))
    lines = traj.to_csv(plant.state_names).splitlines()
    assert lines[0] == "t,theta,dtheta,u,e" and len(lines) == 12
