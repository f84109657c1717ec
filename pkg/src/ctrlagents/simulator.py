"""Closed-loop simulation: fixed-step RK4 with a zero-order-hold controller."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .controllers import ControllerSpec, make_law, reset
from .plants import PlantModel
from .scenarios import Scenario, actuator_disturbance, draw_episode, initial_state, perturbed_plant

DIVERGENCE_BOUND = 1e6

_DEFAULT_HORIZON = {"dc_motor": 10.0, "ball_beam": 20.0, "pendulum": 5.0, "double_pendulum": 10.0}


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.01
    horizon: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.horizon < 10 * self.dt:
            raise ValueError("horizon must cover at least 10 steps")
        ratio = self.horizon / self.dt
        if abs(ratio - round(ratio)) > 1e-6 * max(1.0, ratio):
            raise ValueError("horizon must be an integer multiple of dt")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


def default_sim(plant_id: str, seed: int = 0) -> SimConfig:
    return SimConfig(dt=0.01, horizon=_DEFAULT_HORIZON[plant_id], seed=seed)


@dataclass(frozen=True)
class Trajectory:
    t: np.ndarray
    states: np.ndarray
    u: np.ndarray  # saturated command, before the disturbance
    e: np.ndarray  # reference minus true regulated output
    diverged: bool = False

    def to_csv(self, state_names: Optional[Sequence[str]] = None) -> str:
        names = list(state_names or [f"x{j}" for j in range(self.states.shape[1])])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", *names, "u", "e"])
        for k in range(len(self.t)):
            w.writerow([repr(float(self.t[k])), *(repr(float(v)) for v in self.states[k]),
                        repr(float(self.u[k])), repr(float(self.e[k]))])
        return buf.getvalue()


def _rk4(rhs, x, u, dt):
    h2 = 0.5 * dt
    k1 = rhs(x, u)
    k2 = rhs([a + h2 * b for a, b in zip(x, k1)], u)
    k3 = rhs([a + h2 * b for a, b in zip(x, k2)], u)
    k4 = rhs([a + dt * b for a, b in zip(x, k3)], u)
    s = dt / 6.0
    return [a + s * (p + 2.0 * q + 2.0 * r + w) for a, p, q, r, w in zip(x, k1, k2, k3, k4)]


def integrate_step(plant: PlantModel, state, u_effective: float, dt: float) -> np.ndarray:
    """One classic RK4 step with the input held constant."""
    return np.array(_rk4(plant.rhs, [float(v) for v in state], float(u_effective), dt))


def run_episode(
    plant: PlantModel,
    spec: ControllerSpec,
    scenario: Scenario,
    sim: SimConfig,
    seed: Optional[int] = None,
    reference: float = 0.0,
) -> Trajectory:
    """Simulate one closed-loop episode.

    The controller sees the noisy state once per step; its saturated output
    plus the actuator disturbance is held over the RK4 step.
    """
    seed = sim.seed if seed is None else seed
    n, dt = sim.n_steps, sim.dt
    draw = draw_episode(scenario, plant, seed, n, dt)
    true_plant = perturbed_plant(plant, draw)
    rhs = true_plant.rhs
    lim = plant.input_limit
    reg = plant.regulated_index
    law = make_law(spec, plant, dt, reference)
    noisy = scenario.randomness_level > 0
    noise = draw.noise.tolist() if noisy else None
    disturbed = scenario.disturbance_level > 0

    dim = plant.state_dim
    states = np.empty((n + 1, dim))
    us = np.empty(n + 1)
    es = np.empty(n + 1)
    x = initial_state(plant, draw).tolist()
    cstate = reset(spec)
    diverged = False
    k = 0
    while True:
        states[k] = x
        es[k] = reference - x[reg]
        y = [a + b for a, b in zip(x, noise[k])] if noisy else x
        u_raw, cstate = law(cstate, y)
        u = min(max(u_raw, -lim), lim) if u_raw == u_raw else 0.0
        us[k] = u
        if k == n:
            break
        u_eff = u
        if disturbed:
            u_eff = min(max(u + actuator_disturbance(draw, k * dt), -2.0 * lim), 2.0 * lim)
        x_new = _rk4(rhs, x, u_eff, dt)
        k += 1
        if not all(math.isfinite(v) for v in x_new):
            diverged = True
        else:
            x = x_new
            if max(abs(v) for v in x) > DIVERGENCE_BOUND:
                diverged = True
        if diverged:
            # freeze everything from here on
            states[k:] = x
            es[k:] = reference - x[reg]
            us[k:] = u
            break

    t = np.arange(n + 1) * dt
    return Trajectory(t, states, us, es, diverged)
