"""Scenario realization: initial conditions, sensor noise, actuator disturbance, parameter spread."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Tuple

import numpy as np

from .plants import UNCERTAIN_FIELDS, PlantModel, scale_params

DISTURBANCE_HOLD = 1.0  # seconds between disturbance resamples


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    id: str
    initial_condition_range: Tuple[float, float]
    randomness_level: float = 0.0
    disturbance_level: float = 0.0
    param_uncertainty: float = 0.0

    def __post_init__(self):
        lo, hi = (float(v) for v in self.initial_condition_range)
        object.__setattr__(self, "initial_condition_range", (lo, hi))
        if not lo <= hi:
            raise ScenarioError(f"initial_condition_range needs lo <= hi, got [{lo}, {hi}]")
        if self.randomness_level < 0 or self.disturbance_level < 0:
            raise ScenarioError("noise and disturbance levels must be non-negative")
        if not 0 <= self.param_uncertainty < 1:
            raise ScenarioError("param_uncertainty must lie in [0, 1)")

    @property
    def nominal(self) -> bool:
        lo, hi = self.initial_condition_range
        return self.randomness_level == 0 and self.disturbance_level == 0 and self.param_uncertainty == 0 and lo == hi

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "randomness_level": self.randomness_level,
            "param_uncertainty": self.param_uncertainty,
            "initial_condition_range": list(self.initial_condition_range),
            "disturbance_level": self.disturbance_level,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Scenario":
        return cls(
            id=str(d["id"]),
            initial_condition_range=tuple(d["initial_condition_range"]),
            randomness_level=float(d.get("randomness_level", 0.0)),
            disturbance_level=float(d.get("disturbance_level", 0.0)),
            param_uncertainty=float(d.get("param_uncertainty", 0.0)),
        )


@dataclass(frozen=True)
class EpisodeDraw:
    seed: int
    x0: float
    multipliers: Dict[str, float]
    disturbance_levels: np.ndarray
    noise: np.ndarray  # (n_steps + 1, state_dim)
    hold: float = DISTURBANCE_HOLD


def draw_episode(scenario: Scenario, plant: PlantModel, seed: int, n_steps: int, dt: float) -> EpisodeDraw:
    """Sample everything random about one episode up front.

    Independent child streams keep, for example, the noise path unchanged when
    only the disturbance level is varied.
    """
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1))
    r_ic, r_par, r_dist, r_noise = (np.random.default_rng(s) for s in ss.spawn(4))

    lo, hi = scenario.initial_condition_range
    x0 = lo if lo == hi else float(r_ic.uniform(lo, hi))

    rho = scenario.param_uncertainty
    names = UNCERTAIN_FIELDS[plant.id]
    u = r_par.uniform(-rho, rho, size=len(names)) if rho > 0 else np.zeros(len(names))
    multipliers = {n: 1.0 + float(v) for n, v in zip(names, u)}

    horizon = n_steps * dt
    n_levels = max(1, math.ceil(horizon / DISTURBANCE_HOLD - 1e-9)) + 1
    d = scenario.disturbance_level
    levels = r_dist.uniform(-d, d, size=n_levels) if d > 0 else np.zeros(n_levels)

    sigma = scenario.randomness_level
    shape = (n_steps + 1, plant.state_dim)
    noise = r_noise.normal(0.0, sigma, size=shape) if sigma > 0 else np.zeros(shape)

    levels.setflags(write=False)
    noise.setflags(write=False)
    return EpisodeDraw(int(seed), x0, multipliers, levels, noise)


def measurement_noise(draw: EpisodeDraw, k: int, state) -> np.ndarray:
    """Noisy measurement of the state at step index k."""
    return np.asarray(state, dtype=float) + draw.noise[k]


def actuator_disturbance(draw: EpisodeDraw, t: float) -> float:
    idx = min(int(math.floor(t / draw.hold + 1e-9)), len(draw.disturbance_levels) - 1)
    return float(draw.disturbance_levels[idx])


def perturbed_plant(plant: PlantModel, draw: EpisodeDraw) -> PlantModel:
    if all(v == 1.0 for v in draw.multipliers.values()):
        return plant
    return scale_params(plant, draw.multipliers)


def initial_state(plant: PlantModel, draw: EpisodeDraw) -> np.ndarray:
    x = np.zeros(plant.state_dim)
    x[plant.regulated_index] = draw.x0
    return x


# nominal -> noise + disturbance -> parametric uncertainty
_LADDERS = {
    "dc_motor": [
        Scenario("I", (math.pi, math.pi)),
        Scenario("II", (math.pi, math.pi), randomness_level=0.01, disturbance_level=0.5),
        Scenario("III", (math.pi, math.pi), param_uncertainty=0.2),
    ],
    "ball_beam": [
        Scenario("I", (1.0, 1.0)),
        Scenario("II", (1.0, 1.0), randomness_level=0.01, disturbance_level=1.0),
        Scenario("III", (1.0, 1.0), param_uncertainty=0.2),
    ],
    "pendulum": [
        Scenario("I", (1.4, 1.7)),
        Scenario("II", (1.4, 1.7), randomness_level=0.01),
        Scenario("III", (1.4, 1.7), param_uncertainty=0.2, disturbance_level=0.05),
    ],
    "double_pendulum": [
        Scenario("I", (0.3, 0.3)),
        Scenario("II", (0.3, 0.3), randomness_level=0.005, disturbance_level=0.05),
        Scenario("III", (0.3, 0.3), param_uncertainty=0.2),
    ],
}


def default_ladder(plant_id: str) -> List[Scenario]:
    if plant_id not in _LADDERS:
        raise ScenarioError(f"no default scenarios for {plant_id!r}")
    return list(_LADDERS[plant_id])
