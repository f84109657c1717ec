"""Plant models: four nonlinear benchmark systems with actuator limits.

Each plant is a frozen dataclass of physical parameters plus a small amount of
metadata (state names, regulated channel, feedback ordering for state feedback).
The right-hand sides are written with plain floats and ``math`` so the
simulator's inner loop stays cheap; ``derivative`` is the array-valued public
entry point.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Sequence, Tuple

import numpy as np

RHS = Callable[[Sequence[float], float], Tuple[float, ...]]

# clamp on |r| inside the torque-form ball & beam angular equation
BALL_BEAM_R_FLOOR = 1e-3


class PlantError(ValueError):
    """Invalid plant parameters or non-finite inputs."""


# friction coefficients may be zero; everything else must be strictly positive
_NONNEGATIVE = {"b"}


def _check_positive(obj) -> None:
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if not isinstance(v, (int, float)):
            continue
        ok = v >= 0 if f.name in _NONNEGATIVE else v > 0
        if not (ok and math.isfinite(v)):
            raise PlantError(f"{type(obj).__name__}.{f.name} must be positive and finite, got {v!r}")


@dataclass(frozen=True)
class DcMotorParams:
    K: float = 0.01
    R: float = 1.0
    L: float = 0.5
    J: float = 0.01
    b: float = 0.1
    V_max: float = 24.0

    def __post_init__(self):
        _check_positive(self)


@dataclass(frozen=True)
class BallBeamParams:
    g: float = 9.81
    r_ball: float = 0.015
    m: float = 0.11
    J: float = 1e-5
    b: float = 0.1
    theta_max: float = 5.0

    def __post_init__(self):
        _check_positive(self)


@dataclass(frozen=True)
class PendulumParams:
    m1: float = 0.1
    L1: float = 0.5
    g: float = 9.81
    b: float = 0.1
    tau_max: float = 1.0

    def __post_init__(self):
        _check_positive(self)


@dataclass(frozen=True)
class DoublePendulumParams:
    m1: float = 0.1
    m2: float = 0.05
    L1: float = 0.5
    L2: float = 0.3
    g: float = 9.81
    u_max: float = 5.0

    def __post_init__(self):
        _check_positive(self)


# physical parameters subject to parametric uncertainty (limits and gravity are not)
UNCERTAIN_FIELDS = {
    "dc_motor": ("K", "R", "L", "J", "b"),
    "ball_beam": ("r_ball", "m", "J", "b"),
    "pendulum": ("m1", "L1", "b"),
    "double_pendulum": ("m1", "m2", "L1", "L2"),
}

LIMIT_FIELD = {
    "dc_motor": "V_max",
    "ball_beam": "theta_max",
    "pendulum": "tau_max",
    "double_pendulum": "u_max",
}

STATE_NAMES = {
    "dc_motor": ("i", "omega", "theta"),
    "ball_beam": ("r", "dr", "alpha", "dalpha"),
    "pendulum": ("theta", "dtheta"),
    "double_pendulum": ("theta1", "dtheta1", "theta2", "dtheta2"),
}

# index of the regulated output in the state vector
REGULATED_INDEX = {"dc_motor": 2, "ball_beam": 0, "pendulum": 0, "double_pendulum": 0}

# state indices multiplied by K1..Kn in the state-feedback law
FEEDBACK_ORDER = {
    "dc_motor": (0, 1, 2),
    "ball_beam": (0, 1, 2, 3),
    "pendulum": (0, 1),
    "double_pendulum": (0, 2, 1, 3),
}

PARAM_TYPES = {
    "dc_motor": DcMotorParams,
    "ball_beam": BallBeamParams,
    "pendulum": PendulumParams,
    "double_pendulum": DoublePendulumParams,
}

PLANT_IDS = tuple(PARAM_TYPES)


@dataclass(frozen=True)
class PlantModel:
    """A plant id with its parameter set.

    ``variant`` only matters for the ball & beam: ``"acceleration"`` (default)
    treats the input as the commanded beam angular acceleration, ``"torque"``
    uses the torque-balance angular equation with the |r| floor.
    """

    id: str
    params: object
    variant: str = "acceleration"
    rhs: RHS = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.id not in PARAM_TYPES:
            raise PlantError(f"unknown plant id {self.id!r}; expected one of {PLANT_IDS}")
        if not isinstance(self.params, PARAM_TYPES[self.id]):
            raise PlantError(f"{self.id} needs {PARAM_TYPES[self.id].__name__}")
        if self.variant not in ("acceleration", "torque"):
            raise PlantError(f"unknown variant {self.variant!r}")
        object.__setattr__(self, "rhs", _make_rhs(self.id, self.params, self.variant))

    def __reduce__(self):
        # the rhs closure is rebuilt on unpickling (worker processes)
        return (PlantModel, (self.id, self.params, self.variant))

    @property
    def state_dim(self) -> int:
        return len(STATE_NAMES[self.id])

    @property
    def state_names(self) -> Tuple[str, ...]:
        return STATE_NAMES[self.id]

    @property
    def regulated_index(self) -> int:
        return REGULATED_INDEX[self.id]

    @property
    def feedback_order(self) -> Tuple[int, ...]:
        return FEEDBACK_ORDER[self.id]

    @property
    def input_limit(self) -> float:
        return getattr(self.params, LIMIT_FIELD[self.id])

    def with_params(self, **changes) -> "PlantModel":
        return PlantModel(self.id, dataclasses.replace(self.params, **changes), self.variant)


def make_plant(plant_id: str, params: Dict[str, float] | None = None, variant: str = "acceleration") -> PlantModel:
    """Build a plant from its id, overriding default parameters by name."""
    if plant_id not in PARAM_TYPES:
        raise PlantError(f"unknown plant id {plant_id!r}; expected one of {PLANT_IDS}")
    cls = PARAM_TYPES[plant_id]
    params = dict(params or {})
    known = {f.name for f in dataclasses.fields(cls)}
    bad = set(params) - known
    if bad:
        raise PlantError(f"unknown {plant_id} parameter(s): {sorted(bad)}")
    return PlantModel(plant_id, cls(**{k: float(v) for k, v in params.items()}), variant)


def _make_rhs(plant_id: str, p, variant: str) -> RHS:
    sin, cos = math.sin, math.cos

    if plant_id == "dc_motor":
        K, R, L, J, b = p.K, p.R, p.L, p.J, p.b

        def f(x, u):
            i, w, _ = x
            return ((u - R * i - K * w) / L, (K * i - b * w) / J, w)

        return f

    if plant_id == "ball_beam":
        g, Rb, m, J = p.g, p.r_ball, p.m, p.J
        c = m * Rb * Rb / (m * Rb * Rb + J)
        if variant == "acceleration":
            # positive alpha rolls the ball toward the origin for r > 0 so that
            # positive state-feedback gains are stabilizing
            def f(x, u):
                r, dr, a, da = x
                return (dr, c * (r * da * da + g * sin(a)), da, u)

            return f

        def f(x, u):
            r, dr, a, da = x
            rr = max(abs(r), BALL_BEAM_R_FLOOR)
            dda = (-2.0 * da * dr * m * r + u - g * m * r * cos(a)) / (m * rr * rr)
            return (dr, c * (r * da * da - g * sin(a)), da, dda)

        return f

    if plant_id == "pendulum":
        m, L, g, b = p.m1, p.L1, p.g, p.b
        inertia = L * L * m

        # upright equilibrium at theta = 0, gravity destabilizing
        def f(x, u):
            th, dth = x
            return (dth, (u + L * g * m * sin(th) - b * dth) / inertia)

        return f

    m1, m2, L1, L2, g = p.m1, p.m2, p.L1, p.L2, p.g
    M = m1 + m2

    # point masses, absolute angles from the upright vertical, torque -u at the base
    def f(x, u):
        t1, d1, t2, d2 = x
        d = t1 - t2
        sd, cd = sin(d), cos(d)
        C = 2.0 * m1 + m2 - m2 * cos(2.0 * d)
        a1 = (
            g * (2.0 * m1 + m2) * sin(t1)
            + m2 * g * sin(t1 - 2.0 * t2)
            - 2.0 * sd * m2 * (d2 * d2 * L2 + d1 * d1 * L1 * cd)
        ) / (L1 * C) - 2.0 * u / (L1 * L1 * C)
        a2 = 2.0 * sd * (d1 * d1 * L1 * M - g * M * cos(t1) + d2 * d2 * L2 * m2 * cd) / (L2 * C) + 2.0 * u * cd / (
            L1 * L2 * C
        )
        return (d1, a1, d2, a2)

    return f


def derivative(plant: PlantModel, state, u: float) -> np.ndarray:
    """State derivative at (state, u); u is assumed already saturated."""
    x = np.asarray(state, dtype=float)
    if x.shape != (plant.state_dim,):
        raise PlantError(f"{plant.id} state must have length {plant.state_dim}, got shape {x.shape}")
    if not (np.all(np.isfinite(x)) and math.isfinite(u)):
        raise PlantError("non-finite state or input")
    return np.array(plant.rhs(tuple(x.tolist()), float(u)))


def saturate(plant: PlantModel, u_raw: float) -> float:
    lim = plant.input_limit
    return min(max(float(u_raw), -lim), lim)


def linearize(plant: PlantModel) -> Tuple[np.ndarray, np.ndarray]:
    """Central-difference Jacobians (A, B) at the zero state and zero input."""
    n = plant.state_dim
    x0 = np.zeros(n)
    A = np.zeros((n, n))
    for j in range(n):
        h = 1e-6 * max(1.0, abs(x0[j]))
        xp, xm = x0.copy(), x0.copy()
        xp[j] += h
        xm[j] -= h
        A[:, j] = (np.array(plant.rhs(tuple(xp), 0.0)) - np.array(plant.rhs(tuple(xm), 0.0))) / (2 * h)
    h = 1e-6
    B = ((np.array(plant.rhs(tuple(x0), h)) - np.array(plant.rhs(tuple(x0), -h))) / (2 * h)).reshape(n, 1)
    return A, B


def scale_params(plant: PlantModel, multipliers: Dict[str, float]) -> PlantModel:
    """Return a copy of the plant with named parameters multiplied."""
    if not multipliers:
        return plant
    changes = {k: getattr(plant.params, k) * v for k, v in multipliers.items()}
    return plant.with_params(**changes)


def pendulum_energy(plant: PlantModel, state) -> float:
    """Mechanical energy of the single pendulum (upright zero, so +cos)."""
    p = plant.params
    th, dth = state[0], state[1]
    return 0.5 * p.m1 * p.L1**2 * dth**2 + p.m1 * p.g * p.L1 * math.cos(th)
