"""Controller families (P, PI, PD, PID, state feedback) and their discrete laws."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .plants import PlantModel

KINDS = ("P", "PI", "PD", "PID", "FSF")
PID_GAINS = {"P": ("Kp",), "PI": ("Kp", "Ki"), "PD": ("Kp", "Kd"), "PID": ("Kp", "Ki", "Kd")}

# dirty-derivative filter coefficient (rad/s)
DERIV_FILTER_N = 50.0
# Ki * integral is clamped to this multiple of the actuator limit
ANTI_WINDUP_FACTOR = 2.0


class ConfigError(ValueError):
    """Invalid controller or run configuration."""


def gain_names(kind: str, plant: Optional[PlantModel] = None, n_states: Optional[int] = None) -> Tuple[str, ...]:
    if kind in PID_GAINS:
        return PID_GAINS[kind]
    if kind == "FSF":
        n = n_states if n_states is not None else (len(plant.feedback_order) if plant is not None else None)
        if n is None:
            raise ConfigError("FSF gain names need the plant")
        return tuple(f"K{j + 1}" for j in range(n))
    raise ConfigError(f"unknown controller kind {kind!r}")


@dataclass(frozen=True)
class ControllerSpec:
    kind: str
    gains: Dict[str, float]
    ranges: Dict[str, Tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown controller kind {self.kind!r}")
        for name, (lo, hi) in self.ranges.items():
            if not lo < hi:
                raise ConfigError(f"range for {name} must have min < max, got [{lo}, {hi}]")

    def vector(self, names) -> np.ndarray:
        try:
            return np.array([float(self.gains[n]) for n in names])
        except KeyError as exc:
            raise ConfigError(f"{self.kind} spec is missing gain {exc.args[0]}") from None

    def with_gains(self, gains: Mapping[str, float]) -> "ControllerSpec":
        return ControllerSpec(self.kind, dict(gains), dict(self.ranges))

    def with_ranges(self, ranges: Mapping[str, Tuple[float, float]]) -> "ControllerSpec":
        return ControllerSpec(self.kind, dict(self.gains), {k: tuple(v) for k, v in ranges.items()})

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "gains": dict(self.gains),
            "ranges": {k: [lo, hi] for k, (lo, hi) in self.ranges.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ControllerSpec":
        return cls(d["kind"], {k: float(v) for k, v in d["gains"].items()},
                   {k: (float(v[0]), float(v[1])) for k, v in d.get("ranges", {}).items()})


@dataclass(frozen=True)
class ControllerState:
    integral: float = 0.0
    deriv: float = 0.0
    prev_error: Optional[float] = None


def reset(spec: ControllerSpec) -> ControllerState:
    return ControllerState()


def make_law(spec: ControllerSpec, plant: PlantModel, dt: float, reference: float = 0.0):
    """Bind a spec to a plant and step size.

    The returned function maps (controller state, measurement) to
    (unsaturated command, next controller state).
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    reg = plant.regulated_index

    if spec.kind == "FSF":
        K = tuple(spec.vector(gain_names("FSF", plant)).tolist())
        terms = tuple(zip(K, plant.feedback_order))

        def fsf(cstate, y):
            u = 0.0
            for k, idx in terms:
                u -= k * (y[idx] - reference if idx == reg else y[idx])
            return u, cstate

        return fsf

    names = PID_GAINS[spec.kind]
    try:
        kp = float(spec.gains["Kp"])
        ki = float(spec.gains["Ki"]) if "Ki" in names else 0.0
        kd = float(spec.gains["Kd"]) if "Kd" in names else 0.0
    except KeyError as exc:
        raise ConfigError(f"{spec.kind} spec is missing gain {exc.args[0]}") from None
    bound = ANTI_WINDUP_FACTOR * plant.input_limit / abs(ki) if ki != 0.0 else math.inf
    N = DERIV_FILTER_N
    denom = 1.0 + N * dt

    def pid(cstate, y):
        e = reference - y[reg]
        prev = e if cstate.prev_error is None else cstate.prev_error
        integral = min(max(cstate.integral + e * dt, -bound), bound)
        # backward-Euler discretization of N s / (s + N)
        deriv = (cstate.deriv + N * (e - prev)) / denom
        u = kp * e
        if ki:
            u += ki * integral
        if kd:
            u += kd * deriv
        return u, ControllerState(integral, deriv, e)

    return pid


def control_output(
    spec: ControllerSpec,
    cstate: ControllerState,
    measurement,
    reference: float,
    dt: float,
    plant: PlantModel,
) -> Tuple[float, ControllerState]:
    """One controller update from a (possibly noisy) measurement.

    Returns the unsaturated command and the next controller state.
    """
    u, nxt = make_law(spec, plant, dt, reference)(cstate, [float(v) for v in measurement])
    return float(u), nxt


# search boxes per (kind, plant); anything missing raises
_DEFAULT_RANGES = {
    "dc_motor": {
        "P": {"Kp": (10.0, 60.0)},
        "PI": {"Kp": (10.0, 60.0), "Ki": (0.01, 15.0)},
        "PD": {"Kp": (10.0, 60.0), "Kd": (0.01, 15.0)},
        "PID": {"Kp": (10.0, 60.0), "Ki": (0.01, 20.0), "Kd": (0.01, 30.0)},
        "FSF": {"K1": (0.01, 10.0), "K2": (0.01, 100.0), "K3": (0.01, 200.0)},
    },
    "ball_beam": {
        "P": {"Kp": (0.01, 100.0)},
        "PI": {"Kp": (0.01, 100.0), "Ki": (0.01, 50.0)},
        "PD": {"Kp": (0.01, 100.0), "Kd": (0.01, 50.0)},
        "PID": {"Kp": (0.01, 100.0), "Ki": (0.01, 50.0), "Kd": (0.01, 50.0)},
        "FSF": {"K1": (0.01, 12.495), "K2": (0.01, 19.495), "K3": (0.01, 69.995), "K4": (0.01, 13.495)},
    },
    "pendulum": {
        "P": {"Kp": (2.0, 10.0)},
        "PI": {"Kp": (2.0, 10.0), "Ki": (0.5, 3.0)},
        "PD": {"Kp": (2.0, 10.0), "Kd": (0.05, 1.0)},
        "PID": {"Kp": (2.0, 10.0), "Ki": (0.5, 3.0), "Kd": (0.05, 1.0)},
        "FSF": {"K1": (1.0, 15.0), "K2": (0.1, 2.0)},
    },
    "double_pendulum": {
        "FSF": {"K1": (0.005, 1.0), "K2": (5.0, 20.0), "K3": (0.5, 3.0), "K4": (1.0, 3.0)},
    },
}


def default_ranges(kind: str, plant: PlantModel | str) -> Dict[str, Tuple[float, float]]:
    pid = plant if isinstance(plant, str) else plant.id
    try:
        return dict(_DEFAULT_RANGES[pid][kind])
    except KeyError:
        raise ConfigError(f"no default gain ranges for {kind} on {pid}") from None


def midpoint_spec(kind: str, plant: PlantModel, ranges=None) -> ControllerSpec:
    """Spec with every gain at the centre of its range."""
    ranges = dict(ranges or default_ranges(kind, plant))
    names = gain_names(kind, plant)
    missing = [n for n in names if n not in ranges]
    if missing:
        raise ConfigError(f"ranges missing for {missing}")
    gains = {n: 0.5 * (ranges[n][0] + ranges[n][1]) for n in names}
    return ControllerSpec(kind, gains, {n: tuple(ranges[n]) for n in names})


def clamp_gains(gains: Mapping[str, float], ranges: Mapping[str, Tuple[float, float]]):
    """Clamp gains into their ranges; returns (clamped, warnings)."""
    out, warnings = {}, []
    for name, v in gains.items():
        v = float(v)
        if name in ranges:
            lo, hi = ranges[name]
            c = min(max(v, lo), hi)
            if c != v or not math.isfinite(v):
                warnings.append(f"{name}={v:g} clamped to {c:g} (range [{lo:g}, {hi:g}])")
            v = c
        out[name] = v
    return out, warnings
