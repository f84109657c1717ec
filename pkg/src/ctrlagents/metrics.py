"""Step-response style metrics for regulation runs."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, Mapping

import numpy as np

from .simulator import Trajectory

SETTLING_BAND = 0.02
RISE_BAND = 0.10
BAND_FLOOR = 0.02  # absolute band used when the initial error is zero
SS_FRACTION = 0.05
STABLE_FRACTION = 0.1


@dataclass(frozen=True)
class TrajectoryMetrics:
    mse: float
    settling_time: float
    rise_time: float
    overshoot: float
    zero_crossings: int
    control_zero_crossings: int
    control_effort: float
    stable: bool
    ss_error: float

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, float) and not math.isfinite(v):
                d[k] = "inf" if v > 0 else ("-inf" if v < 0 else "nan")
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrajectoryMetrics":
        f = float  # also parses "inf"
        return cls(
            mse=f(d["mse"]),
            settling_time=f(d["settling_time"]),
            rise_time=f(d["rise_time"]),
            overshoot=f(d["overshoot"]),
            zero_crossings=int(d["zero_crossings"]),
            control_zero_crossings=int(d["control_zero_crossings"]),
            control_effort=f(d["control_effort"]),
            stable=bool(d["stable"]),
            ss_error=f(d["ss_error"]),
        )


@dataclass(frozen=True)
class Targets:
    mse: float
    settling_time: float
    overshoot: float

    def __post_init__(self):
        if not (self.mse > 0 and self.settling_time > 0 and self.overshoot > 0):
            raise ValueError("targets must be positive")


def sign_changes(x: np.ndarray) -> int:
    """Number of sign changes, ignoring exact zeros."""
    s = np.sign(np.asarray(x, dtype=float))
    s = s[s != 0]
    return int(np.count_nonzero(s[1:] != s[:-1]))


def _first_crossing(t: np.ndarray, a: np.ndarray, level: float) -> float:
    """Interpolated first time a falls to level or below."""
    idx = np.flatnonzero(a <= level)
    if idx.size == 0:
        return math.inf
    k = int(idx[0])
    if k == 0:
        return float(t[0])
    a0, a1 = a[k - 1], a[k]
    return float(t[k - 1] + (t[k] - t[k - 1]) * (a0 - level) / (a0 - a1))


def _settling(t: np.ndarray, a: np.ndarray, level: float) -> float:
    """Interpolated time after which a stays at or below level."""
    out = np.flatnonzero(a > level)
    if out.size == 0:
        return float(t[0])
    k = int(out[-1])
    if k == len(a) - 1:
        return math.inf
    a0, a1 = a[k], a[k + 1]
    return float(t[k] + (t[k + 1] - t[k]) * (a0 - level) / (a0 - a1))


def compute_metrics(traj: Trajectory) -> TrajectoryMetrics:
    t, e, u = traj.t, np.asarray(traj.e, dtype=float), np.asarray(traj.u, dtype=float)
    if e.size == 0:
        raise ValueError("empty trajectory")
    a = np.abs(e)
    e0 = float(e[0])
    scale = abs(e0) if abs(e0) >= 1e-9 else BAND_FLOOR / SETTLING_BAND

    mse = float(np.mean(e * e))
    ts = _settling(t, a, SETTLING_BAND * scale)
    tr = _first_crossing(t, a, RISE_BAND * scale)
    past = -e * np.sign(e0) if abs(e0) >= 1e-9 else a
    mp = 100.0 * max(0.0, float(np.max(past))) / scale
    n_ss = max(1, int(math.ceil(SS_FRACTION * e.size)))
    e_ss = float(np.mean(a[-n_ss:]))
    ce = float(np.trapezoid(np.abs(u), t)) if e.size > 1 else 0.0
    stable = (not traj.diverged) and e_ss <= STABLE_FRACTION * max(abs(e0), BAND_FLOOR)
    return TrajectoryMetrics(
        mse=mse,
        settling_time=ts,
        rise_time=tr,
        overshoot=mp,
        zero_crossings=sign_changes(e),
        control_zero_crossings=sign_changes(u),
        control_effort=ce,
        stable=bool(stable),
        ss_error=e_ss,
    )


def meets_targets(m: TrajectoryMetrics, targets: Targets) -> Dict[str, bool]:
    ok = m.stable
    return {
        "mse": ok and m.mse <= targets.mse,
        "settling_time": ok and m.settling_time <= targets.settling_time,
        "overshoot": ok and m.overshoot <= targets.overshoot,
    }


def fmt_seconds(v: float, digits: int = 2) -> str:
    return "inf" if math.isinf(v) else f"{v:.{digits}f}"
