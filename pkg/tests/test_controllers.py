import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctrlagents.controllers import (
    ANTI_WINDUP_FACTOR,
    DERIV_FILTER_N,
    ConfigError,
    ControllerSpec,
    ControllerState,
    clamp_gains,
    control_output,
    default_ranges,
    gain_names,
    make_law,
    midpoint_spec,
)
from ctrlagents.plants import PLANT_IDS, make_plant


def test_gain_names():
    assert gain_names("PID") == ("Kp", "Ki", "Kd")
    assert gain_names("FSF", make_plant("double_pendulum")) == ("K1", "K2", "K3", "K4")
    with pytest.raises(ConfigError):
        gain_names("FSF")
    with pytest.raises(ConfigError):
        gain_names("LQG")


def test_spec_validation_and_round_trip():
    with pytest.raises(ConfigError):
        ControllerSpec("P", {"Kp": 1.0}, {"Kp": (2.0, 1.0)})
    spec = ControllerSpec("PI", {"Kp": 1.0, "Ki": 0.5}, {"Kp": (0.0, 2.0), "Ki": (0.0, 1.0)})
    assert ControllerSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ConfigError):
        make_law(ControllerSpec("PI", {"Kp": 1.0}), make_plant("dc_motor"), 0.01)


def test_integrator_is_clamped_by_anti_windup():
    plant = make_plant("dc_motor")
    spec = ControllerSpec("PI", {"Kp": 0.0, "Ki": 3.0})
    law = make_law(spec, plant, 0.01, reference=1000.0)
    cs = ControllerState()
    y = [0.0, 0.0, 0.0]
    for _ in range(5000):
        u, cs = law(cs, y)
    assert abs(spec.gains["Ki"] * cs.integral) == pytest.approx(ANTI_WINDUP_FACTOR * plant.input_limit)
    assert u == pytest.approx(ANTI_WINDUP_FACTOR * plant.input_limit)


def test_dirty_derivative_matches_filtered_step_response():
    plant = make_plant("pendulum")
    dt = 0.001
    law = make_law(ControllerSpec("PD", {"Kp": 0.0, "Kd": 1.0}), plant, dt)
    cs = ControllerState()
    u0, cs = law(cs, [0.0, 0.0])
    assert u0 == 0.0  # no derivative kick on the first sample
    outs = []
    for _ in range(200):
        u, cs = law(cs, [-1.0, 0.0])  # error steps from 0 to 1
        outs.append(u)
    a = 1.0 / (1.0 + DERIV_FILTER_N * dt)
    expected = DERIV_FILTER_N * a * a ** np.arange(200)
    np.testing.assert_allclose(outs, expected, rtol=1e-12)


def test_dirty_derivative_tracks_a_ramp():
    plant = make_plant("pendulum")
    dt = 0.01
    law = make_law(ControllerSpec("PD", {"Kp": 0.0, "Kd": 1.0}), plant, dt)
    cs = ControllerState()
    for k in range(400):
        u, cs = law(cs, [-0.3 * k * dt, 0.0])
    assert u == pytest.approx(0.3, rel=1e-6)


def test_state_feedback_uses_feedback_order_and_reference():
    plant = make_plant("double_pendulum")
    spec = ControllerSpec("FSF", {"K1": 1.0, "K2": 10.0, "K3": 100.0, "K4": 1000.0})
    x = [0.1, 0.2, 0.3, 0.4]  # theta1, dtheta1, theta2, dtheta2
    u, _ = control_output(spec, ControllerState(), x, 0.05, 0.01, plant)
    assert u == pytest.approx(-(1.0 * (0.1 - 0.05) + 10.0 * 0.3 + 100.0 * 0.2 + 1000.0 * 0.4))


@pytest.mark.parametrize("plant_id", PLANT_IDS)
def test_default_ranges_cover_every_gain(plant_id):
    plant = make_plant(plant_id)
    for kind in ("P", "PID", "FSF"):
        try:
            r = default_ranges(kind, plant)
        except ConfigError:
            continue
        spec = midpoint_spec(kind, plant, r)
        assert set(spec.gains) == set(gain_names(kind, plant))


ranges_st = st.dictionaries(
    st.sampled_from(["Kp", "Ki", "Kd"]),
    st.tuples(st.floats(-100, 100), st.floats(0.001, 100)).map(lambda t: (t[0], t[0] + t[1])),
    min_size=1,
)


@given(ranges_st, st.floats(allow_nan=False, allow_infinity=True, width=64))
def test_clamp_gains_lands_in_range_and_is_idempotent(ranges, v):
    gains = {n: v for n in ranges}
    out, warns = clamp_gains(gains, ranges)
    for n, (lo, hi) in ranges.items():
        assert lo <= out[n] <= hi
    again, warns2 = clamp_gains(out, ranges)
    assert again == out and warns2 == []
    assert bool(warns) == any(out[n] != v for n in ranges)


def test_clamp_gains_passes_unknown_names_through():
    out, warns = clamp_gains({"Kx": 5.0}, {"Kp": (0.0, 1.0)})
    assert out == {"Kx": 5.0} and warns == []


def test_non_finite_measurement_does_not_raise():
    plant = make_plant("pendulum")
    u, _ = control_output(ControllerSpec("P", {"Kp": 1.0}), ControllerState(), [math.inf, 0.0], 0.0, 0.01, plant)
    assert u == -math.inf
