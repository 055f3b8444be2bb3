import math

import numpy as np
import pytest

from uavrl import dynamics as dyn
from uavrl import pid
from uavrl.dynamics import DEG
from uavrl.pid import (
    DEFAULT_TARGETS, MIN_PID_AIRSPEED, PidGains, PidState, calibrate_gains,
    coordinated_turn_rate, load_gains, pid_step, save_gains, static_response,
)


def level_state(phi=0.0, theta=0.0, p=0.0, q=0.0, r=0.0):
    return dyn.SimState.from_components([0, 0, -100], [phi, theta, 0.0],
                                        [18.0, 0, 0], [p, q, r])


# ----------------------------------------------------------- control laws

def test_zero_error_zero_output():
    gains = PidGains()
    da, de = static_response(gains)
    assert da == 0.0 and de == 0.0
    out = pid_step(gains, (0.0, 0.0), level_state(), 18.0, 0.02, PidState())
    assert out == (0.0, 0.0, 0.0, 0.0)


def test_elevon_map_consistency_before_saturation():
    gains = PidGains()
    pstate = PidState()
    da, de, dl, dr = pid_step(gains, (0.05, -0.03), level_state(phi=0.02),
                              18.0, 0.02, pstate)
    assert abs(dl) < 30 * DEG and abs(dr) < 30 * DEG
    assert dl == pytest.approx(de + da, abs=1e-15)
    assert dr == pytest.approx(de - da, abs=1e-15)


def test_saturation_applies_to_surfaces():
    gains = PidGains()
    da, de, dl, dr = pid_step(gains, (1.0, 0.0), level_state(), 18.0, 0.02,
                              PidState())
    # huge roll error: the aileron component alone exceeds the surface limit
    assert abs(da) > 30 * DEG
    assert abs(dl) <= 30 * DEG + 1e-15 and abs(dr) <= 30 * DEG + 1e-15


def test_coordinated_turn_zero_at_level():
    for textbook in (False, True):
        assert coordinated_turn_rate(0.0, 0.2, 18.0, 9.81, textbook) == 0.0


def test_coordinated_turn_variants_differ_in_bank():
    phi, theta, va, g = 0.5, 0.1, 18.0, 9.81
    base = coordinated_turn_rate(phi, theta, va, g, textbook=False)
    textbook = coordinated_turn_rate(phi, theta, va, g, textbook=True)
    assert base == pytest.approx(math.sin(phi) * math.cos(theta) * (g / va) * math.tan(phi))
    assert textbook == pytest.approx((g / va) * math.tan(phi))
    assert base != textbook
    # the damped variant stays below the textbook rate at moderate bank
    assert abs(base) < abs(textbook)


def test_airspeed_scaling_quadratic_on_proportional_path():
    # pure rate error isolates the nu^2 p-term: halving Va quadruples output
    gains = PidGains(k_ffp=0.0, k_ffq=0.0)
    da_full, _ = static_response(gains, p=-1.0, va=18.0)
    da_half, _ = static_response(gains, p=-1.0, va=9.0)
    assert da_half == pytest.approx(4.0 * da_full, rel=1e-12)
    # feedforward path scales linearly
    gains_ff = PidGains(k_pp=0.0, k_pq=0.0, k_ip=0.0, k_iq=0.0)
    da_full, _ = static_response(gains_ff, e_roll=0.1, va=18.0)
    da_half, _ = static_response(gains_ff, e_roll=0.1, va=9.0)
    assert da_half == pytest.approx(2.0 * da_full, rel=1e-12)


def test_integrator_grows_linearly_and_clamps():
    gains = PidGains()
    pstate = PidState(clamp=0.01)
    state = level_state(p=-0.1)  # constant rate error, no angle error
    increments = []
    prev = 0.0
    for _ in range(5):
        pid_step(gains, (0.0, 0.0), state, 18.0, 0.02, pstate)
        increments.append(pstate.integ_p - prev)
        prev = pstate.integ_p
    assert np.allclose(increments, increments[0], rtol=1e-12)
    assert increments[0] == pytest.approx(gains.k_ip * 0.1 * 0.02, rel=1e-12)
    for _ in range(2000):
        pid_step(gains, (0.0, 0.0), state, 18.0, 0.02, pstate)
    assert pstate.integ_p == 0.01


def test_degenerate_airspeed_raises():
    with pytest.raises(dyn.DegenerateAirspeedError):
        pid_step(PidGains(), (0.0, 0.0), level_state(), MIN_PID_AIRSPEED / 2,
                 0.02, PidState())


def test_pid_step_matches_static_response_single_step():
    # after one step from rest, the live controller equals the static map with
    # the integrator contribution it just accumulated
    gains = PidGains()
    pstate = PidState()
    refs = (0.08, -0.04)
    state = level_state(phi=0.01, theta=0.02, p=0.3, q=-0.1)
    da, de, _, _ = pid_step(gains, refs, state, 18.0, 0.02, pstate)
    nu = 1.0
    e_roll = refs[0] - state.phi
    e_pitch = refs[1] - state.theta
    int_roll = pstate.integ_p / (gains.k_ip * nu * nu * gains.k_phi)
    int_pitch = pstate.integ_q / (gains.k_iq * nu * nu * gains.k_theta)
    da2, de2 = static_response(gains, e_roll, e_pitch, state.rates[0],
                               state.rates[1], int_roll, int_pitch,
                               phi=state.phi, theta=state.theta)
    assert da == pytest.approx(da2, rel=1e-12)
    assert de == pytest.approx(de2, rel=1e-12)


# ------------------------------------------------------------- calibration

def finite_difference_partials(gains, textbook_turn=False, h=1e-6):
    """Central differences of the static map at the level anchor."""
    def f(**kw):
        return static_response(gains, textbook_turn=textbook_turn, **kw)

    out = {}
    for key, arg, idx in (
        ("da_de_roll", "e_roll", 0), ("de_de_pitch", "e_pitch", 1),
        ("da_dp", "p", 0), ("de_dq", "q", 1),
        ("da_dint_roll", "int_roll", 0), ("de_dint_pitch", "int_pitch", 1),
    ):
        hi = f(**{arg: h})[idx]
        lo = f(**{arg: -h})[idx]
        out[key] = (hi - lo) / (2 * h)
    return out


@pytest.mark.parametrize("textbook_turn", [False, True])
def test_calibrated_partials_match_targets(textbook_turn):
    gains, residuals = calibrate_gains()
    assert all(abs(r) < 1e-12 for r in residuals.values())
    got = finite_difference_partials(gains, textbook_turn)
    for key, want in DEFAULT_TARGETS.items():
        assert abs(got[key] - want) < 1e-3, (key, got[key], want)


def test_default_gains_are_the_calibrated_ones():
    gains, _ = calibrate_gains()
    assert gains == PidGains()


def test_calibration_with_custom_targets():
    targets = {"da_de_roll": 2.0, "de_de_pitch": -1.0, "da_dp": -0.05,
               "de_dq": 0.04, "da_dint_roll": 0.09, "de_dint_pitch": -0.06}
    gains, residuals = calibrate_gains(targets, k_phi=2.0, k_theta=4.0)
    assert all(abs(r) < 1e-12 for r in residuals.values())
    got = finite_difference_partials(gains)
    for key, want in targets.items():
        assert abs(got[key] - want) < 1e-3


def test_all_zero_targets_give_zero_gains():
    targets = dict.fromkeys(DEFAULT_TARGETS, 0.0)
    gains, residuals = calibrate_gains(targets, k_phi=0.0, k_theta=0.0)
    for name in ("k_phi", "k_theta", "k_pp", "k_ip", "k_ffp", "k_pq", "k_iq", "k_ffq"):
        assert getattr(gains, name) == 0.0
    assert all(r == 0.0 for r in residuals.values())


def test_zero_outer_gain_with_nonzero_targets_rejected():
    with pytest.raises(ValueError, match="k_phi"):
        calibrate_gains(k_phi=0.0)


def test_infeasible_targets_rejected():
    # a rate slope steeper than the total error slope forces k_ff < 0
    targets = dict(DEFAULT_TARGETS)
    targets["da_dp"] = -2.0
    with pytest.raises(ValueError, match="infeasible"):
        calibrate_gains(targets)


def test_validate_rejects_negative_gains():
    with pytest.raises(ValueError, match="k_pp"):
        PidGains(k_pp=-0.1).validate()


# ------------------------------------------------------------- persistence

def test_gains_file_round_trip(tmp_path):
    gains, _ = calibrate_gains(k_phi=2.5, k_theta=3.5)
    path = tmp_path / "gains.txt"
    save_gains(gains, path)
    assert load_gains(path) == gains


def test_gains_file_rejects_unknown_and_missing(tmp_path):
    path = tmp_path / "gains.txt"
    save_gains(PidGains(), path)
    text = path.read_text()
    (tmp_path / "extra.txt").write_text(text + "k_bogus = 1.0\n")
    with pytest.raises(ValueError, match="unknown gain"):
        load_gains(tmp_path / "extra.txt")
    short = "\n".join(text.splitlines()[:-2]) + "\n"
    (tmp_path / "short.txt").write_text(short)
    with pytest.raises(ValueError, match="missing gains"):
        load_gains(tmp_path / "short.txt")
    (tmp_path / "bad.txt").write_text("schema = other\n" + text.split("\n", 1)[1])
    with pytest.raises(ValueError, match="unsupported"):
        load_gains(tmp_path / "bad.txt")


# ------------------------------------------------------------- closed loop

def test_roll_step_converges_in_sim(nominal):
    """20-degree roll step on the nominal airframe settles within a degree."""
    gains = PidGains()
    pstate = PidState()
    trim = dyn.trim(nominal, 18.0)
    state = trim.state(150.0)
    act = dyn.ActuatorState(delay=0.0, rate_limit=200 * DEG,
                            elevon_limit=30 * DEG, initial=trim.command())
    refs = (20.0 * DEG, trim.theta)
    wind = np.zeros(3)
    dt = 0.02
    for _ in range(400):  # 8 seconds
        va, _, _ = dyn.air_data(state, wind)
        _, _, dl, dr = pid_step(gains, refs, state, va, dt, pstate)
        act.push((dr, dl, trim.throttle))
        state = dyn.step(state, nominal, act, wind, dt)
    assert abs(state.phi - refs[0]) < 1.0 * DEG
    assert abs(state.rates[0]) < 2.0 * DEG
