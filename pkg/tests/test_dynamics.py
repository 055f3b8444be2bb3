import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from uavrl import dynamics as dyn
from uavrl.dynamics import DEG


def random_state(rng, altitude=150.0):
    """State drawn from the episode initial-condition envelope."""
    va = rng.uniform(13.0, 26.0)
    alpha = rng.uniform(-8.0, 8.0) * DEG
    beta = rng.uniform(-10.0, 10.0) * DEG
    u = va * math.cos(alpha) * math.cos(beta)
    v = va * math.sin(beta)
    w = va * math.sin(alpha) * math.cos(beta)
    return dyn.SimState.from_components(
        [0.0, 0.0, -altitude],
        [rng.uniform(-40, 40) * DEG, rng.uniform(-15, 15) * DEG, rng.uniform(-np.pi, np.pi)],
        [u, v, w],
        rng.uniform(-60, 60, 3) * DEG,
    )


# ---------------------------------------------------------------- coefficients

def test_zero_input_coefficients_equal_static_terms(nominal):
    s = dyn.SimState.from_components([0, 0, -150], [0, 0, 0], [18.0, 0, 0], [0, 0, 0])
    c = dyn.aero_coefficients(s, (0.0, 0.0, 0.0), np.zeros(3), nominal)
    assert c.CL == pytest.approx(nominal.CL0, abs=1e-15)
    assert c.CD == pytest.approx(nominal.CD0, abs=1e-15)
    assert c.CY == pytest.approx(nominal.CY0, abs=1e-15)
    assert c.Cl == pytest.approx(nominal.Cl0, abs=1e-15)
    assert c.Cm == pytest.approx(nominal.Cm0, abs=1e-15)
    assert c.Cn == pytest.approx(nominal.Cn0, abs=1e-15)


def test_coefficient_term_sums_against_oracle(nominal, rng):
    """Independent literal recomputation of every coefficient sum."""
    p = nominal
    for _ in range(50):
        s = random_state(rng)
        dr, dl = rng.uniform(-0.5, 0.5, 2)
        wind = rng.uniform(-5, 5, 3)
        va, alpha, beta = dyn.air_data(s, wind)
        de = 0.5 * (dl + dr)
        da = 0.5 * (dl - dr)
        pb, qb, rb = s.rates
        b2v = p.b / (2 * va)
        c2v = p.c / (2 * va)
        c = dyn.aero_coefficients(s, (dr, dl, 0.5), wind, p)
        assert c.CL == pytest.approx(
            p.CL0 + p.CL_alpha * alpha + p.CL_q * c2v * qb + p.CL_de * de, rel=1e-12)
        assert c.CD == pytest.approx(
            p.CD0 + p.CD_alpha * alpha + p.CD_de * de, rel=1e-12)
        assert c.CY == pytest.approx(
            p.CY0 + p.CY_beta * beta + p.CY_p * b2v * pb + p.CY_r * b2v * rb
            + p.CY_da * da, rel=1e-12)
        assert c.Cl == pytest.approx(
            p.Cl0 + p.Cl_beta * beta + p.Cl_p * b2v * pb + p.Cl_r * b2v * rb
            + p.Cl_da * da, rel=1e-12)
        assert c.Cm == pytest.approx(
            p.Cm0 + p.Cm_alpha * alpha + p.Cm_q * c2v * qb + p.Cm_de * de, rel=1e-12)
        assert c.Cn == pytest.approx(
            p.Cn0 + p.Cn_beta * beta + p.Cn_p * b2v * pb + p.Cn_r * b2v * rb
            + p.Cn_da * da, rel=1e-12)


def test_coefficient_spot_value(nominal):
    # frozen spot check: Va=18 along x, alpha=beta=0, q=0.1, de=0.05
    s = dyn.SimState.from_components([0, 0, -150], [0, 0, 0], [18.0, 0, 0], [0, 0.1, 0])
    c = dyn.aero_coefficients(s, (0.05, 0.05, 0.0), np.zeros(3), nominal)
    expected_cl = 0.10 + 3.90 * (0.3571 / 36.0) * 0.1 + 0.30 * 0.05
    assert c.CL == pytest.approx(expected_cl, rel=1e-14)
    expected_cm = 0.0305 - 3.60 * (0.3571 / 36.0) * 0.1 - 0.45 * 0.05
    assert c.Cm == pytest.approx(expected_cm, rel=1e-14)


def test_lateral_antisymmetry(nominal, rng):
    """Mirroring beta, p, r, delta_a negates CY, Cl, Cn and keeps CL, CD, Cm."""
    for _ in range(100):
        s = random_state(rng)
        dr, dl = rng.uniform(-0.5, 0.5, 2)
        c = dyn.aero_coefficients(s, (dr, dl, 0.3), np.zeros(3), nominal)
        m = s.copy()
        m.vec[dyn.V] = -s.vec[dyn.V]
        m.vec[dyn.P] = -s.vec[dyn.P]
        m.vec[dyn.R] = -s.vec[dyn.R]
        cm = dyn.aero_coefficients(m, (dl, dr, 0.3), np.zeros(3), nominal)
        assert cm.CY == pytest.approx(-c.CY, abs=1e-12)
        assert cm.Cl == pytest.approx(-c.Cl, abs=1e-12)
        assert cm.Cn == pytest.approx(-c.Cn, abs=1e-12)
        assert cm.CL == pytest.approx(c.CL, rel=1e-12)
        assert cm.CD == pytest.approx(c.CD, rel=1e-12)
        assert cm.Cm == pytest.approx(c.Cm, rel=1e-12)


def test_degenerate_airspeed_raises(nominal):
    s = dyn.SimState.from_components([0, 0, -150], [0, 0, 0], [0.05, 0, 0], [0, 0, 0])
    with pytest.raises(dyn.DegenerateAirspeedError):
        dyn.aero_coefficients(s, (0, 0, 0), np.zeros(3), nominal)


# ----------------------------------------------------------------- derivatives

def test_gravity_only_accelerations(nominal, rng):
    """With aero and thrust removed only gravity projects into the body frame."""
    p = nominal.replace(rho=0.0, ct1=0.0, ct2=0.0, k_torque=0.0)
    g = p.g
    for _ in range(25):
        phi = rng.uniform(-1.2, 1.2)
        theta = rng.uniform(-1.2, 1.2)
        s = dyn.SimState.from_components(
            [0, 0, -150], [phi, theta, rng.uniform(-np.pi, np.pi)], [18.0, 0, 0], [0, 0, 0])
        d = dyn.derivatives(s, p, (0, 0, 0), np.zeros(3))
        assert d[dyn.U] == pytest.approx(-g * math.sin(theta), abs=1e-12)
        assert d[dyn.V] == pytest.approx(g * math.sin(phi) * math.cos(theta), abs=1e-12)
        assert d[dyn.W] == pytest.approx(g * math.cos(phi) * math.cos(theta), abs=1e-12)
        assert np.allclose(d[dyn.P:dyn.R + 1], 0.0, atol=1e-15)


def test_derivatives_regression(nominal):
    """Frozen full-state derivative at one fixed flight condition."""
    s = dyn.SimState([10.0, -5.0, -120.0, 0.20, 0.05, 1.10,
                      17.0, 1.0, 1.5, 0.30, -0.20, 0.10])
    d = dyn.derivatives(s, nominal, (0.10, 0.02, 0.60), (2.0, -1.0, 0.5))
    expected = np.array([
        7.131469555822575, 15.515301841059667, 0.817037792997545,
        0.30291607004473237, -0.21588024864775446, 0.05834570856789297,
        0.9935743864012607, -1.1002075993630565, -4.091894318679456,
        -8.709314222395188, -0.05363572584356188, 1.367963894123558,
    ])
    np.testing.assert_allclose(d, expected, rtol=1e-12)


def test_euler_singularity_raises(nominal):
    s = dyn.SimState.from_components([0, 0, -150], [0, 89.5 * DEG, 0], [18, 0, 0], [0, 0, 0])
    with pytest.raises(dyn.EulerSingularityError):
        dyn.derivatives(s, nominal, (0, 0, 0.5), np.zeros(3))


def test_rk4_energy_conservation(nominal):
    """Gravity-only flight conserves mechanical energy to 1e-6 over 10 s."""
    p = nominal.replace(rho=0.0, ct1=0.0, ct2=0.0, k_torque=0.0)
    s = dyn.SimState.from_components([0, 0, -500], [0.3, -0.2, 1.0], [15, 1, 2], [0.4, -0.3, 0.2])
    act = dyn.ActuatorState(initial=(0, 0, 0))
    e0 = dyn.total_energy(s, p)
    for _ in range(500):
        s = dyn.step(s, p, act, np.zeros(3), 0.02)
    assert abs(dyn.total_energy(s, p) - e0) / abs(e0) < 1e-6


def test_rk4_fourth_order_convergence(nominal, trim18):
    """Halving dt shrinks the propagation error by about 2^4."""
    p = nominal

    def propagate(dt, t_end=1.0):
        s = trim18.state()
        s.vec[dyn.P] = 0.3  # off-trim so the trajectory is nontrivial
        s.vec[dyn.Q] = -0.2
        act = dyn.ActuatorState(delay=0.0, rate_limit=1e9, initial=trim18.command())
        n = round(t_end / dt)
        for _ in range(n):
            s = dyn.step(s, p, act, np.zeros(3), dt)
        return s.vec

    ref = propagate(0.0025)
    err1 = np.linalg.norm(propagate(0.02) - ref)
    err2 = np.linalg.norm(propagate(0.01) - ref)
    assert 10.0 < err1 / err2 < 30.0


# ------------------------------------------------------------------- actuators

def test_delay_exactness(rng):
    """With the rate limit effectively off, applied(t) == commanded(t - delay)."""
    act = dyn.ActuatorState(delay=0.1, rate_limit=1e9, initial=(0.01, -0.02, 0.5))
    cmds = [np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0, 1)])
            for _ in range(40)]
    applied = []
    for cmd in cmds:
        act.push(cmd)
        applied.append(act.advance(0.02).copy())
    for k in range(40):
        if k < 5:
            np.testing.assert_allclose(applied[k], [0.01, -0.02, 0.5])
        else:
            np.testing.assert_allclose(applied[k], cmds[k - 5])


def test_delay_with_rate_limit_matches_oracle(rng):
    """applied == rate-limited version of the 5-step-delayed command sequence."""
    limit = 30 * DEG
    rate = 200 * DEG
    init = np.array([0.1, -0.1, 0.4])
    act = dyn.ActuatorState(delay=0.1, rate_limit=rate, initial=init)
    cmds = [np.array([rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), rng.uniform(0, 1)])
            for _ in range(60)]
    applied = []
    for cmd in cmds:
        act.push(cmd)
        applied.append(act.advance(0.02).copy())

    # independent oracle: delay the clipped command stream, then slew
    clipped = [np.array([np.clip(c[0], -limit, limit), np.clip(c[1], -limit, limit),
                         np.clip(c[2], 0, 1)]) for c in cmds]
    state = init.copy()
    for k in range(60):
        tgt = clipped[k - 5] if k >= 5 else init
        for i in (0, 1):
            stepmax = rate * 0.02
            state[i] += np.clip(tgt[i] - state[i], -stepmax, stepmax)
        state[2] = tgt[2]
        np.testing.assert_allclose(applied[k], state, atol=1e-15)


def test_zero_delay_applies_immediately():
    act = dyn.ActuatorState(delay=0.0, rate_limit=1e9, initial=(0, 0, 0))
    act.push((0.2, -0.2, 0.7))
    out = act.advance(0.02)
    np.testing.assert_allclose(out, [0.2, -0.2, 0.7])


def test_position_saturation():
    act = dyn.ActuatorState(delay=0.0, rate_limit=1e9, initial=(0, 0, 0))
    act.push((1.0, -1.0, 2.0))
    out = act.advance(0.02)
    assert out[0] == pytest.approx(30 * DEG)
    assert out[1] == pytest.approx(-30 * DEG)
    assert out[2] == 1.0


# ------------------------------------------------------------------ elevon map

def test_elevon_map_example():
    dl, dr = dyn.elevon_map(0.1, 0.05)
    assert dl == pytest.approx(0.15)
    assert dr == pytest.approx(0.05)


@given(st.floats(-0.6, 0.6), st.floats(-0.6, 0.6))
def test_elevon_map_round_trip(de, da):
    dl, dr = dyn.elevon_map(de, da)
    de2, da2 = dyn.inverse_elevon_map(dl, dr)
    assert math.isclose(de, de2, abs_tol=1e-12)
    assert math.isclose(da, da2, abs_tol=1e-12)


@given(st.floats(-0.6, 0.6), st.floats(-0.6, 0.6))
def test_inverse_elevon_round_trip(dl, dr):
    de, da = dyn.inverse_elevon_map(dl, dr)
    dl2, dr2 = dyn.elevon_map(de, da)
    assert math.isclose(dl, dl2, abs_tol=1e-12)
    assert math.isclose(dr, dr2, abs_tol=1e-12)


# ------------------------------------------------------------------------ trim

def test_trim_nominal(nominal, trim18):
    assert trim18.residual < 1e-6
    assert 0.015 <= trim18.elevon <= 0.075


def test_trim_residual_all_speeds(nominal):
    for va in (13.0, 26.0):
        tp = dyn.trim(nominal, va)
        assert tp.residual < 1e-6


def test_trim_monotone_in_airspeed(nominal):
    # statically stable airframe, thrust through the CG: elevon grows with Va
    elevons = [dyn.trim(nominal, va).elevon for va in (13.0, 16.0, 18.0, 22.0, 26.0)]
    assert all(b > a for a, b in zip(elevons, elevons[1:]))


def test_trim_is_fixed_point_without_prop_torque(nominal):
    p = nominal.replace(k_torque=0.0)
    tp = dyn.trim(p, 18.0)
    s = tp.state()
    ref = tp.state()
    act = dyn.ActuatorState(initial=tp.command())
    for _ in range(50):
        act.push(tp.command())
        s = dyn.step(s, p, act, np.zeros(3), 0.02)
    # position advances along the track; everything else must hold
    assert np.max(np.abs(s.vec[dyn.PD:] - ref.vec[dyn.PD:])) < 1e-4


def test_trim_derivatives_vanish_without_prop_torque(nominal):
    p = nominal.replace(k_torque=0.0)
    tp = dyn.trim(p, 18.0)
    d = dyn.derivatives(tp.state(), p, tp.command(), np.zeros(3))
    assert np.max(np.abs(d[dyn.PD:])) < 1e-6


def test_trim_zero_gravity_symmetric(nominal):
    """No lift needed: alpha = 0 and the elevon just cancels Cm0."""
    p = nominal.replace(g=0.0, CL0=0.0, CL_de=0.0, Cm0=0.02, k_torque=0.0)
    tp = dyn.trim(p, 18.0)
    assert tp.alpha == pytest.approx(0.0, abs=1e-9)
    assert tp.elevon == pytest.approx(-p.Cm0 / p.Cm_de, abs=1e-9)


def test_trim_lateral_residual_reflects_prop_torque(nominal):
    tp = dyn.trim(nominal, 18.0)
    assert tp.lateral_residual > 0.1  # reaction torque leaves a roll imbalance
    tp0 = dyn.trim(nominal.replace(k_torque=0.0), 18.0)
    assert tp0.lateral_residual < 1e-9


# ------------------------------------------------------------------ parameters

def test_params_file_round_trip(nominal, tmp_path):
    path = tmp_path / "params.txt"
    dyn.save_params(nominal, path)
    again = dyn.load_params(path)
    assert again == nominal


def test_params_unknown_key_rejected():
    text = f"schema = {dyn.PARAMS_SCHEMA}\nbogus = 1.0\n"
    with pytest.raises(ValueError, match="unknown keys"):
        dyn.parse_params(text)


def test_params_missing_key_rejected(nominal):
    text = dyn.serialize_params(nominal)
    text = "\n".join(line for line in text.splitlines() if not line.startswith("mass"))
    with pytest.raises(ValueError, match="missing keys"):
        dyn.parse_params(text)


def test_params_wrong_schema_rejected():
    with pytest.raises(ValueError, match="schema"):
        dyn.parse_params("schema = nope-v0\n")


def test_params_validation_errors(nominal):
    with pytest.raises(ValueError, match="mass"):
        nominal.replace(mass=-1.0).validate()
    with pytest.raises(ValueError, match="Cm_q"):
        nominal.replace(Cm_q=0.5).validate()
    with pytest.raises(ValueError, match="Cl_p"):
        nominal.replace(Cl_p=0.1).validate()
    with pytest.raises(ValueError, match="positive definite"):
        nominal.replace(Jxz=5.0).validate()


def test_state_vector_round_trip(rng):
    vec = rng.normal(size=12)
    s = dyn.SimState(vec)
    np.testing.assert_array_equal(s.vec, vec)
    s2 = dyn.SimState.from_components(s.pos, s.att, s.vel, s.rates)
    np.testing.assert_array_equal(s2.vec, vec)
