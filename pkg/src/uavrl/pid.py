"""Cascaded attitude PID baseline (outer angle loop, inner rate PI+FF loop).

Control laws, with nu = V*/Va the airspeed scaling and e the tracking error
(reference minus state):

    p_r = k_phi (phi_r - phi)
    q_r = k_theta (theta_r - theta) + q_ct
    da  =  k_pp nu^2 (p_r - p) + integral[k_ip nu^2 (p_r - p)] + k_ffp nu p_r
    de  = -(k_pq nu^2 (q_r - q) + integral[k_iq nu^2 (q_r - q)] + k_ffq nu q_r)

and the elevons are delta_l = de + da, delta_r = de - da, saturated after the
map. The pitch-rate offset q_ct = sin(phi) cos(theta) (g/Va) tan(phi) keeps
the nose up in turns; a config switch selects the textbook coordinated-turn
form (g/Va) tan(phi) instead.

The published sensitivity set at Va = V* = 18 constrains only gain products,
so calibrate_gains fixes the outer gains at 3.0 and lets the feedforward
terms carry the remainder of the error-to-surface slope.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

from .dynamics import DEG, DegenerateAirspeedError, elevon_map

GAINS_SCHEMA = "pid-gains-v1"
MIN_PID_AIRSPEED = 1.0

# numerical partials of the surface commands w.r.t. tracking error, rate and
# integrated error channels at level flight, Va = V* (the calibration targets)
DEFAULT_TARGETS = {
    "da_de_roll": 1.6299,
    "de_de_pitch": -1.0813,
    "da_dp": -0.0243,
    "de_dq": 0.0312,
    "da_dint_roll": 0.0521,
    "de_dint_pitch": -0.0521,
}


@dataclass
class PidGains:
    k_phi: float = 3.0
    k_theta: float = 3.0
    k_pp: float = 0.0243
    k_ip: float = 0.0521 / 3.0
    k_ffp: float = 1.6299 / 3.0 - 0.0243
    k_pq: float = 0.0312
    k_iq: float = 0.0521 / 3.0
    k_ffq: float = 1.0813 / 3.0 - 0.0312
    va_star: float = 18.0
    g: float = 9.81

    def validate(self) -> None:
        bad = [f.name for f in fields(self) if getattr(self, f.name) < 0]
        if self.va_star <= 0:
            bad.append("va_star (must be > 0)")
        if bad:
            raise ValueError(f"invalid PID gains: {', '.join(bad)}")


class PidState:
    """Inner-loop integrator accumulators with symmetric anti-windup clamps."""

    def __init__(self, clamp: float = 0.5236):
        self.clamp = clamp
        self.integ_p = 0.0
        self.integ_q = 0.0

    def reset(self) -> None:
        self.integ_p = 0.0
        self.integ_q = 0.0


def coordinated_turn_rate(phi: float, theta: float, va: float, g: float,
                          textbook: bool = False) -> float:
    """Pitch-rate offset holding altitude through a banked turn."""
    if textbook:
        return (g / va) * math.tan(phi)
    return math.sin(phi) * math.cos(theta) * (g / va) * math.tan(phi)


def _control_laws(gains: PidGains, e_roll: float, e_pitch: float,
                  p: float, q: float, va: float, q_ct: float,
                  integ_p: float, integ_q: float) -> tuple[float, float]:
    # integ_* are the accumulator values inside the brackets (surface units)
    nu = gains.va_star / va
    p_r = gains.k_phi * e_roll
    q_r = gains.k_theta * e_pitch + q_ct
    da = gains.k_pp * nu * nu * (p_r - p) + integ_p + gains.k_ffp * nu * p_r
    de = -(gains.k_pq * nu * nu * (q_r - q) + integ_q + gains.k_ffq * nu * q_r)
    return da, de


def pid_step(gains: PidGains, refs, state, va: float, dt: float,
             pstate: PidState, textbook_turn: bool = False,
             saturation: float = 30.0 * DEG):
    """One control step. Returns (da, de, delta_l, delta_r), surfaces saturated.

    `state` needs phi/theta/rates (a SimState works); integrators in `pstate`
    advance by dt and clamp symmetrically.
    """
    if va < MIN_PID_AIRSPEED:
        raise DegenerateAirspeedError(f"Va = {va:.3f} below PID minimum")
    phi, theta = state.phi, state.theta
    p, q = state.rates[0], state.rates[1]
    nu = gains.va_star / va
    q_ct = coordinated_turn_rate(phi, theta, va, gains.g, textbook_turn)
    p_r = gains.k_phi * (refs[0] - phi)
    q_r = gains.k_theta * (refs[1] - theta) + q_ct

    c = pstate.clamp
    pstate.integ_p = min(c, max(-c, pstate.integ_p + gains.k_ip * nu * nu * (p_r - p) * dt))
    pstate.integ_q = min(c, max(-c, pstate.integ_q + gains.k_iq * nu * nu * (q_r - q) * dt))

    da, de = _control_laws(gains, refs[0] - phi, refs[1] - theta, p, q, va,
                           q_ct, pstate.integ_p, pstate.integ_q)
    dl, dr = elevon_map(de, da)
    dl = min(saturation, max(-saturation, dl))
    dr = min(saturation, max(-saturation, dr))
    return da, de, dl, dr


def static_response(gains: PidGains, e_roll: float = 0.0, e_pitch: float = 0.0,
                    p: float = 0.0, q: float = 0.0, int_roll: float = 0.0,
                    int_pitch: float = 0.0, va: float = 18.0, phi: float = 0.0,
                    theta: float = 0.0, textbook_turn: bool = False) -> tuple[float, float]:
    """Memoryless input-output map used for linearization probes.

    The integrator contribution is modeled as k_i nu^2 k_outer I with I in
    integrated-tracking-error units (rad s), which is what the published
    sensitivities differentiate against; errors are tracking errors
    (reference minus state). Channels are independent inputs: phi/theta feed
    only the turn-compensation term.
    """
    nu = gains.va_star / va
    q_ct = coordinated_turn_rate(phi, theta, va, gains.g, textbook_turn)
    integ_p = gains.k_ip * nu * nu * gains.k_phi * int_roll
    integ_q = gains.k_iq * nu * nu * gains.k_theta * int_pitch
    return _control_laws(gains, e_roll, e_pitch, p, q, va, q_ct,
                         integ_p, integ_q)


def calibrate_gains(targets: dict | None = None, k_phi: float = 3.0,
                    k_theta: float = 3.0, va_star: float = 18.0,
                    g: float = 9.81) -> tuple[PidGains, dict]:
    """Solve the sensitivity targets for gains, returning (gains, residuals).

    The six targets constrain products of inner and outer gains, so the outer
    gains are fixed arguments; rate targets pin the inner P gains, integrator
    targets pin k_i, and the error-slope targets leave the remainder to the
    feedforward gains.
    """
    t = dict(DEFAULT_TARGETS if targets is None else targets)
    k_pp = -t["da_dp"]
    k_pq = t["de_dq"]
    if k_phi == 0.0:
        if t["da_dint_roll"] != 0.0 or t["da_de_roll"] != 0.0:
            raise ValueError("k_phi = 0 cannot reach nonzero roll-error targets")
        k_ip = k_ffp = 0.0
    else:
        k_ip = t["da_dint_roll"] / k_phi
        k_ffp = t["da_de_roll"] / k_phi - k_pp
    if k_theta == 0.0:
        if t["de_dint_pitch"] != 0.0 or t["de_de_pitch"] != 0.0:
            raise ValueError("k_theta = 0 cannot reach nonzero pitch-error targets")
        k_iq = k_ffq = 0.0
    else:
        k_iq = -t["de_dint_pitch"] / k_theta
        k_ffq = -t["de_de_pitch"] / k_theta - k_pq
    gains = PidGains(k_phi=k_phi, k_theta=k_theta, k_pp=k_pp, k_ip=k_ip,
                     k_ffp=k_ffp, k_pq=k_pq, k_iq=k_iq, k_ffq=k_ffq,
                     va_star=va_star, g=g)
    try:
        gains.validate()
    except ValueError as exc:
        raise ValueError(f"targets are infeasible for this gain split: {exc}") from exc

    achieved = {
        "da_de_roll": k_phi * (k_pp + k_ffp),
        "de_de_pitch": -k_theta * (k_pq + k_ffq),
        "da_dp": -k_pp,
        "de_dq": k_pq,
        "da_dint_roll": k_ip * k_phi,
        "de_dint_pitch": -k_iq * k_theta,
    }
    residuals = {key: achieved[key] - t[key] for key in t}
    return gains, residuals


# ------------------------------------------------------------------ gains file

def save_gains(gains: PidGains, path) -> None:
    lines = [f"schema = {GAINS_SCHEMA}"]
    for f in fields(gains):
        lines.append(f"{f.name} = {getattr(gains, f.name)!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_gains(path) -> PidGains:
    values = {}
    names = {f.name for f in fields(PidGains)}
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].split("=", 1)[0].strip() != "schema":
        raise ValueError("missing schema line")
    if lines[0].split("=", 1)[1].strip() != GAINS_SCHEMA:
        raise ValueError(f"unsupported gains schema in {path}")
    for raw in lines[1:]:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in names:
            raise ValueError(f"unknown gain {key!r}")
        values[key] = float(val)
    missing = names - values.keys()
    if missing:
        raise ValueError(f"missing gains: {sorted(missing)}")
    gains = PidGains(**values)
    gains.validate()
    return gains
