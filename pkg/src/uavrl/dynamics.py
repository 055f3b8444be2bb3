"""6-DOF rigid-body flying-wing model with linear aerodynamics.

Flat-Earth Newton-Euler equations in body axes with Euler-angle attitude,
the usual small-UAV linear coefficient model (static term + alpha/beta terms
+ nondimensionalized rate terms + control deflections), a static quadratic
throttle->thrust map with propeller reaction torque about body-x, and a
fixed-step RK4 integrator.

Conventions:
  - state vector [pn, pe, pd, phi, theta, psi, u, v, w, p, q, r], NED
    position, pd positive down;
  - positive elevon = trailing edge down, so Cm_de < 0 and Cl_da > 0;
  - elevon mixing: delta_l = delta_e + delta_a, delta_r = delta_e - delta_a;
  - actuator command triple is (delta_r, delta_l, throttle).
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, fields, replace
from functools import cached_property
from importlib import resources

import numpy as np
from scipy.optimize import least_squares

DEG = math.pi / 180.0

# state vector indices
PN, PE, PD, PHI, THETA, PSI, U, V, W, P, Q, R = range(12)

PARAMS_SCHEMA = "uav-params-v1"
MIN_AIRSPEED = 0.1           # m/s, below this alpha/beta are meaningless
EULER_PITCH_LIMIT = 89.0 * DEG


class DegenerateAirspeedError(ValueError):
    """Airspeed too small for alpha/beta to be defined."""


class EulerSingularityError(ValueError):
    """Pitch attitude too close to +-90 deg for Euler kinematics."""


class TrimError(RuntimeError):
    """Trim solver failed to reach the required residual."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class UavParams:
    """Physical airframe description, SI units, dimensionless aero derivatives."""

    # mass / geometry / environment
    mass: float
    g: float
    rho: float
    S: float          # wing area [m^2]
    b: float          # span [m]
    c: float          # mean chord [m]
    Jxx: float
    Jyy: float
    Jzz: float
    Jxz: float
    # lift
    CL0: float
    CL_alpha: float
    CL_q: float
    CL_de: float
    # drag
    CD0: float
    CD_alpha: float
    CD_de: float
    # side force
    CY0: float
    CY_beta: float
    CY_p: float
    CY_r: float
    CY_da: float
    # roll moment
    Cl0: float
    Cl_beta: float
    Cl_p: float
    Cl_r: float
    Cl_da: float
    # pitch moment
    Cm0: float
    Cm_alpha: float
    Cm_q: float
    Cm_de: float
    # yaw moment
    Cn0: float
    Cn_beta: float
    Cn_p: float
    Cn_r: float
    Cn_da: float
    # propulsion: thrust = ct1*u + ct2*u^2, reaction torque = -k_torque*thrust
    prop_diameter: float
    ct1: float
    ct2: float
    k_torque: float

    @cached_property
    def inertia(self) -> np.ndarray:
        J = np.array(
            [
                [self.Jxx, 0.0, -self.Jxz],
                [0.0, self.Jyy, 0.0],
                [-self.Jxz, 0.0, self.Jzz],
            ]
        )
        return J

    @cached_property
    def inertia_inv(self) -> np.ndarray:
        return np.linalg.inv(self.inertia)

    def validate(self) -> None:
        """Raise ValueError listing every violated physical constraint."""
        problems = []
        if not self.mass > 0:
            problems.append("mass must be > 0")
        if not self.rho > 0:
            problems.append("rho must be > 0")
        for name in ("S", "b", "c"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be > 0")
        try:
            eig = np.linalg.eigvalsh(self.inertia)
            if not np.all(eig > 0):
                problems.append("inertia matrix must be positive definite")
        except np.linalg.LinAlgError:
            problems.append("inertia matrix must be positive definite")
        if not self.Cm_q < 0:
            problems.append("Cm_q must be < 0 (pitch damping)")
        if not self.Cl_p < 0:
            problems.append("Cl_p must be < 0 (roll damping)")
        if self.Cm_de == 0:
            problems.append("Cm_de must be nonzero (no pitch authority)")
        if problems:
            raise ValueError("; ".join(problems))

    def replace(self, **changes) -> "UavParams":
        return replace(self, **changes)


_PARAM_UNITS = {
    "mass": "kg", "g": "m/s^2", "rho": "kg/m^3", "S": "m^2", "b": "m",
    "c": "m", "Jxx": "kg m^2", "Jyy": "kg m^2", "Jzz": "kg m^2",
    "Jxz": "kg m^2", "prop_diameter": "m", "ct1": "N", "ct2": "N",
    "k_torque": "m",
}


def save_params(params: UavParams, path) -> None:
    with open(path, "w") as fh:
        fh.write(serialize_params(params))


def serialize_params(params: UavParams) -> str:
    lines = [f"schema = {PARAMS_SCHEMA}"]
    for f in fields(UavParams):
        unit = _PARAM_UNITS.get(f.name, "-")
        lines.append(f"{f.name} = {getattr(params, f.name)!r}  # [{unit}]")
    return "\n".join(lines) + "\n"


def parse_params(text: str) -> UavParams:
    values = {}
    schema = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if schema is None:
            if key != "schema":
                raise ValueError("first entry must be the schema line")
            if val != PARAMS_SCHEMA:
                raise ValueError(f"unsupported schema {val!r}, expected {PARAMS_SCHEMA!r}")
            schema = val
            continue
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        values[key] = float(val)
    known = {f.name for f in fields(UavParams)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown keys: {sorted(unknown)}")
    missing = known - set(values)
    if missing:
        raise ValueError(f"missing keys: {sorted(missing)}")
    return UavParams(**values)


def load_params(path) -> UavParams:
    with open(path) as fh:
        return parse_params(fh.read())


def x8_nominal() -> UavParams:
    """Nominal flying-wing parameter set shipped with the package."""
    text = resources.files("uavrl.data").joinpath("x8_nominal.txt").read_text()
    params = parse_params(text)
    params.validate()
    return params


class SimState:
    """Thin wrapper around the 12-element state vector."""

    __slots__ = ("vec",)

    def __init__(self, vec):
        self.vec = np.asarray(vec, dtype=float).copy()
        if self.vec.shape != (12,):
            raise ValueError("state vector must have 12 elements")

    @classmethod
    def from_components(cls, pos, att, vel, rates):
        return cls(np.concatenate([pos, att, vel, rates]))

    def copy(self) -> "SimState":
        return SimState(self.vec)

    # named accessors used throughout the package
    @property
    def pos(self):
        return self.vec[PN:PD + 1]

    @property
    def att(self):
        return self.vec[PHI:PSI + 1]

    @property
    def vel(self):
        return self.vec[U:W + 1]

    @property
    def rates(self):
        return self.vec[P:R + 1]

    @property
    def phi(self):
        return self.vec[PHI]

    @property
    def theta(self):
        return self.vec[THETA]

    @property
    def psi(self):
        return self.vec[PSI]

    @property
    def altitude(self):
        return -self.vec[PD]

    def __repr__(self):
        return f"SimState({self.vec!r})"


@dataclass
class CoefficientSet:
    CL: float
    CD: float
    CY: float
    Cl: float
    Cm: float
    Cn: float


def elevon_map(delta_e: float, delta_a: float):
    """Virtual (elevator, aileron) -> physical (delta_l, delta_r)."""
    return delta_e + delta_a, delta_e - delta_a


def inverse_elevon_map(delta_l: float, delta_r: float):
    """Physical (delta_l, delta_r) -> virtual (elevator, aileron)."""
    return 0.5 * (delta_l + delta_r), 0.5 * (delta_l - delta_r)


def body_to_ned_matrix(phi: float, theta: float, psi: float) -> np.ndarray:
    cphi, sphi = math.cos(phi), math.sin(phi)
    cth, sth = math.cos(theta), math.sin(theta)
    cpsi, spsi = math.cos(psi), math.sin(psi)
    return np.array(
        [
            [cth * cpsi, sphi * sth * cpsi - cphi * spsi, cphi * sth * cpsi + sphi * spsi],
            [cth * spsi, sphi * sth * spsi + cphi * cpsi, cphi * sth * spsi - sphi * cpsi],
            [-sth, sphi * cth, cphi * cth],
        ]
    )


def air_data(state: SimState, wind_ned) -> tuple[float, float, float]:
    """(Va, alpha, beta) from body velocity and NED wind (steady + gust)."""
    va, alpha, beta, _ = _air_data_raw(state.vec, np.asarray(wind_ned, dtype=float))
    return va, alpha, beta


def _air_data_raw(y, wind_ned):
    phi, theta, psi = y[PHI], y[THETA], y[PSI]
    rot = body_to_ned_matrix(phi, theta, psi)
    wind_body = rot.T @ wind_ned
    ur = y[U] - wind_body[0]
    vr = y[V] - wind_body[1]
    wr = y[W] - wind_body[2]
    va = math.sqrt(ur * ur + vr * vr + wr * wr)
    if va <= MIN_AIRSPEED:
        raise DegenerateAirspeedError(f"airspeed {va:.3g} m/s below {MIN_AIRSPEED} m/s")
    alpha = math.atan2(wr, ur)
    beta = math.asin(min(1.0, max(-1.0, vr / va)))
    return va, alpha, beta, (ur, vr, wr)


def thrust_force(params: UavParams, throttle: float) -> float:
    return params.ct1 * throttle + params.ct2 * throttle * throttle


def _coefficients_raw(params, va, alpha, beta, p, q, r, delta_e, delta_a):
    b2v = params.b / (2.0 * va)
    c2v = params.c / (2.0 * va)
    CL = params.CL0 + params.CL_alpha * alpha + params.CL_q * c2v * q + params.CL_de * delta_e
    CD = params.CD0 + params.CD_alpha * alpha + params.CD_de * delta_e
    CY = (params.CY0 + params.CY_beta * beta + params.CY_p * b2v * p
          + params.CY_r * b2v * r + params.CY_da * delta_a)
    Cl = (params.Cl0 + params.Cl_beta * beta + params.Cl_p * b2v * p
          + params.Cl_r * b2v * r + params.Cl_da * delta_a)
    Cm = params.Cm0 + params.Cm_alpha * alpha + params.Cm_q * c2v * q + params.Cm_de * delta_e
    Cn = (params.Cn0 + params.Cn_beta * beta + params.Cn_p * b2v * p
          + params.Cn_r * b2v * r + params.Cn_da * delta_a)
    return CL, CD, CY, Cl, Cm, Cn


def aero_coefficients(state: SimState, applied, wind_ned, params: UavParams) -> CoefficientSet:
    """Dimensionless force/moment coefficients for the current flight condition.

    `applied` is the actuator triple (delta_r, delta_l, throttle) actually at
    the surface (post delay/limits), e.g. ActuatorState.applied.
    """
    applied = np.asarray(applied, dtype=float)
    delta_e, delta_a = inverse_elevon_map(applied[1], applied[0])
    va, alpha, beta, _ = _air_data_raw(state.vec, np.asarray(wind_ned, dtype=float))
    y = state.vec
    return CoefficientSet(*_coefficients_raw(params, va, alpha, beta,
                                             y[P], y[Q], y[R], delta_e, delta_a))


def _derivatives_raw(y, params, delta_r, delta_l, throttle, wind_ned):
    phi, theta = y[PHI], y[THETA]
    if abs(theta) >= EULER_PITCH_LIMIT:
        raise EulerSingularityError(f"|theta| = {abs(theta) / DEG:.2f} deg >= 89 deg")
    u, v, w = y[U], y[V], y[W]
    p, q, r = y[P], y[Q], y[R]

    va, alpha, beta, _ = _air_data_raw(y, wind_ned)
    delta_e, delta_a = inverse_elevon_map(delta_l, delta_r)
    CL, CD, CY, Cl, Cm, Cn = _coefficients_raw(
        params, va, alpha, beta, p, q, r, delta_e, delta_a)

    qbar_s = 0.5 * params.rho * va * va * params.S
    lift = qbar_s * CL
    drag = qbar_s * CD
    ca, sa = math.cos(alpha), math.sin(alpha)

    thrust = thrust_force(params, throttle)
    m = params.mass
    g = params.g
    sphi, cphi = math.sin(phi), math.cos(phi)
    sth, cth = math.sin(theta), math.cos(theta)

    fx = -drag * ca + lift * sa + thrust - m * g * sth
    fy = qbar_s * CY + m * g * sphi * cth
    fz = -drag * sa - lift * ca + m * g * cphi * cth

    mx = qbar_s * params.b * Cl - params.k_torque * thrust
    my = qbar_s * params.c * Cm
    mz = qbar_s * params.b * Cn

    dydt = np.empty(12)
    # position kinematics
    rot = body_to_ned_matrix(phi, theta, y[PSI])
    dydt[PN:PD + 1] = rot @ y[U:W + 1]
    # Euler-angle kinematics
    tth = sth / cth
    dydt[PHI] = p + (q * sphi + r * cphi) * tth
    dydt[THETA] = q * cphi - r * sphi
    dydt[PSI] = (q * sphi + r * cphi) / cth
    # translational dynamics
    dydt[U] = r * v - q * w + fx / m
    dydt[V] = p * w - r * u + fy / m
    dydt[W] = q * u - p * v + fz / m
    # rotational dynamics
    omega = y[P:R + 1]
    moments = np.array([mx, my, mz])
    dydt[P:R + 1] = params.inertia_inv @ (moments - np.cross(omega, params.inertia @ omega))
    return dydt


def derivatives(state: SimState, params: UavParams, applied, wind_ned) -> np.ndarray:
    """Full 12-element state derivative, same layout as the state vector."""
    applied = np.asarray(applied, dtype=float)
    return _derivatives_raw(state.vec, params, applied[0], applied[1], applied[2],
                            np.asarray(wind_ned, dtype=float))


class ActuatorState:
    """Delayed, rate- and position-limited elevon/throttle servo model.

    Commands pushed at time t become the slew target at t + delay; the applied
    surface position then moves toward the target at most rate_limit rad/s.
    Throttle has no rate limit (ESC response is fast at this scale) and is
    clipped to [0, 1]. Elevons are clipped to +-elevon_limit.
    """

    def __init__(self, delay=0.1, rate_limit=200.0 * DEG, elevon_limit=30.0 * DEG,
                 initial=(0.0, 0.0, 0.0), t0=0.0):
        self.delay = float(delay)
        self.rate_limit = float(rate_limit)
        self.elevon_limit = float(elevon_limit)
        self.clock = float(t0)
        init = self._clip(np.asarray(initial, dtype=float))
        self.commanded = init.copy()
        self.target = init.copy()
        self.applied = init.copy()
        self.buffer = deque()

    def _clip(self, cmd):
        out = np.asarray(cmd, dtype=float).copy()
        out[0] = min(self.elevon_limit, max(-self.elevon_limit, out[0]))
        out[1] = min(self.elevon_limit, max(-self.elevon_limit, out[1]))
        out[2] = min(1.0, max(0.0, out[2]))
        return out

    def push(self, command) -> None:
        """Issue (delta_r, delta_l, throttle); visible after the transport delay."""
        cmd = self._clip(command)
        self.commanded = cmd.copy()
        self.buffer.append((self.clock + self.delay, cmd))

    def advance(self, dt: float) -> np.ndarray:
        """Pop due commands and slew `applied` over one interval of length dt."""
        # 1 ns slack so an integer number of periods survives float accumulation
        while self.buffer and self.buffer[0][0] <= self.clock + 1e-9:
            self.target = self.buffer.popleft()[1]
        max_step = self.rate_limit * dt
        for i in (0, 1):
            err = self.target[i] - self.applied[i]
            self.applied[i] += min(max_step, max(-max_step, err))
        self.applied[2] = self.target[2]
        self.applied = self._clip(self.applied)
        self.clock += dt
        return self.applied


def step(state: SimState, params: UavParams, actuators: ActuatorState,
         wind_ned, dt: float) -> SimState:
    """One RK4 step; the actuator buffer is popped/applied before integration."""
    wind_ned = np.asarray(wind_ned, dtype=float)
    applied = actuators.advance(dt)
    dr, dl, th = applied[0], applied[1], applied[2]
    y = state.vec
    k1 = _derivatives_raw(y, params, dr, dl, th, wind_ned)
    k2 = _derivatives_raw(y + 0.5 * dt * k1, params, dr, dl, th, wind_ned)
    k3 = _derivatives_raw(y + 0.5 * dt * k2, params, dr, dl, th, wind_ned)
    k4 = _derivatives_raw(y + dt * k3, params, dr, dl, th, wind_ned)
    return SimState(y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))


def total_energy(state: SimState, params: UavParams) -> float:
    """Kinetic + potential mechanical energy (for conservation checks)."""
    v2 = float(state.vel @ state.vel)
    omega = state.rates
    rot = float(omega @ (params.inertia @ omega))
    return 0.5 * params.mass * v2 + 0.5 * rot + params.mass * params.g * state.altitude


@dataclass
class TrimPoint:
    """Symmetric longitudinal trim: wings level, equal elevons, zero climb."""

    va: float
    alpha: float
    theta: float
    elevon: float      # per-surface deflection, delta_r = delta_l = elevon
    throttle: float
    residual: float          # norm over [udot, wdot, qdot, climb rate]
    lateral_residual: float  # norm over [vdot, pdot, rdot]; nonzero iff k_torque != 0

    def state(self, altitude: float = 150.0, psi: float = 0.0) -> SimState:
        u = self.va * math.cos(self.alpha)
        w = self.va * math.sin(self.alpha)
        return SimState.from_components(
            [0.0, 0.0, -altitude], [0.0, self.theta, psi], [u, 0.0, w], [0.0, 0.0, 0.0])

    def command(self) -> np.ndarray:
        return np.array([self.elevon, self.elevon, self.throttle])


def _trim_residual(x, params, va):
    alpha, elevon, throttle = x
    theta = alpha  # level flight: climb rate is zero iff theta == alpha
    y = np.zeros(12)
    y[PD] = -150.0
    y[THETA] = theta
    y[U] = va * math.cos(alpha)
    y[W] = va * math.sin(alpha)
    dydt = _derivatives_raw(y, params, elevon, elevon, throttle, np.zeros(3))
    return np.array([dydt[U], dydt[W], dydt[Q]])


def trim(params: UavParams, va: float) -> TrimPoint:
    """Solve the symmetric longitudinal trim at airspeed va.

    The residual covers the longitudinal channels [udot, wdot, qdot, climb].
    Propeller reaction torque produces a lateral imbalance that equal elevons
    cannot cancel; it is reported separately as lateral_residual.
    """
    x0 = np.array([0.03, 0.04, 0.5])
    sol = least_squares(
        _trim_residual, x0, args=(params, va),
        bounds=([-0.4, -0.5, 0.0], [0.4, 0.5, 1.0]),
        xtol=3e-16, ftol=3e-16, gtol=3e-16, max_nfev=2000)
    alpha, elevon, throttle = sol.x
    long_res = _trim_residual(sol.x, params, va)
    # climb rate is zero by construction (theta == alpha), include it anyway
    tp_state = np.zeros(12)
    tp_state[PD] = -150.0
    tp_state[THETA] = alpha
    tp_state[U] = va * math.cos(alpha)
    tp_state[W] = va * math.sin(alpha)
    dydt = _derivatives_raw(tp_state, params, elevon, elevon, throttle, np.zeros(3))
    residual = math.sqrt(float(np.sum(long_res ** 2)) + dydt[PD] ** 2)
    lateral = math.sqrt(dydt[V] ** 2 + dydt[P] ** 2 + dydt[R] ** 2)
    if residual >= 1e-6:
        raise TrimError(f"trim residual {residual:.3e} >= 1e-6 at Va={va}", residual)
    return TrimPoint(va=float(va), alpha=float(alpha), theta=float(alpha),
                     elevon=float(elevon), throttle=float(throttle),
                     residual=float(residual), lateral_residual=float(lateral))
