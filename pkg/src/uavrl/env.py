"""Episodic attitude-tracking environment over the 6-DOF model.

The controller sees a window of the `history` most recent measurement
vectors (newest first), each with 14 channels:

    [p, q, r, alpha, beta, Va, delta_r_prev, delta_l_prev,
     I_roll, I_pitch, roll, pitch, err_roll, err_pitch]

OU noise is added to the physical channels; the error channels are computed
from the noisy attitude (so the integrators accumulate the noisy error), and
the previous-command/integrator/error channels carry no extra noise of their
own. Rewards come from the true state. Episodes run a fixed number of steps
with references resampled on a fixed interval; real terminations are the
Euler pitch singularity and the altitude floor.
"""
from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from . import disturbances as dist
from . import dynamics as dyn
from .config import EnvConfig, RandomizationConfig, RewardConfig
from .dynamics import DEG

N_CHANNELS = 14
MEAS_NAMES = ("p", "q", "r", "alpha", "beta", "va", "delta_r_prev",
              "delta_l_prev", "int_roll", "int_pitch", "roll", "pitch",
              "err_roll", "err_pitch")
# channel indices
CH_P, CH_Q, CH_R, CH_ALPHA, CH_BETA, CH_VA, CH_DR, CH_DL, CH_IROLL, \
    CH_IPITCH, CH_ROLL, CH_PITCH, CH_EROLL, CH_EPITCH = range(N_CHANNELS)


class Normalizer:
    """Running per-channel mean/variance (Welford), with a variance floor.

    Statistics update only while training; evaluation uses them frozen.
    merge() combines two accumulators commutatively for parallel rollouts.
    """

    def __init__(self, n: int = N_CHANNELS, floor: float = 1e-6):
        self.n = n
        self.floor = floor
        self.count = 0.0
        self.mean = np.zeros(n)
        self.m2 = np.zeros(n)

    @classmethod
    def from_stats(cls, mean, var, count: float, floor: float = 1e-6):
        out = cls(len(mean), floor)
        out.count = float(count)
        out.mean = np.asarray(mean, dtype=float).copy()
        out.m2 = np.asarray(var, dtype=float) * max(count, 1.0)
        return out

    @property
    def var(self) -> np.ndarray:
        if self.count < 1:
            return np.ones(self.n)
        return self.m2 / self.count

    @property
    def scale(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.var, self.floor))

    def update(self, x: np.ndarray) -> None:
        self.count += 1.0
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale

    def merge(self, other: "Normalizer") -> "Normalizer":
        """In-place parallel combine (commutative up to float rounding)."""
        if other.count == 0:
            return self
        if self.count == 0:
            self.count, self.mean, self.m2 = other.count, other.mean.copy(), other.m2.copy()
            return self
        total = self.count + other.count
        delta = other.mean - self.mean
        self.m2 = self.m2 + other.m2 + delta * delta * self.count * other.count / total
        self.mean = (self.count * self.mean + other.count * other.mean) / total
        self.count = total
        return self

    def state_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean.tolist(),
                "var": self.var.tolist(), "floor": self.floor}

    @classmethod
    def from_state(cls, state: dict) -> "Normalizer":
        return cls.from_stats(state["mean"], state["var"], state["count"], state["floor"])


# ------------------------------------------------------------------- reward

def combine_bonuses(cfg: RewardConfig, b_roll: float, b_pitch: float,
                    b_rr: float, b_pr: float) -> float:
    # fixed summation order so the achievable-value lattice is bit-exact
    return (cfg.roll_weight * b_roll + cfg.pitch_weight * b_pitch
            + cfg.roll_rate_weight * b_rr + cfg.pitch_rate_weight * b_pr)


def reward_bonuses(cfg: RewardConfig, err_roll: float, err_pitch: float,
                   roll_rate: float, pitch_rate: float):
    """The four unit bonuses (inside-bound indicators)."""
    return (1.0 if abs(err_roll) <= cfg.roll_bound_deg * DEG else 0.0,
            1.0 if abs(err_pitch) <= cfg.pitch_bound_deg * DEG else 0.0,
            1.0 if abs(roll_rate) <= cfg.roll_rate_bound_deg * DEG else 0.0,
            1.0 if abs(pitch_rate) <= cfg.pitch_rate_bound_deg * DEG else 0.0)


def reward(cfg: RewardConfig, err_roll: float, err_pitch: float,
           roll_rate: float, pitch_rate: float) -> float:
    return combine_bonuses(cfg, *reward_bonuses(cfg, err_roll, err_pitch,
                                                 roll_rate, pitch_rate))


def max_reward(cfg: RewardConfig) -> float:
    return combine_bonuses(cfg, 1.0, 1.0, 1.0, 1.0)


def achievable_rewards(cfg: RewardConfig) -> np.ndarray:
    """Every value the sparse reward can take (9 for the default weights)."""
    vals = {combine_bonuses(cfg, br, bp, brr, bpr)
            for br in (0.0, 1.0) for bp in (0.0, 1.0)
            for brr in (0.0, 1.0) for bpr in (0.0, 1.0)}
    return np.array(sorted(vals))


def euler_rates(state: dyn.SimState) -> tuple[float, float]:
    """(roll_dot, pitch_dot) from exact Euler-angle kinematics."""
    phi, theta = state.phi, state.theta
    p, q, r = state.rates
    roll_dot = p + (q * math.sin(phi) + r * math.cos(phi)) * math.tan(theta)
    pitch_dot = q * math.cos(phi) - r * math.sin(phi)
    return roll_dot, pitch_dot


# ------------------------------------------------------- domain randomization

_STATIC_COEFFS = ("CL0", "CL_alpha", "CL_de", "CD0", "CD_alpha", "CD_de",
                  "CY0", "CY_beta", "CY_da", "Cl0", "Cl_beta", "Cl_da",
                  "Cm0", "Cm_alpha", "Cm_de", "Cn0", "Cn_beta", "Cn_da")
_RATE_COEFFS = ("CL_q", "CY_p", "CY_r", "Cl_p", "Cl_r", "Cm_q", "Cn_p", "Cn_r")
_MASS_FIELDS = ("mass", "Jxx", "Jyy", "Jzz", "Jxz")
_PROP_FIELDS = ("ct1", "ct2", "k_torque")


def randomize_params(nominal: dyn.UavParams, cfg: RandomizationConfig,
                     rng: np.random.Generator) -> dyn.UavParams:
    """Multiplicative uniform perturbation per coefficient, sign preserving."""
    if not cfg.enabled:
        return nominal

    def factor(rel):
        return max(1.0 + rng.uniform(-rel, rel), 0.05)

    changes = {}
    for name in _STATIC_COEFFS:
        changes[name] = getattr(nominal, name) * factor(cfg.coeff_rel)
    for name in _RATE_COEFFS:
        changes[name] = getattr(nominal, name) * factor(cfg.rate_coeff_rel)
    for name in _MASS_FIELDS:
        changes[name] = getattr(nominal, name) * factor(cfg.mass_rel)
    for name in _PROP_FIELDS:
        changes[name] = getattr(nominal, name) * factor(cfg.prop_rel)
    return nominal.replace(**changes)


class AirspeedPi:
    """PI throttle hold around the target airspeed, with anti-windup."""

    def __init__(self, kp: float, ki: float, base: float, clamp: float):
        self.kp = kp
        self.ki = ki
        self.base = base
        self.clamp = clamp
        self.integ = 0.0

    def reset(self) -> None:
        self.integ = 0.0

    def update(self, err: float, dt: float) -> float:
        self.integ = min(self.clamp, max(-self.clamp, self.integ + self.ki * err * dt))
        return min(1.0, max(0.0, self.base + self.kp * err + self.integ))


# ------------------------------------------------------------ episode record

class EpisodeRecord:
    """Raw per-step data for one episode (feeds the replay buffer and HER)."""

    def __init__(self, history: int):
        self.history = history
        self.measurements = []   # raw noisy m, one per observation (len = steps+1)
        self.true_roll = []      # true attitude at each observation
        self.true_pitch = []
        self.refs = []           # reference active at each observation
        self.actions = []        # network-space actions, len = steps
        self.rewards = []
        self.terminals = []      # 1.0 only for real terminations
        self.bonuses = []        # the four reward indicator bits per step
        self.truncated = False
        self.termination = None

    @property
    def steps(self) -> int:
        return len(self.actions)

    def window(self, t: int) -> np.ndarray:
        """Raw (history, 14) window at observation t, newest first."""
        rows = [self.measurements[max(t - j, 0)] for j in range(self.history)]
        return np.stack(rows)

    def arrays(self) -> dict:
        return {
            "measurements": np.asarray(self.measurements),
            "true_roll": np.asarray(self.true_roll),
            "true_pitch": np.asarray(self.true_pitch),
            "refs": np.asarray(self.refs),
            "actions": np.asarray(self.actions),
            "rewards": np.asarray(self.rewards),
            "terminals": np.asarray(self.terminals),
            "bonuses": np.asarray(self.bonuses),
        }


TRACE_HEADER = (
    ["time"]
    + ["pn", "pe", "pd", "roll", "pitch", "yaw", "u", "v", "w", "p", "q", "r"]
    + ["applied_dr", "applied_dl", "applied_throttle"]
    + ["cmd_dr", "cmd_dl", "cmd_throttle"]
    + list(MEAS_NAMES)
    + ["action_0", "action_1", "reward", "ref_roll", "ref_pitch", "done"]
)


class AttitudeEnv:
    """Attitude tracking with disturbances, delays, and domain randomization."""

    def __init__(self, cfg: EnvConfig, nominal: dyn.UavParams,
                 rng: np.random.Generator, history: int = 10,
                 training: bool = True, normalizer: Normalizer | None = None,
                 trace: bool = False):
        self.cfg = cfg
        self.nominal = nominal
        self.rng = rng
        self.history = history
        self.training = training
        self.normalizer = normalizer or Normalizer(N_CHANNELS, cfg.normalizer_floor)
        self.trace_enabled = trace

        self.trim = dyn.trim(nominal, cfg.throttle.target)
        self.action_scale = cfg.action_scale_deg * DEG
        self.elevon_limit = cfg.actuator.limit_deg * DEG
        self.max_reward = max_reward(cfg.reward)

        self.params = nominal
        self.state = None
        self.record = None
        self.done = True

    # ------------------------------------------------------------------ reset

    def reset(self, init_state: dyn.SimState | None = None,
              actuator_init=None, reference_fn=None) -> np.ndarray:
        """Start an episode; draws params, wind, jitter rate, state, references.

        `init_state`/`actuator_init` override the random initial condition
        (used by step-response evaluation), `reference_fn(k) -> (roll, pitch)`
        replaces the random reference schedule.
        """
        cfg = self.cfg
        rng = self.rng
        self.params = randomize_params(self.nominal, cfg.randomization, rng)

        if cfg.wind.enabled:
            self.steady_wind = dist.sample_episode_wind(
                rng, cfg.wind.max_speed, cfg.wind.vertical_scale)
        else:
            self.steady_wind = np.zeros(3)

        su, sv, sw = dist.dryden_intensities(
            float(np.linalg.norm(self.steady_wind)),
            cfg.dryden.w_intensity_factor, cfg.dryden.uv_intensity_factor)
        if not cfg.dryden.enabled:
            su = sv = sw = 0.0
        self.dryden = dist.DrydenGusts(su, sv, sw, cfg.dryden.va_ref,
                                       cfg.dryden.length_u, cfg.dryden.length_v,
                                       cfg.dryden.length_w)
        self.gust_body = np.zeros(3)

        self.jitter_rate = dist.sample_jitter_rate(
            rng, cfg.jitter.rate_min, cfg.jitter.rate_max) if cfg.jitter.enabled else None

        sigma = np.asarray(cfg.ou.sigma_base) * cfg.ou.sigma_scale
        if not cfg.ou.enabled:
            sigma = np.zeros(N_CHANNELS)
        self.ou = dist.OuProcess(sigma=sigma, theta=cfg.ou.theta)

        self.reference_fn = reference_fn
        if init_state is None:
            init_state, actuator_init = self._sample_initial_condition()
        elif actuator_init is None:
            actuator_init = self.trim.command()
        self.state = init_state
        self.actuators = dyn.ActuatorState(
            delay=cfg.actuator.delay, rate_limit=cfg.actuator.rate_limit_deg * DEG,
            elevon_limit=self.elevon_limit, initial=actuator_init)
        self.prev_cmd = np.asarray(actuator_init, dtype=float)[:2].copy()

        self.pi = AirspeedPi(cfg.throttle.kp, cfg.throttle.ki,
                             self.trim.throttle, cfg.throttle.integrator_clamp)
        self.integ = np.zeros(2)
        self.k = 0
        self.t = 0.0
        self.done = False
        if reference_fn is not None:
            self.refs = np.asarray(reference_fn(0), dtype=float)
        else:
            self.refs = self._sample_reference()

        self.record = EpisodeRecord(self.history)
        self.trace_rows = [] if self.trace_enabled else None

        m = self._measure()
        if self.training:
            self.normalizer.update(m)
        self.window = np.tile(m, (self.history, 1))
        self._record_observation(m)
        if self.trace_enabled:
            self._trace_row(action=(0.0, 0.0), rew=0.0)
        return self._obs()

    def _sample_initial_condition(self):
        cfg = self.cfg.init
        rng = self.rng
        roll = rng.uniform(-cfg.roll_deg, cfg.roll_deg) * DEG
        pitch = rng.uniform(-cfg.pitch_deg, cfg.pitch_deg) * DEG
        yaw = rng.uniform(-math.pi, math.pi)
        va = rng.uniform(cfg.va_min, cfg.va_max)
        alpha = rng.uniform(-cfg.alpha_deg, cfg.alpha_deg) * DEG
        beta = rng.uniform(-cfg.beta_deg, cfg.beta_deg) * DEG
        rates = rng.uniform(-cfg.rate_deg, cfg.rate_deg, 3) * DEG
        elevons = rng.uniform(-cfg.elevon_deg, cfg.elevon_deg, 2) * DEG

        # body velocity = air-relative velocity (from va/alpha/beta) + wind
        air = np.array([va * math.cos(alpha) * math.cos(beta),
                        va * math.sin(beta),
                        va * math.sin(alpha) * math.cos(beta)])
        rot = dyn.body_to_ned_matrix(roll, pitch, yaw)
        vel = air + rot.T @ self.steady_wind
        state = dyn.SimState.from_components(
            [0.0, 0.0, -self.cfg.altitude_init], [roll, pitch, yaw], vel, rates)
        actuator_init = np.array([elevons[0], elevons[1], self.trim.throttle])
        return state, actuator_init

    def _sample_reference(self) -> np.ndarray:
        cfg = self.cfg.init
        return np.array([
            self.rng.uniform(-cfg.ref_roll_deg, cfg.ref_roll_deg) * DEG,
            self.rng.uniform(cfg.ref_pitch_min_deg, cfg.ref_pitch_max_deg) * DEG,
        ])

    # ------------------------------------------------------------------- step

    def step(self, action) -> tuple[np.ndarray, float, bool, dict]:
        if self.done:
            raise RuntimeError("episode is over; call reset()")
        cfg = self.cfg
        action = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)

        cmd_r = action[0] * self.action_scale + self.trim.elevon
        cmd_l = action[1] * self.action_scale + self.trim.elevon
        va_true, _, _ = dyn.air_data(self.state, self._wind_ned())
        throttle = self.pi.update(cfg.throttle.target - va_true, cfg.dt)
        self.actuators.push((cmd_r, cmd_l, throttle))

        if self.jitter_rate is not None:
            dt = dist.jittered_period(cfg.dt, self.jitter_rate, self.rng)
        else:
            dt = cfg.dt
        if cfg.dryden.enabled:
            self.gust_body = self.dryden.step(dt, self.rng)
        wind = self._wind_ned()

        termination = None
        try:
            self.state = dyn.step(self.state, self.params, self.actuators, wind, dt)
        except (dyn.EulerSingularityError, dyn.DegenerateAirspeedError):
            termination = "singular"
        self.t += dt
        self.k += 1

        if termination is None:
            if abs(self.state.theta) >= cfg.pitch_limit_deg * DEG:
                termination = "pitch_limit"
            elif self.state.altitude <= cfg.altitude_floor:
                termination = "crash"

        if termination is None:
            err_roll = self.state.phi - self.refs[0]
            err_pitch = self.state.theta - self.refs[1]
            roll_dot, pitch_dot = euler_rates(self.state)
            bonuses = reward_bonuses(cfg.reward, err_roll, err_pitch, roll_dot, pitch_dot)
        else:
            bonuses = (0.0, 0.0, 0.0, 0.0)
        rew = combine_bonuses(cfg.reward, *bonuses)

        truncated = False
        if termination is not None:
            self.done = True
        elif self.k >= cfg.steps:
            self.done = True
            truncated = True

        # reference changes take effect on the next observation
        if (not self.done and self.reference_fn is None
                and self.k % cfg.ref_hold_steps == 0):
            self.refs = self._sample_reference()
        elif self.reference_fn is not None:
            self.refs = np.asarray(self.reference_fn(self.k), dtype=float)

        self.prev_cmd = np.array([cmd_r, cmd_l])
        if termination is None:
            m = self._measure(dt)
            if self.training:
                self.normalizer.update(m)
            self.window = np.vstack([m[None, :], self.window[:-1]])
        else:
            m = self.window[0].copy()  # state is unusable; repeat the last row

        self.record.actions.append(action.copy())
        self.record.rewards.append(rew)
        self.record.terminals.append(1.0 if termination is not None else 0.0)
        self.record.bonuses.append(bonuses)
        self.record.truncated = truncated
        self.record.termination = termination
        self._record_observation(m)
        if self.trace_enabled:
            self._trace_row(action=action, rew=rew)

        info = {
            "truncated": truncated,
            "termination": termination,
            "time": self.t,
            "true_roll": float(self.state.phi),
            "true_pitch": float(self.state.theta),
            "raw_measurement": m,
        }
        return self._obs(), rew, self.done, info

    # ---------------------------------------------------------------- helpers

    def _wind_ned(self) -> np.ndarray:
        rot = dyn.body_to_ned_matrix(*self.state.att)
        return self.steady_wind + rot @ self.gust_body

    def _measure(self, dt: float | None = None) -> np.ndarray:
        """Build the raw (unnormalized) noisy measurement and update integrators."""
        cfg = self.cfg
        va, alpha, beta = dyn.air_data(self.state, self._wind_ned())
        noise = self.ou.step(cfg.dt if dt is None else dt, self.rng)
        p, q, r = self.state.rates
        roll_meas = self.state.phi + noise[CH_ROLL]
        pitch_meas = self.state.theta + noise[CH_PITCH]
        err_roll = roll_meas - self.refs[0]
        err_pitch = pitch_meas - self.refs[1]
        self.integ = cfg.integrator_decay * self.integ + np.array([err_roll, err_pitch])
        return np.array([
            p + noise[CH_P], q + noise[CH_Q], r + noise[CH_R],
            alpha + noise[CH_ALPHA], beta + noise[CH_BETA], va + noise[CH_VA],
            self.prev_cmd[0], self.prev_cmd[1],
            self.integ[0], self.integ[1],
            roll_meas, pitch_meas, err_roll, err_pitch,
        ])

    def _obs(self) -> np.ndarray:
        return self.normalizer.normalize(self.window).reshape(-1)

    def _record_observation(self, m: np.ndarray) -> None:
        self.record.measurements.append(m.copy())
        self.record.true_roll.append(float(self.state.phi))
        self.record.true_pitch.append(float(self.state.theta))
        self.record.refs.append(self.refs.copy())

    def episode_return(self) -> float:
        return float(np.sum(self.record.rewards))

    def normalized_return(self) -> float:
        """Total reward over the maximum achievable for a full episode."""
        return self.episode_return() / (self.cfg.steps * self.max_reward)

    # ------------------------------------------------------------------ trace

    def _trace_row(self, action, rew) -> None:
        row = ([self.t] + list(self.state.vec)
               + list(self.actuators.applied) + list(self.actuators.commanded)
               + list(self.record.measurements[-1])
               + [action[0], action[1], rew, self.refs[0], self.refs[1],
                  1.0 if self.done else 0.0])
        self.trace_rows.append(row)

    def write_trace(self, path) -> None:
        if self.trace_rows is None:
            raise RuntimeError("tracing was not enabled")
        from .manifest import write_csv
        write_csv(path, TRACE_HEADER, self.trace_rows)
