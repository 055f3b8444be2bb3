"""Evaluation and interpretability tooling.

Scripted step-response rollouts with tracking metrics, the frequency-weighted
smoothness metric Sm, open-loop sensitivity sweeps with tangent-gain
extraction (how close is the learned policy to a linear controller), latency
robustness sweeps, and steady-state offset compensation.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from . import dynamics as dyn
from .config import EnvConfig, AnalysisConfig
from .dynamics import DEG, inverse_elevon_map
from .env import (AttitudeEnv, Normalizer, CH_P, CH_Q, CH_R, CH_ALPHA, CH_BETA,
                  CH_VA, CH_DR, CH_DL, CH_IROLL, CH_IPITCH, CH_ROLL, CH_PITCH,
                  CH_EROLL, CH_EPITCH, N_CHANNELS, MEAS_NAMES)
from .pid import PidGains, PidState, pid_step, static_response, MIN_PID_AIRSPEED


# ------------------------------------------------------------------ smoothness

def smoothness(signal, fs: float) -> float:
    """Sm = 2/(n fs) * sum_i M_i f_i over the one-sided amplitude spectrum.

    DC is excluded (constant signals score exactly zero); higher values mean
    more high-frequency actuation.
    """
    x = np.asarray(signal, dtype=float)
    n = x.size
    if n < 2:
        raise ValueError("need at least two samples")
    spec = np.abs(np.fft.rfft(x))
    amps = 2.0 * spec / n
    if n % 2 == 0:
        amps[-1] = spec[-1] / n  # Nyquist bin is not doubled
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    return float(2.0 / (n * fs) * np.sum(amps[1:] * freqs[1:]))


# ------------------------------------------------------------------ controllers

class PolicyController:
    """Deterministic playback of a trained policy: a = tanh(mu)."""

    def __init__(self, net):
        self.net = net

    def reset(self) -> None:
        pass

    def act(self, obs: np.ndarray, measurement: np.ndarray) -> np.ndarray:
        return self.net.act_deterministic(obs)[0]


class PidController:
    """Wraps the cascaded PID behind the same interface as a policy.

    Works purely from the (noisy) measurement vector: attitude, rates and
    airspeed come from their channels, the references are recovered from the
    error channels, and its own integrators advance at the nominal period.
    Output is the surface deviation from trim in action units.
    """

    def __init__(self, gains: PidGains, dt: float = 0.02, clamp: float = 0.5236,
                 textbook_turn: bool = False, action_scale: float = 30.0 * DEG):
        self.gains = gains
        self.dt = dt
        self.textbook_turn = textbook_turn
        self.action_scale = action_scale
        self.pstate = PidState(clamp)

    def reset(self) -> None:
        self.pstate.reset()

    def act(self, obs: np.ndarray, m: np.ndarray) -> np.ndarray:
        refs = (m[CH_ROLL] - m[CH_EROLL], m[CH_PITCH] - m[CH_EPITCH])
        state = dyn.SimState.from_components(
            [0.0, 0.0, -100.0], [m[CH_ROLL], m[CH_PITCH], 0.0],
            [m[CH_VA], 0.0, 0.0], [m[CH_P], m[CH_Q], m[CH_R]])
        va = max(m[CH_VA], MIN_PID_AIRSPEED)
        _, _, dl, dr = pid_step(self.gains, refs, state, va, self.dt,
                                self.pstate, self.textbook_turn)
        return np.clip(np.array([dr, dl]) / self.action_scale, -1.0, 1.0)


class RandomController:
    """Uniform actions in [-1, 1]^2; the learning-curve baseline."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def reset(self) -> None:
        pass

    def act(self, obs, measurement) -> np.ndarray:
        return self.rng.uniform(-1.0, 1.0, 2)


class BiasedController:
    """Adds a constant action-space bias to another controller (test hook)."""

    def __init__(self, inner, bias):
        self.inner = inner
        self.bias = np.asarray(bias, dtype=float)

    def reset(self) -> None:
        self.inner.reset()

    def act(self, obs, measurement) -> np.ndarray:
        return np.clip(self.inner.act(obs, measurement) + self.bias, -1.0, 1.0)


# ---------------------------------------------------------------- step sequences

@dataclass(frozen=True)
class StepSequence:
    """Piecewise-constant reference schedule: ((time, roll_ref, pitch_ref), ...)."""

    steps: tuple
    duration: float

    def __post_init__(self):
        times = [s[0] for s in self.steps]
        if not times or times[0] != 0.0:
            raise ValueError("sequence must start at time 0")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("step times must be strictly increasing")

    def refs_at(self, t: float) -> tuple[float, float]:
        roll, pitch = self.steps[0][1], self.steps[0][2]
        for when, r, p in self.steps:
            if when <= t + 1e-12:
                roll, pitch = r, p
            else:
                break
        return roll, pitch

    def reference_fn(self, dt: float):
        return lambda k: self.refs_at(k * dt)


def default_sequence() -> StepSequence:
    return StepSequence(steps=(
        (0.0, 0.0, 0.0),
        (2.0, 20.0 * DEG, 0.0),
        (6.0, 0.0, 8.0 * DEG),
        (10.0, -30.0 * DEG, 0.0),
        (14.0, 0.0, -8.0 * DEG),
    ), duration=18.0)


def pitch_step_sequence(size: float = 10.0 * DEG) -> StepSequence:
    return StepSequence(steps=((0.0, 0.0, 0.0), (1.0, 0.0, size)), duration=9.0)


# ----------------------------------------------------------------- step eval

def _disable_disturbances(cfg: EnvConfig) -> EnvConfig:
    return replace(
        cfg,
        ou=replace(cfg.ou, enabled=False),
        dryden=replace(cfg.dryden, enabled=False),
        wind=replace(cfg.wind, enabled=False),
        jitter=replace(cfg.jitter, enabled=False),
        randomization=replace(cfg.randomization, enabled=False),
    )


def _segment_metrics(times, signal, changes):
    """Rise time / overshoot / steady-state error per reference change."""
    rises, overshoots, sses = [], [], []
    bounds = [c[0] for c in changes] + [times[-1] + 1e-9]
    for (t0, ref, prev_ref), t1 in zip(changes, bounds[1:]):
        seg = (times >= t0) & (times < t1)
        if not np.any(seg):
            continue
        ts, ys = times[seg], signal[seg]
        step = ref - prev_ref
        tail = ys[int(0.75 * len(ys)):]
        if len(tail):
            sses.append(abs(float(np.mean(tail)) - ref))
        if abs(step) > 1e-9:
            crossed = np.nonzero((ys - prev_ref) / step >= 0.9)[0]
            if len(crossed):
                rises.append(float(ts[crossed[0]] - t0))
            beyond = (ys - ref) / step
            overshoots.append(max(float(np.max(beyond)), 0.0))
    return rises, overshoots, sses


def run_step_eval(controller, sequence: StepSequence, env_cfg: EnvConfig,
                  nominal: dyn.UavParams, seed: int, history: int = 10,
                  normalizer: Normalizer | None = None,
                  disturbances: bool = False):
    """Closed-loop scripted rollout. Returns (metrics dict, env) deterministically.

    Divergence (pitch singularity, ground) shows up as metrics["diverged"]=1
    computed over the partial trace, never as an exception.
    """
    cfg = env_cfg if disturbances else _disable_disturbances(env_cfg)
    cfg = replace(cfg, steps=int(round(sequence.duration / cfg.dt)))
    env = AttitudeEnv(cfg, nominal, np.random.default_rng(seed), history=history,
                      training=False, normalizer=normalizer, trace=True)
    controller.reset()
    obs = env.reset(init_state=env.trim.state(cfg.altitude_init),
                    actuator_init=env.trim.command(),
                    reference_fn=sequence.reference_fn(cfg.dt))
    done = False
    while not done:
        action = controller.act(obs, env.record.measurements[-1])
        obs, _, done, info = env.step(action)

    rec = env.record.arrays()
    n = len(rec["actions"])
    times = np.arange(n + 1) * cfg.dt
    changes_roll, changes_pitch = [], []
    prev = sequence.steps[0][1:3]
    for when, r, p in sequence.steps:
        if r != prev[0] or when == 0.0:
            changes_roll.append((when, r, prev[0] if when > 0 else r))
        if p != prev[1] or when == 0.0:
            changes_pitch.append((when, p, prev[1] if when > 0 else p))
        prev = (r, p)

    metrics = {"diverged": 0 if env.record.termination is None else 1,
               "steps": n,
               "return": env.episode_return(),
               "normalized_return": env.episode_return() / (n * env.max_reward) if n else 0.0}
    for axis, signal, changes in (("roll", rec["true_roll"], changes_roll),
                                  ("pitch", rec["true_pitch"], changes_pitch)):
        rises, overs, sses = _segment_metrics(times, signal, changes)
        metrics[f"rise_{axis}"] = float(np.mean(rises)) if rises else float("nan")
        metrics[f"overshoot_{axis}"] = float(np.mean(overs)) if overs else 0.0
        metrics[f"sse_{axis}"] = float(np.mean(sses)) if sses else 0.0

    fs = 1.0 / cfg.dt
    acts = rec["actions"]
    if n >= 2:
        cmd_r = acts[:, 0] * env.action_scale
        cmd_l = acts[:, 1] * env.action_scale
        de_cmd, da_cmd = inverse_elevon_map(cmd_l, cmd_r)
        metrics["sm_da"] = smoothness(da_cmd, fs)
        metrics["sm_de"] = smoothness(de_cmd, fs)
        metrics["sm_roll"] = smoothness(rec["true_roll"], fs)
        metrics["sm_pitch"] = smoothness(rec["true_pitch"], fs)
    else:
        metrics.update(sm_da=float("nan"), sm_de=float("nan"),
                       sm_roll=float("nan"), sm_pitch=float("nan"))
    return metrics, env


# -------------------------------------------------------------- episode eval

def eval_episodes(controller, env_cfg: EnvConfig, nominal: dyn.UavParams,
                  n_episodes: int, seed: int, history: int = 10,
                  normalizer: Normalizer | None = None) -> dict:
    """Random-reference episodes with the configured disturbance set."""
    env = AttitudeEnv(env_cfg, nominal, np.random.default_rng(seed),
                      history=history, training=False, normalizer=normalizer)
    returns, terminations = [], 0
    for _ in range(n_episodes):
        controller.reset()
        obs = env.reset()
        done = False
        while not done:
            obs, _, done, info = env.step(
                controller.act(obs, env.record.measurements[-1]))
        returns.append(env.normalized_return())
        if env.record.termination is not None:
            terminations += 1
    returns = np.asarray(returns)
    return {"returns": returns, "mean": float(returns.mean()),
            "std": float(returns.std()), "terminations": terminations,
            "episodes": n_episodes}


# ------------------------------------------------------------ sensitivity sweeps

# half-width of the sweep around the level-flight anchor, per channel
SWEEP_HALF_RANGE = {
    CH_P: 2.0, CH_Q: 2.0, CH_R: 2.0,
    CH_ALPHA: 20.0 * DEG, CH_BETA: 20.0 * DEG, CH_VA: 10.0,
    CH_DR: 30.0 * DEG, CH_DL: 30.0 * DEG,
    CH_IROLL: 2.0, CH_IPITCH: 2.0,
    CH_ROLL: 60.0 * DEG, CH_PITCH: 45.0 * DEG,
    CH_EROLL: 60.0 * DEG, CH_EPITCH: 45.0 * DEG,
}


def anchor_measurement(trim: dyn.TrimPoint) -> np.ndarray:
    """Level steady flight: zero rates and errors, trim alpha and surfaces."""
    m = np.zeros(N_CHANNELS)
    m[CH_ALPHA] = trim.alpha
    m[CH_VA] = trim.va
    m[CH_DR] = trim.elevon
    m[CH_DL] = trim.elevon
    m[CH_PITCH] = trim.theta
    return m


class PolicyResponse:
    """Open-loop surface response of a policy to a single measurement.

    The window is the measurement tiled across the whole history (previous
    time steps held constant) and normalized with the frozen statistics, so
    the curve is a pure function of (weights, normalizer, anchor).
    """

    def __init__(self, net, normalizer: Normalizer, trim: dyn.TrimPoint,
                 action_scale: float = 30.0 * DEG):
        self.net = net
        self.normalizer = normalizer
        self.history = net.cfg.history
        self.anchor = anchor_measurement(trim)
        self.action_scale = action_scale

    def output(self, overrides: dict[int, float]) -> tuple[float, float]:
        m = self.anchor.copy()
        for ch, val in overrides.items():
            m[ch] = val
        window = np.tile(self.normalizer.normalize(m), (self.history, 1))
        act = self.net.act_deterministic(window.reshape(-1))[0]
        de, da = inverse_elevon_map(act[1] * self.action_scale,
                                    act[0] * self.action_scale)
        return float(da), float(de)


class PidResponse:
    """The PID's memoryless response over the same measurement channels.

    Error/integrator channels arrive in measurement convention (state minus
    reference) and are negated into tracking convention for the control laws.
    """

    def __init__(self, gains: PidGains, trim: dyn.TrimPoint,
                 textbook_turn: bool = False):
        self.gains = gains
        self.anchor = anchor_measurement(trim)
        self.textbook_turn = textbook_turn

    def output(self, overrides: dict[int, float]) -> tuple[float, float]:
        m = self.anchor.copy()
        for ch, val in overrides.items():
            m[ch] = val
        da, de = static_response(
            self.gains, e_roll=-m[CH_EROLL], e_pitch=-m[CH_EPITCH],
            p=m[CH_P], q=m[CH_Q], int_roll=-m[CH_IROLL],
            int_pitch=-m[CH_IPITCH], va=m[CH_VA], phi=m[CH_ROLL],
            theta=m[CH_PITCH], textbook_turn=self.textbook_turn)
        return float(da), float(de)


@dataclass
class SensitivityCurve:
    channel: int
    name: str
    grid: np.ndarray
    delta_a: np.ndarray
    delta_e: np.ndarray
    anchor_index: int

    @property
    def anchor_output(self) -> tuple[float, float]:
        return float(self.delta_a[self.anchor_index]), float(self.delta_e[self.anchor_index])


def sensitivity_sweep(response, channel: int, points: int = 201,
                      half_range: float | None = None) -> SensitivityCurve:
    """Sweep one measurement channel around the anchor, all else frozen."""
    if points < 3 or points % 2 == 0:
        raise ValueError("points must be an odd number >= 3")
    if half_range is None:
        half_range = SWEEP_HALF_RANGE[channel]
    center = response.anchor[channel]
    grid = center + np.linspace(-half_range, half_range, points)
    da = np.empty(points)
    de = np.empty(points)
    for i, val in enumerate(grid):
        da[i], de[i] = response.output({channel: val})
    return SensitivityCurve(channel=channel, name=MEAS_NAMES[channel],
                            grid=grid, delta_a=da, delta_e=de,
                            anchor_index=points // 2)


# the six published gain channels: (key, channel, which output, sign to
# convert the measurement-convention slope into tracking-error convention)
GAIN_CHANNELS = (
    ("da_de_roll", CH_EROLL, "a", -1.0),
    ("de_de_pitch", CH_EPITCH, "e", -1.0),
    ("da_dp", CH_P, "a", 1.0),
    ("de_dq", CH_Q, "e", 1.0),
    ("da_dint_roll", CH_IROLL, "a", -1.0),
    ("de_dint_pitch", CH_IPITCH, "e", -1.0),
)


def _slope(curve: SensitivityCurve, which: str, offset: int) -> float:
    y = curve.delta_a if which == "a" else curve.delta_e
    i0 = curve.anchor_index
    lo, hi = i0 - offset, i0 + offset
    return float((y[hi] - y[lo]) / (curve.grid[hi] - curve.grid[lo]))


def tangent_gains(curves: dict[int, SensitivityCurve],
                  cfg: AnalysisConfig | None = None) -> dict[str, float]:
    """Linearized gains at the anchor from the six sweep curves.

    Central difference at +-probe_fraction of the sweep range (the tangent)
    plus a wide-window secant at +-wide_fraction (suffix `_wide`), reported
    against tracking error so they compare directly with the PID targets.
    """
    cfg = cfg or AnalysisConfig()
    out = {}
    for key, channel, which, sign in GAIN_CHANNELS:
        curve = curves[channel]
        span = (len(curve.grid) - 1) // 2
        probe = max(1, round(cfg.probe_fraction * 2 * span))
        wide = min(span, max(probe + 1, round(cfg.wide_fraction * 2 * span)))
        out[key] = sign * _slope(curve, which, probe)
        out[key + "_wide"] = sign * _slope(curve, which, wide)
    return out


def gain_table(response, cfg: AnalysisConfig | None = None) -> dict[str, float]:
    """Sweep the six gain channels of a response and linearize."""
    cfg = cfg or AnalysisConfig()
    curves = {channel: sensitivity_sweep(response, channel, cfg.grid_points)
              for _, channel, _, _ in GAIN_CHANNELS}
    return tangent_gains(curves, cfg)


# --------------------------------------------------------------- latency sweep

def latency_sweep(controller, env_cfg: EnvConfig, nominal: dyn.UavParams,
                  latencies, seeds, history: int = 10,
                  normalizer: Normalizer | None = None,
                  sequence: StepSequence | None = None) -> list[dict]:
    """Pitch-step smoothness vs actuation delay, nominal model, varied seeds.

    Disturbances stay on (seed variation is the point) but randomization is
    off so latency is the only model change across rows.
    """
    sequence = sequence or pitch_step_sequence()
    rows = []
    for delay in latencies:
        cfg = replace(env_cfg,
                      actuator=replace(env_cfg.actuator, delay=delay),
                      randomization=replace(env_cfg.randomization, enabled=False))
        for seed in seeds:
            metrics, _ = run_step_eval(controller, sequence, cfg, nominal,
                                       seed=seed, history=history,
                                       normalizer=normalizer, disturbances=True)
            rows.append({"latency": delay, "seed": seed,
                         "sm_pitch": metrics["sm_pitch"],
                         "sm_de": metrics["sm_de"],
                         "diverged": metrics["diverged"],
                         "sse_pitch": metrics["sse_pitch"]})
    return rows


def latency_rank_correlation(rows: list[dict], key: str = "sm_pitch") -> float:
    """Spearman rank correlation of the metric against latency (pooled)."""
    lat = [row["latency"] for row in rows]
    val = [row[key] for row in rows]
    rho = stats.spearmanr(lat, val).statistic
    return float(rho)


# ---------------------------------------------------------- offset compensation

def offset_compensate(controller, env_cfg: EnvConfig, nominal: dyn.UavParams,
                      refs, seed: int, history: int = 10,
                      normalizer: Normalizer | None = None,
                      hold: float = 8.0, steady_fraction: float = 0.25,
                      steady_std: float = 2.0 * DEG) -> dict:
    """Estimate the steady-state attitude error and fold it into the references.

    The mean error over the trailing steady segment is added to the reference
    (a controller that settles 2 deg low gets a 2 deg higher reference); the
    rollout is repeated with the adjusted references and both error estimates
    are returned.
    """
    refs = np.asarray(refs, dtype=float)

    def steady_error(target_refs):
        seq = StepSequence(steps=((0.0, target_refs[0], target_refs[1]),),
                           duration=hold)
        metrics, env = run_step_eval(controller, seq, env_cfg, nominal,
                                     seed=seed, history=history,
                                     normalizer=normalizer, disturbances=False)
        rec = env.record.arrays()
        n = len(rec["true_roll"])
        tail = slice(int((1.0 - steady_fraction) * n), n)
        err = np.stack([rec["true_roll"][tail] - refs[0],
                        rec["true_pitch"][tail] - refs[1]], axis=1)
        if metrics["diverged"]:
            raise ValueError("controller diverged before a steady segment formed")
        if np.any(err.std(axis=0) > steady_std):
            raise ValueError(
                f"segment not steady (error std {err.std(axis=0)} rad)")
        return err.mean(axis=0), metrics

    first_err, first_metrics = steady_error(refs)
    adjusted = refs - first_err
    second_err, second_metrics = steady_error(adjusted)
    return {"refs": refs, "adjusted_refs": adjusted,
            "first_error": first_err, "second_error": second_err,
            "first_metrics": first_metrics, "second_metrics": second_metrics}
