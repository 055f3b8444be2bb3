"""Run configuration tree and its flat key-value text format.

One config file drives a whole run. Keys are dotted paths into nested
dataclasses ("env.reward.roll_bound_deg = 3.0"); values are parsed by the
type of the default. The file starts with a schema line and may reference a
separate airframe parameter file via `model_file`.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, is_dataclass

CONFIG_SCHEMA = "uavrl-config-v1"


@dataclass
class RewardConfig:
    # unit bonus bounds; weights sum to 1.334 at perfect tracking
    roll_bound_deg: float = 3.0
    pitch_bound_deg: float = 3.0
    roll_rate_bound_deg: float = 4.3
    pitch_rate_bound_deg: float = 4.3
    roll_weight: float = 0.5
    pitch_weight: float = 0.5
    roll_rate_weight: float = 0.167
    pitch_rate_weight: float = 0.167


@dataclass
class InitConfig:
    # per-episode initial-condition envelope
    roll_deg: float = 40.0
    pitch_deg: float = 15.0
    va_min: float = 13.0
    va_max: float = 26.0
    rate_deg: float = 60.0
    alpha_deg: float = 8.0
    beta_deg: float = 10.0
    elevon_deg: float = 30.0
    ref_roll_deg: float = 60.0
    ref_pitch_min_deg: float = -25.0
    ref_pitch_max_deg: float = 20.0


@dataclass
class OuConfig:
    enabled: bool = True
    theta: float = 1.0
    sigma_scale: float = 0.005
    # per-channel base, x sigma_scale: p q r alpha beta Va dr dl Iphi Itheta phi theta ephi etheta
    sigma_base: tuple = (1.5, 1.5, 1.5, 1.0, 1.0, 15.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0)


@dataclass
class DrydenConfig:
    enabled: bool = True
    length_u: float = 200.0
    length_v: float = 200.0
    length_w: float = 50.0
    w_intensity_factor: float = 0.1   # sigma_w per m/s of steady wind
    uv_intensity_factor: float = 1.5  # sigma_u = sigma_v = this x sigma_w
    va_ref: float = 18.0


@dataclass
class WindConfig:
    enabled: bool = True
    max_speed: float = 15.0
    vertical_scale: float = 0.1


@dataclass
class JitterConfig:
    enabled: bool = True
    rate_min: float = 250.0
    rate_max: float = 1000.0


@dataclass
class ActuatorConfig:
    delay: float = 0.1
    rate_limit_deg: float = 200.0
    limit_deg: float = 30.0


@dataclass
class RandomizationConfig:
    enabled: bool = True
    coeff_rel: float = 0.2       # static / alpha / beta / deflection derivatives
    rate_coeff_rel: float = 0.5  # rate derivatives (the least identifiable)
    mass_rel: float = 0.1        # mass and inertia
    prop_rel: float = 0.2        # thrust map and reaction torque


@dataclass
class ThrottleConfig:
    target: float = 18.0
    kp: float = 0.15
    ki: float = 0.05
    integrator_clamp: float = 1.0


@dataclass
class EnvConfig:
    dt: float = 0.02
    steps: int = 900
    ref_hold_steps: int = 150
    integrator_decay: float = 0.99
    altitude_init: float = 150.0
    altitude_floor: float = 0.0
    pitch_limit_deg: float = 89.0
    action_scale_deg: float = 30.0
    normalizer_floor: float = 1e-6
    reward: RewardConfig = field(default_factory=RewardConfig)
    init: InitConfig = field(default_factory=InitConfig)
    ou: OuConfig = field(default_factory=OuConfig)
    dryden: DrydenConfig = field(default_factory=DrydenConfig)
    wind: WindConfig = field(default_factory=WindConfig)
    jitter: JitterConfig = field(default_factory=JitterConfig)
    actuator: ActuatorConfig = field(default_factory=ActuatorConfig)
    randomization: RandomizationConfig = field(default_factory=RandomizationConfig)
    throttle: ThrottleConfig = field(default_factory=ThrottleConfig)


@dataclass
class PolicyModelConfig:
    filters: int = 8
    history: int = 10
    hidden: int = 64
    input_layer: str = "conv"
    log_std_min: float = -20.0
    log_std_max: float = 2.0


@dataclass
class TrainerConfig:
    total_steps: int = 40000
    prefill: int = 5000
    batch: int = 256
    lr: float = 3e-4
    alpha_lr: float = 3e-4
    init_alpha: float = 0.2
    discount: float = 0.97
    polyak: float = 5e-3
    target_entropy: float = -2.0
    lambda_ts: float = 5e-2
    lambda_ss: float = 1e-1
    lambda_pa: float = 1e-4
    spatial_noise_std: float = 0.1   # std of N(s, 0.01) in normalized space
    her_ratio: float = 0.4
    buffer_capacity: int = 200000
    grad_steps_per_env_step: float = 2.0
    checkpoint_steps: tuple = (10000, 40000)
    gain_probe_every: int = 5        # episodes between tangent-gain probes
    workers: int = 1


@dataclass
class PidConfig:
    va_star: float = 18.0
    integrator_clamp: float = 0.5236  # rad of surface authority
    coordinated_turn_textbook: bool = False


@dataclass
class AnalysisConfig:
    grid_points: int = 201
    probe_fraction: float = 0.01  # central-difference offset, fraction of range
    wide_fraction: float = 0.25   # secant width for the wide-window slope
    latencies: tuple = (0.01, 0.05, 0.1)
    eval_seeds: int = 5


@dataclass
class RunConfig:
    model_file: str = ""  # empty -> packaged nominal airframe
    env: EnvConfig = field(default_factory=EnvConfig)
    policy: PolicyModelConfig = field(default_factory=PolicyModelConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    pid: PidConfig = field(default_factory=PidConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)


# --------------------------------------------------------------- serialization

def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        if not text:
            return ()
        elem = default[0] if default else 0.0
        return tuple(_parse_value(part, elem) for part in text.split(","))
    return text


def flatten(cfg, prefix: str = "") -> dict:
    out = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        key = f"{prefix}{f.name}"
        if is_dataclass(value):
            out.update(flatten(value, prefix=f"{key}."))
        else:
            out[key] = value
    return out


def to_text(cfg) -> str:
    lines = [f"schema = {CONFIG_SCHEMA}"]
    for key, value in flatten(cfg).items():
        lines.append(f"{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def _set_by_path(cfg, path: str, raw: str) -> None:
    parts = path.split(".")
    obj = cfg
    for part in parts[:-1]:
        if not hasattr(obj, part) or not is_dataclass(getattr(obj, part)):
            raise ValueError(f"unknown config section {path!r}")
        obj = getattr(obj, part)
    leaf = parts[-1]
    if not hasattr(obj, leaf) or is_dataclass(getattr(obj, leaf)):
        raise ValueError(f"unknown config key {path!r}")
    setattr(obj, leaf, _parse_value(raw, getattr(obj, leaf)))


def parse_text(text: str) -> RunConfig:
    cfg = RunConfig()
    schema_seen = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if not schema_seen:
            if key != "schema":
                raise ValueError("first entry must be the schema line")
            if val != CONFIG_SCHEMA:
                raise ValueError(f"unsupported schema {val!r}")
            schema_seen = True
            continue
        _set_by_path(cfg, key, val)
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_text(fh.read())


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(to_text(cfg))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(to_text(cfg).encode()).hexdigest()


def clone(cfg: RunConfig) -> RunConfig:
    """Deep copy through the text form (cheap, and exercises round-tripping)."""
    return parse_text(to_text(cfg))
