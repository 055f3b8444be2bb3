"""Command-line entry point: train, evaluate, sweep, analyze, compare.

Every subcommand takes --seed, --config and --out-dir, writes only under
--out-dir, and leaves a manifest.json recording argv, the config snapshot,
seed, and sha256 hashes of inputs and outputs. Single-worker re-runs with the
same (config, seed) reproduce every CSV byte for byte. UAVRL_OUT_DIR provides
a default output directory when --out-dir is omitted.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis as an
from . import dynamics as dyn
from . import sac as sacmod
from .config import RunConfig, load_config, to_text, clone
from .dynamics import DEG
from .manifest import RunManifest, write_csv
from .pid import calibrate_gains, load_gains


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", default="0",
                        help="integer seed; train accepts a comma list")
    parser.add_argument("--config", default=None, help="run config file")
    parser.add_argument("--out-dir", default=os.environ.get("UAVRL_OUT_DIR"),
                        help="output directory (or set UAVRL_OUT_DIR)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uavrl",
        description="Attitude-control training laboratory for a small flying wing")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a policy, writing checkpoints and metrics")
    _add_common(p)
    p.add_argument("--steps", type=int, default=None, help="override total env steps")
    p.add_argument("--workers", type=int, default=None,
                   help="parallel rollout workers (>1 is not reproducible)")

    p = sub.add_parser("eval", help="closed-loop evaluation of a controller")
    _add_common(p)
    p.add_argument("--controller", choices=("pid", "policy"), default="policy")
    p.add_argument("--weights", default=None, help="policy checkpoint file")
    p.add_argument("--gains", default=None, help="PID gains file (default: calibrated)")
    p.add_argument("--sequence", default=None,
                   help="reference schedule CSV (time,roll_ref,pitch_ref in rad)")
    p.add_argument("--duration", type=float, default=None,
                   help="sequence duration in s (default: last step + 4)")
    p.add_argument("--episodes", type=int, default=0,
                   help="run this many random-reference episodes instead of a sequence")
    p.add_argument("--disturbances", action="store_true",
                   help="keep disturbances on during sequence playback")

    p = sub.add_parser("sensitivity", help="open-loop sweeps and tangent gains")
    _add_common(p)
    p.add_argument("--controller", choices=("pid", "policy"), default="policy")
    p.add_argument("--weights", default=None)
    p.add_argument("--gains", default=None)

    p = sub.add_parser("latency-sweep", help="step smoothness across actuation delays")
    _add_common(p)
    p.add_argument("--controller", choices=("pid", "policy"), default="policy")
    p.add_argument("--weights", default=None)
    p.add_argument("--gains", default=None)
    p.add_argument("--latencies", default=None,
                   help="comma list of delays in s (default from config)")
    p.add_argument("--eval-seeds", type=int, default=None)

    p = sub.add_parser("compare", help="RL vs PID side-by-side metrics and gains")
    _add_common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--gains", default=None)
    p.add_argument("--episodes", type=int, default=10)

    p = sub.add_parser("ablate", help="train conv / fc / fc-history-1 variants")
    _add_common(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--eval-seeds", type=int, default=3)
    return parser


# --------------------------------------------------------------------- helpers

def _setup(args, argv):
    cfg = load_config(args.config) if args.config else RunConfig()
    nominal = dyn.load_params(cfg.model_file) if cfg.model_file else dyn.x8_nominal()
    if args.out_dir is None:
        raise UsageError("--out-dir is required (or set UAVRL_OUT_DIR)")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(args.command, argv, args.seed, out_dir,
                           config_text=to_text(cfg))
    if args.config:
        manifest.add_input(args.config)
    return cfg, nominal, out_dir, manifest


class UsageError(Exception):
    pass


def _seed_list(text: str) -> list[int]:
    try:
        return [int(part) for part in str(text).split(",") if part.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"bad --seed value {text!r}") from exc


def _single_seed(text: str) -> int:
    seeds = _seed_list(text)
    if len(seeds) != 1:
        raise UsageError("this command takes exactly one --seed")
    return seeds[0]


def _controller(args, cfg, nominal, manifest):
    """Build (controller, normalizer, label) from --controller/--weights/--gains."""
    if args.controller == "policy":
        if not args.weights:
            raise UsageError("--controller policy needs --weights")
        manifest.add_input(args.weights)
        net, normalizer, _ = sacmod.load_policy(args.weights)
        return an.PolicyController(net), normalizer, "policy"
    if args.gains:
        manifest.add_input(args.gains)
        gains = load_gains(args.gains)
    else:
        gains, _ = calibrate_gains(va_star=cfg.pid.va_star)
    ctl = an.PidController(gains, dt=cfg.env.dt, clamp=cfg.pid.integrator_clamp,
                           textbook_turn=cfg.pid.coordinated_turn_textbook,
                           action_scale=cfg.env.action_scale_deg * DEG)
    return ctl, None, "pid"


def _load_sequence(path, duration=None) -> an.StepSequence:
    steps = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[:3] != ["time", "roll_ref", "pitch_ref"]:
            raise UsageError(f"sequence file {path} must start with "
                             "'time,roll_ref,pitch_ref'")
        for line in fh:
            if line.strip():
                t, roll, pitch = (float(x) for x in line.split(",")[:3])
                steps.append((t, roll, pitch))
    if not steps:
        raise UsageError(f"sequence file {path} has no rows")
    if duration is None:
        duration = steps[-1][0] + 4.0
    return an.StepSequence(steps=tuple(steps), duration=duration)


def _write_metrics_csv(path, rows: list[dict]) -> None:
    header = list(rows[0].keys())
    write_csv(path, header, [[row[key] for key in header] for row in rows])


# ------------------------------------------------------------------ subcommands

def _cmd_train(args, cfg, nominal, out_dir, manifest) -> None:
    seeds = _seed_list(args.seed)
    if args.steps is not None:
        cfg.trainer.total_steps = args.steps
    summary = []
    for seed in seeds:
        run_dir = out_dir / f"seed_{seed}" if len(seeds) > 1 else out_dir
        trainer = sacmod.SacTrainer(cfg, nominal, seed, out_dir=run_dir,
                                    workers=args.workers)
        rows = trainer.train()
        tail = [row["normalized_reward"] for row in rows[-10:]]
        summary.append({"seed": seed, "episodes": len(rows),
                        "env_steps": trainer.env_steps,
                        "final_reward_mean10": float(np.mean(tail)) if tail else 0.0})
        for name in ("metrics.csv", "policy_final.wts"):
            manifest.add_output(run_dir / name)
        for path in sorted(run_dir.glob("checkpoint_*.wts")):
            manifest.add_output(path)
    if len(seeds) > 1:
        finals = np.array([row["final_reward_mean10"] for row in summary])
        summary.append({"seed": "mean", "episodes": "", "env_steps": "",
                        "final_reward_mean10": float(finals.mean())})
        summary.append({"seed": "std", "episodes": "", "env_steps": "",
                        "final_reward_mean10": float(finals.std())})
        _write_metrics_csv(out_dir / "summary.csv", summary)
        manifest.add_output(out_dir / "summary.csv")


def _cmd_eval(args, cfg, nominal, out_dir, manifest) -> None:
    seed = _single_seed(args.seed)
    controller, normalizer, label = _controller(args, cfg, nominal, manifest)
    history = controller.net.cfg.history if label == "policy" else cfg.policy.history
    if args.episodes > 0:
        result = an.eval_episodes(controller, cfg.env, nominal, args.episodes,
                                  seed, history=history, normalizer=normalizer)
        rows = [{"episode": i, "normalized_return": r}
                for i, r in enumerate(result["returns"])]
        rows.append({"episode": "mean", "normalized_return": result["mean"]})
        rows.append({"episode": "std", "normalized_return": result["std"]})
        _write_metrics_csv(out_dir / "episodes.csv", rows)
        manifest.add_output(out_dir / "episodes.csv")
        return
    if args.sequence:
        manifest.add_input(args.sequence)
        sequence = _load_sequence(args.sequence, args.duration)
    else:
        sequence = an.default_sequence()
    metrics, env = an.run_step_eval(controller, sequence, cfg.env, nominal,
                                    seed=seed, history=history,
                                    normalizer=normalizer,
                                    disturbances=args.disturbances)
    _write_metrics_csv(out_dir / "step_metrics.csv", [{"controller": label, **metrics}])
    env.write_trace(out_dir / "trace.csv")
    manifest.add_output(out_dir / "step_metrics.csv")
    manifest.add_output(out_dir / "trace.csv")


def _response_for(args, cfg, nominal, manifest):
    controller, normalizer, label = _controller(args, cfg, nominal, manifest)
    trim = dyn.trim(nominal, cfg.env.throttle.target)
    if label == "policy":
        return an.PolicyResponse(controller.net, normalizer, trim,
                                 cfg.env.action_scale_deg * DEG), label
    return an.PidResponse(controller.gains, trim,
                          cfg.pid.coordinated_turn_textbook), label


def _cmd_sensitivity(args, cfg, nominal, out_dir, manifest) -> None:
    response, label = _response_for(args, cfg, nominal, manifest)
    curve_rows = []
    curves = {}
    for channel in sorted(an.SWEEP_HALF_RANGE):
        curve = an.sensitivity_sweep(response, channel, cfg.analysis.grid_points)
        curves[channel] = curve
        for x, da, de in zip(curve.grid, curve.delta_a, curve.delta_e):
            curve_rows.append([channel, curve.name, x, da, de])
    write_csv(out_dir / "curves.csv",
              ["channel", "name", "value", "delta_a", "delta_e"], curve_rows)
    gains = an.tangent_gains(curves, cfg.analysis)
    write_csv(out_dir / "gains.csv", ["gain", "value"],
              [[key, val] for key, val in gains.items()])
    manifest.add_output(out_dir / "curves.csv")
    manifest.add_output(out_dir / "gains.csv")


def _cmd_latency(args, cfg, nominal, out_dir, manifest) -> None:
    seed = _single_seed(args.seed)
    controller, normalizer, label = _controller(args, cfg, nominal, manifest)
    history = controller.net.cfg.history if label == "policy" else cfg.policy.history
    if args.latencies:
        latencies = [float(x) for x in args.latencies.split(",")]
    else:
        latencies = list(cfg.analysis.latencies)
    n_seeds = args.eval_seeds or cfg.analysis.eval_seeds
    rows = an.latency_sweep(controller, cfg.env, nominal, latencies,
                            seeds=[seed + i for i in range(n_seeds)],
                            history=history, normalizer=normalizer)
    _write_metrics_csv(out_dir / "latency.csv", rows)
    rho = an.latency_rank_correlation(rows)
    write_csv(out_dir / "latency_summary.csv",
              ["metric", "value"],
              [["spearman_sm_pitch_vs_latency", rho],
               ["diverged_total", sum(r["diverged"] for r in rows)]])
    manifest.add_output(out_dir / "latency.csv")
    manifest.add_output(out_dir / "latency_summary.csv")


def _cmd_compare(args, cfg, nominal, out_dir, manifest) -> None:
    seed = _single_seed(args.seed)
    manifest.add_input(args.weights)
    net, normalizer, _ = sacmod.load_policy(args.weights)
    policy_ctl = an.PolicyController(net)
    if args.gains:
        manifest.add_input(args.gains)
        gains = load_gains(args.gains)
    else:
        gains, _ = calibrate_gains(va_star=cfg.pid.va_star)
    pid_ctl = an.PidController(gains, dt=cfg.env.dt, clamp=cfg.pid.integrator_clamp,
                               textbook_turn=cfg.pid.coordinated_turn_textbook,
                               action_scale=cfg.env.action_scale_deg * DEG)
    trim = dyn.trim(nominal, cfg.env.throttle.target)
    sequence = an.default_sequence()

    rows = []
    for label, ctl, norm, hist in (
            ("policy", policy_ctl, normalizer, net.cfg.history),
            ("pid", pid_ctl, None, cfg.policy.history)):
        metrics, _ = an.run_step_eval(ctl, sequence, cfg.env, nominal, seed=seed,
                                      history=hist, normalizer=norm)
        episodes = an.eval_episodes(ctl, cfg.env, nominal, args.episodes, seed,
                                    history=hist, normalizer=norm)
        rows.append({"controller": label, **metrics,
                     "episode_reward_mean": episodes["mean"],
                     "episode_reward_std": episodes["std"],
                     "episode_terminations": episodes["terminations"]})
    _write_metrics_csv(out_dir / "compare.csv", rows)

    policy_gains = an.gain_table(an.PolicyResponse(net, normalizer, trim,
                                                   cfg.env.action_scale_deg * DEG),
                                 cfg.analysis)
    pid_gains = an.gain_table(an.PidResponse(gains, trim,
                                             cfg.pid.coordinated_turn_textbook),
                              cfg.analysis)
    write_csv(out_dir / "gains_compare.csv", ["gain", "policy", "pid"],
              [[key, policy_gains[key], pid_gains[key]] for key in policy_gains])
    manifest.add_output(out_dir / "compare.csv")
    manifest.add_output(out_dir / "gains_compare.csv")


ABLATION_VARIANTS = (
    ("conv", {"input_layer": "conv"}),
    ("fc", {"input_layer": "fc"}),
    ("fch1", {"input_layer": "fc", "history": 1}),
)


def _cmd_ablate(args, cfg, nominal, out_dir, manifest) -> None:
    seeds = _seed_list(args.seed)
    if args.steps is not None:
        cfg.trainer.total_steps = args.steps
    rows = []
    for name, overrides in ABLATION_VARIANTS:
        vcfg = clone(cfg)
        for key, val in overrides.items():
            setattr(vcfg.policy, key, val)
        for seed in seeds:
            run_dir = out_dir / name / f"seed_{seed}"
            trainer = sacmod.SacTrainer(vcfg, nominal, seed, out_dir=run_dir)
            metrics = trainer.train()
            tail = [row["normalized_reward"] for row in metrics[-10:]]
            ctl = an.PolicyController(trainer.policy)
            sms = []
            for es in range(args.eval_seeds):
                m, _ = an.run_step_eval(ctl, an.pitch_step_sequence(), vcfg.env,
                                        nominal, seed=1000 + es,
                                        history=vcfg.policy.history,
                                        normalizer=trainer.normalizer)
                sms.append(m["sm_de"])
            rows.append({"variant": name, "seed": seed,
                         "final_reward_mean10": float(np.mean(tail)),
                         "sm_de_mean": float(np.mean(sms)),
                         "env_steps": trainer.env_steps})
            manifest.add_output(run_dir / "metrics.csv")
            manifest.add_output(run_dir / "policy_final.wts")
    _write_metrics_csv(out_dir / "ablation.csv", rows)
    manifest.add_output(out_dir / "ablation.csv")


_HANDLERS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sensitivity": _cmd_sensitivity,
    "latency-sweep": _cmd_latency,
    "compare": _cmd_compare,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    manifest = None
    try:
        cfg, nominal, out_dir, manifest = _setup(args, argv)
        _HANDLERS[args.command](args, cfg, nominal, out_dir, manifest)
        manifest.finish("ok")
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: record it, exit 1
        if manifest is not None:
            manifest.finish("failed", error=f"{type(exc).__name__}: {exc}")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
