"""Soft actor-critic training loop with smoothness-regularized actor updates.

Twin critics with Polyak-averaged targets, auto-tuned entropy coefficient,
uniform-random buffer prefill, hindsight goal relabeling within reference
segments, and an actor objective augmented with temporal/spatial smoothness
penalties on the deterministic policy output plus a pre-activation magnitude
penalty.

Interleaving is episode-block: collect one episode, then run one gradient
step per collected env step. This keeps hindsight relabeling simple (it needs
whole episodes) and makes single-worker runs bit-reproducible.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from . import analysis as an
from . import dynamics as dyn
from . import nnet as nn
from .config import RunConfig, config_hash
from .env import (AttitudeEnv, EpisodeRecord, Normalizer, N_CHANNELS,
                  CH_IROLL, CH_IPITCH, CH_ROLL, CH_PITCH, CH_EROLL, CH_EPITCH,
                  reward_bonuses, combine_bonuses)
from .manifest import write_csv


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; message carries diagnostics."""


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions with uniform sampling.

    Observation windows are stored raw (pre-normalization, float32); reward,
    actions and the hindsight fields stay float64 so the stored reward can be
    recomputed bit-exactly from (achieved, goal, rate bits). Normalization
    happens at sample time with the trainer's current statistics.
    """

    def __init__(self, capacity: int, history: int, channels: int = N_CHANNELS,
                 act_dim: int = 2):
        self.capacity = capacity
        self.history = history
        self.obs = np.zeros((capacity, history, channels), np.float32)
        self.next_obs = np.zeros((capacity, history, channels), np.float32)
        self.act = np.zeros((capacity, act_dim))
        self.rew = np.zeros(capacity)
        self.done = np.zeros(capacity)
        self.achieved = np.zeros((capacity, 2))   # true attitude after the step
        self.goal = np.zeros((capacity, 2))       # reference during the step
        self.rate_bits = np.zeros((capacity, 2))  # rate-bonus indicators
        self.ptr = 0
        self.size = 0

    def add(self, obs, act, rew, next_obs, done, achieved, goal, rate_bits) -> None:
        i = self.ptr
        self.obs[i] = obs
        self.next_obs[i] = next_obs
        self.act[i] = act
        self.rew[i] = rew
        self.done[i] = done
        self.achieved[i] = achieved
        self.goal[i] = goal
        self.rate_bits[i] = rate_bits
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, rng: np.random.Generator,
               normalizer: Normalizer) -> dict:
        idx = rng.integers(0, self.size, batch)
        obs = normalizer.normalize(self.obs[idx].astype(float))
        nxt = normalizer.normalize(self.next_obs[idx].astype(float))
        return {
            "obs": obs.reshape(batch, -1),
            "next_obs": nxt.reshape(batch, -1),
            "act": self.act[idx],
            "rew": self.rew[idx],
            "done": self.done[idx],
            "idx": idx,
        }


# ------------------------------------------------------------------- hindsight

def her_relabel(record: EpisodeRecord, reward_cfg, decay: float,
                hold_steps: int, ratio: float, rng: np.random.Generator) -> list[dict]:
    """Relabel a fraction of transitions with achieved future attitudes.

    The replacement goal comes from a later observation of the same
    reference segment (references are piecewise constant, so those attitudes
    were reachable under the segment's dynamics). Error and integrator
    channels are re-accumulated from the segment start under the new goal,
    using the stored noisy attitude measurements; the reward is recomputed
    from the true attitude with the original rate-bonus bits.
    """
    out = []
    if ratio <= 0.0 or record.steps == 0:
        return out
    meas = np.asarray(record.measurements)
    n_steps = record.steps
    for t in range(n_steps):
        if rng.random() >= ratio:
            continue
        seg = t // hold_steps
        k0 = seg * hold_steps
        seg_end = min((seg + 1) * hold_steps, n_steps)
        f = int(rng.integers(t + 1, seg_end + 1))
        goal = np.array([record.true_roll[f], record.true_pitch[f]])

        # re-run the integrator recursion from the segment start through obs t+1
        errs = meas[k0:t + 2, [CH_ROLL, CH_PITCH]] - goal
        integ = np.empty_like(errs)
        prev = meas[k0 - 1, [CH_IROLL, CH_IPITCH]] if k0 > 0 else np.zeros(2)
        for k in range(errs.shape[0]):
            prev = decay * prev + errs[k]
            integ[k] = prev

        def rebuild(obs_idx):
            rows = []
            for j in range(record.history):
                i = max(obs_idx - j, 0)
                row = meas[i].copy()
                if i >= k0:
                    row[CH_IROLL], row[CH_IPITCH] = integ[i - k0]
                    row[CH_EROLL], row[CH_EPITCH] = errs[i - k0]
                rows.append(row)
            return np.stack(rows)

        b_roll, b_pitch, _, _ = reward_bonuses(
            reward_cfg, record.true_roll[t + 1] - goal[0],
            record.true_pitch[t + 1] - goal[1], 0.0, 0.0)
        rate_bits = record.bonuses[t][2:]
        rew = combine_bonuses(reward_cfg, b_roll, b_pitch, *rate_bits)
        out.append({
            "obs": rebuild(t),
            "act": record.actions[t],
            "rew": rew,
            "next_obs": rebuild(t + 1),
            "done": record.terminals[t],
            "achieved": (record.true_roll[t + 1], record.true_pitch[t + 1]),
            "goal": goal,
            "rate_bits": rate_bits,
        })
    return out


# --------------------------------------------------------------------- trainer

class LossBreakdown(dict):
    """Per-update actor objective components (sac/ts/ss/pa) plus critic loss."""


class SacTrainer:
    def __init__(self, cfg: RunConfig, nominal: dyn.UavParams, seed: int,
                 out_dir=None, workers: int | None = None):
        self.cfg = cfg
        self.nominal = nominal
        self.seed = seed
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.workers = workers if workers is not None else cfg.trainer.workers

        root = np.random.SeedSequence(seed)
        (ss_env, ss_init, ss_act, ss_prefill, ss_sample, ss_noise,
         ss_her) = root.spawn(7)
        tc = cfg.trainer
        self.history = cfg.policy.history
        self.normalizer = Normalizer(N_CHANNELS, cfg.env.normalizer_floor)
        self.env = AttitudeEnv(cfg.env, nominal, np.random.default_rng(ss_env),
                               history=self.history, training=True,
                               normalizer=self.normalizer)
        self.worker_envs = []
        if self.workers > 1:
            for ss in ss_env.spawn(self.workers):
                self.worker_envs.append(
                    AttitudeEnv(cfg.env, nominal, np.random.default_rng(ss),
                                history=self.history, training=True,
                                normalizer=self.normalizer))

        pcfg = nn.PolicyConfig(
            channels=N_CHANNELS, history=self.history, filters=cfg.policy.filters,
            hidden=cfg.policy.hidden, input_layer=cfg.policy.input_layer,
            log_std_min=cfg.policy.log_std_min, log_std_max=cfg.policy.log_std_max)
        rng_init = np.random.default_rng(ss_init)
        self.policy = nn.PolicyNet(pcfg).init(rng_init)
        qcfg = nn.QConfig(obs_dim=pcfg.obs_dim, act_dim=pcfg.act_dim,
                          hidden=cfg.policy.hidden)
        self.q1 = nn.QNet(qcfg).init(rng_init)
        self.q2 = nn.QNet(qcfg).init(rng_init)
        self.q1_target = nn.QNet(qcfg, self.q1.params.copy())
        self.q2_target = nn.QNet(qcfg, self.q2.params.copy())

        self.opt_pi = nn.Adam(self.policy.params.size, lr=tc.lr)
        self.opt_q1 = nn.Adam(self.q1.params.size, lr=tc.lr)
        self.opt_q2 = nn.Adam(self.q2.params.size, lr=tc.lr)
        self.log_alpha = np.array([math.log(tc.init_alpha)])
        self.opt_alpha = nn.Adam(1, lr=tc.alpha_lr)

        self.buffer = ReplayBuffer(tc.buffer_capacity, self.history)
        self.rng_act = np.random.default_rng(ss_act)
        self.rng_prefill = np.random.default_rng(ss_prefill)
        self.rng_sample = np.random.default_rng(ss_sample)
        self.rng_noise = np.random.default_rng(ss_noise)
        self.rng_her = np.random.default_rng(ss_her)

        self.env_steps = 0
        self.episodes = 0
        self.grad_steps = 0
        self.grad_debt = 0.0
        self.metrics_rows = []
        self.last_probe = {key: float("nan") for key, *_ in an.GAIN_CHANNELS}
        self.trim = self.env.trim

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    # ------------------------------------------------------------- collection

    def _ingest(self, record: EpisodeRecord) -> None:
        for t in range(record.steps):
            self.buffer.add(
                record.window(t), record.actions[t], record.rewards[t],
                record.window(t + 1), record.terminals[t],
                (record.true_roll[t + 1], record.true_pitch[t + 1]),
                record.refs[t], record.bonuses[t][2:])
        for tr in her_relabel(record, self.cfg.env.reward,
                              self.cfg.env.integrator_decay,
                              self.cfg.env.ref_hold_steps,
                              self.cfg.trainer.her_ratio, self.rng_her):
            self.buffer.add(tr["obs"], tr["act"], tr["rew"], tr["next_obs"],
                            tr["done"], tr["achieved"], tr["goal"],
                            tr["rate_bits"])

    def prefill(self, n: int | None = None) -> None:
        """Fill the buffer with uniform-random actions; no relabeling, no learning."""
        n = self.cfg.trainer.prefill if n is None else n
        added = 0
        while added < n:
            obs = self.env.reset()
            done = False
            while not done:
                action = self.rng_prefill.uniform(-1.0, 1.0, 2)
                obs, rew, done, info = self.env.step(action)
                rec = self.env.record
                t = rec.steps - 1
                self.buffer.add(rec.window(t), rec.actions[t], rec.rewards[t],
                                rec.window(t + 1), rec.terminals[t],
                                (rec.true_roll[t + 1], rec.true_pitch[t + 1]),
                                rec.refs[t], rec.bonuses[t][2:])
                added += 1
                if added >= n:
                    break

    def _rollout(self, env: AttitudeEnv, rng_act: np.random.Generator) -> EpisodeRecord:
        obs = env.reset()
        done = False
        while not done:
            mu, log_std, _ = self.policy.forward(obs[None, :])
            xi = rng_act.standard_normal((1, 2))
            action, _, _ = nn.squash_sample(mu, log_std, xi)
            obs, _, done, _ = env.step(action[0])
        return env.record

    # ---------------------------------------------------------------- updates

    def critic_update(self, batch: dict) -> float:
        tc = self.cfg.trainer
        mu_n, ls_n, _ = self.policy.forward(batch["next_obs"])
        xi = self.rng_noise.standard_normal(mu_n.shape)
        a_next, logp_next, _ = nn.squash_sample(mu_n, ls_n, xi)
        q1_n, _ = self.q1_target.forward(batch["next_obs"], a_next)
        q2_n, _ = self.q2_target.forward(batch["next_obs"], a_next)
        soft = np.minimum(q1_n, q2_n) - self.alpha * logp_next
        y = batch["rew"] + tc.discount * (1.0 - batch["done"]) * soft

        loss = 0.0
        for net, opt in ((self.q1, self.opt_q1), (self.q2, self.opt_q2)):
            q, cache = net.forward(batch["obs"], batch["act"])
            err = q - y
            loss += float(np.mean(err * err))
            grad, _ = net.backward(cache, 2.0 * err / err.size)
            opt.update(net.params, grad)
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"critic loss non-finite at grad step {self.grad_steps} "
                f"(alpha={self.alpha:.3g}, |y|max={np.abs(y).max():.3g})")

        tau = tc.polyak
        self.q1_target.params += tau * (self.q1.params - self.q1_target.params)
        self.q2_target.params += tau * (self.q2.params - self.q2_target.params)
        return loss

    def _actor_terms(self, batch: dict, xi: np.ndarray, noise: np.ndarray,
                     policy: nn.PolicyNet | None = None):
        """Loss components and the flat actor gradient (critics fixed)."""
        tc = self.cfg.trainer
        pi = policy or self.policy
        B = batch["obs"].shape[0]

        mu, log_std, cache = pi.forward(batch["obs"])
        a, logp, scache = nn.squash_sample(mu, log_std, xi)
        q1, c1 = self.q1.forward(batch["obs"], a)
        q2, c2 = self.q2.forward(batch["obs"], a)
        qmin = np.minimum(q1, q2)
        j_sac = float(np.mean(self.alpha * logp - qmin))

        pick1 = (q1 <= q2).astype(float)
        _, dact1 = self.q1.backward(c1, -pick1 / B, need_action_grad=True)
        _, dact2 = self.q2.backward(c2, -(1.0 - pick1) / B, need_action_grad=True)
        da = dact1 + dact2
        dlogp = np.full(B, self.alpha / B)
        dmu, dls = nn.squash_backward(scache, da, dlogp)

        # smoothness terms act on the deterministic output tanh(mu)
        pi_s = np.tanh(mu)
        mu_n, _, cache_n = pi.forward(batch["next_obs"])
        pi_n = np.tanh(mu_n)
        mu_h, _, cache_h = pi.forward(batch["obs"] + noise)
        pi_h = np.tanh(mu_h)

        def norm_rows(d):
            return np.sqrt(np.sum(d * d, axis=1))

        diff_ts = pi_s - pi_n
        n_ts = norm_rows(diff_ts)
        j_ts = float(np.mean(n_ts))
        u_ts = diff_ts / np.maximum(n_ts, 1e-12)[:, None]

        diff_ss = pi_s - pi_h
        n_ss = norm_rows(diff_ss)
        j_ss = float(np.mean(n_ss))
        u_ss = diff_ss / np.maximum(n_ss, 1e-12)[:, None]

        n_pa = norm_rows(mu)
        j_pa = float(np.mean(n_pa))
        u_pa = mu / np.maximum(n_pa, 1e-12)[:, None]

        dpi_s = (tc.lambda_ts * u_ts + tc.lambda_ss * u_ss) / B
        dmu += dpi_s * (1.0 - pi_s * pi_s) + tc.lambda_pa * u_pa / B
        grad, _ = pi.backward(cache, dmu, dls)
        dmu_n = -tc.lambda_ts * u_ts / B * (1.0 - pi_n * pi_n)
        grad += pi.backward(cache_n, dmu_n, np.zeros_like(dls))[0]
        dmu_h = -tc.lambda_ss * u_ss / B * (1.0 - pi_h * pi_h)
        grad += pi.backward(cache_h, dmu_h, np.zeros_like(dls))[0]

        total = j_sac + tc.lambda_ts * j_ts + tc.lambda_ss * j_ss + tc.lambda_pa * j_pa
        breakdown = LossBreakdown(j_sac=j_sac, j_ts=j_ts, j_ss=j_ss, j_pa=j_pa,
                                  j_total=total, logp_mean=float(np.mean(logp)))
        return grad, breakdown, logp

    def actor_objective(self, params: np.ndarray, batch: dict, xi: np.ndarray,
                        noise: np.ndarray) -> float:
        """Total actor loss at given parameters, noise fixed (for grad checks)."""
        probe = nn.PolicyNet(self.policy.cfg, params.copy())
        tc = self.cfg.trainer
        mu, log_std, _ = probe.forward(batch["obs"])
        a, logp, _ = nn.squash_sample(mu, log_std, xi)
        q1, _ = self.q1.forward(batch["obs"], a)
        q2, _ = self.q2.forward(batch["obs"], a)
        j_sac = float(np.mean(self.alpha * logp - np.minimum(q1, q2)))
        pi_s = np.tanh(mu)
        pi_n = np.tanh(probe.forward(batch["next_obs"])[0])
        pi_h = np.tanh(probe.forward(batch["obs"] + noise)[0])
        j_ts = float(np.mean(np.linalg.norm(pi_s - pi_n, axis=1)))
        j_ss = float(np.mean(np.linalg.norm(pi_s - pi_h, axis=1)))
        j_pa = float(np.mean(np.linalg.norm(mu, axis=1)))
        return j_sac + tc.lambda_ts * j_ts + tc.lambda_ss * j_ss + tc.lambda_pa * j_pa

    def actor_update(self, batch: dict) -> LossBreakdown:
        tc = self.cfg.trainer
        xi = self.rng_noise.standard_normal((batch["obs"].shape[0], 2))
        noise = tc.spatial_noise_std * self.rng_noise.standard_normal(
            batch["obs"].shape)
        grad, breakdown, logp = self._actor_terms(batch, xi, noise)
        if not np.isfinite(breakdown["j_total"]):
            raise TrainingDiverged(
                f"actor loss non-finite at grad step {self.grad_steps}: {breakdown}")
        self.opt_pi.update(self.policy.params, grad)

        # entropy temperature: push E[log pi] toward the target entropy
        dalpha = -float(np.mean(logp) + tc.target_entropy)
        self.opt_alpha.update(self.log_alpha, np.array([dalpha]))
        return breakdown

    def gradient_step(self) -> LossBreakdown:
        batch = self.buffer.sample(self.cfg.trainer.batch, self.rng_sample,
                                   self.normalizer)
        closs = self.critic_update(batch)
        breakdown = self.actor_update(batch)
        breakdown["critic_loss"] = closs
        breakdown["alpha"] = self.alpha
        self.grad_steps += 1
        return breakdown

    # ----------------------------------------------------------------- training

    def probe_gains(self) -> dict:
        response = an.PolicyResponse(self.policy, self.normalizer, self.trim,
                                     self.cfg.env.action_scale_deg * dyn.DEG)
        table = an.gain_table(response, self.cfg.analysis)
        self.last_probe = {key: table[key] for key, *_ in an.GAIN_CHANNELS}
        return self.last_probe

    def _checkpoint_extras(self) -> dict:
        return {
            "normalizer": self.normalizer.state_dict(),
            "trim": {"va": self.trim.va, "alpha": self.trim.alpha,
                     "theta": self.trim.theta, "elevon": self.trim.elevon,
                     "throttle": self.trim.throttle},
            "env_steps": self.env_steps,
            "episodes": self.episodes,
            "seed": self.seed,
            "config_sha256": config_hash(self.cfg),
            "alpha": self.alpha,
        }

    def save_checkpoint(self, path) -> None:
        nn.save_weights(path, {"kind": "policy", **self.policy.cfg.to_dict()},
                        self.policy.params, self._checkpoint_extras())

    def train(self, total_steps: int | None = None, progress=None) -> list[dict]:
        """Run training; returns the metrics rows (also written to out_dir)."""
        tc = self.cfg.trainer
        total = tc.total_steps if total_steps is None else total_steps
        self.prefill(tc.prefill)
        pending = sorted(set(int(s) for s in tc.checkpoint_steps if s <= total))

        while self.env_steps < total:
            if self.workers > 1:
                records = self._collect_parallel()
            else:
                records = [self._rollout(self.env, self.rng_act)]
            for record in records:
                self._ingest(record)
                self.env_steps += record.steps
                self.episodes += 1

                self.grad_debt += record.steps * tc.grad_steps_per_env_step
                sums, count = {}, 0
                while self.grad_debt >= 1.0:
                    breakdown = self.gradient_step()
                    self.grad_debt -= 1.0
                    count += 1
                    for key, val in breakdown.items():
                        sums[key] = sums.get(key, 0.0) + val
                means = {key: val / count for key, val in sums.items()} if count else {}

                if self.episodes % tc.gain_probe_every == 1 or not self.metrics_rows:
                    self.probe_gains()
                row = {
                    "step": self.env_steps,
                    "episode": self.episodes,
                    "ep_steps": record.steps,
                    "normalized_reward": float(np.sum(record.rewards))
                                         / (self.cfg.env.steps * self.env.max_reward),
                    "terminated": 0 if record.termination is None else 1,
                    **{key: means.get(key, float("nan"))
                       for key in ("critic_loss", "j_sac", "j_ts", "j_ss",
                                   "j_pa", "alpha", "logp_mean")},
                    **self.last_probe,
                }
                self.metrics_rows.append(row)
                if progress is not None:
                    progress(row)

                while pending and self.env_steps >= pending[0]:
                    step = pending.pop(0)
                    if self.out_dir is not None:
                        self.save_checkpoint(self.out_dir / f"checkpoint_{step:06d}.wts")

        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            for step in pending:
                self.save_checkpoint(self.out_dir / f"checkpoint_{step:06d}.wts")
            self.save_checkpoint(self.out_dir / "policy_final.wts")
            self.write_metrics(self.out_dir / "metrics.csv")
        return self.metrics_rows

    def write_metrics(self, path) -> None:
        header = list(self.metrics_rows[0].keys()) if self.metrics_rows else [
            "step", "episode"]
        write_csv(path, header, [[row[k] for k in header]
                                 for row in self.metrics_rows])

    def _collect_parallel(self) -> list[EpisodeRecord]:
        """One episode per worker env, collected concurrently (not reproducible:
        thread scheduling reorders normalizer updates and buffer insertion)."""
        from concurrent.futures import ThreadPoolExecutor
        rngs = [np.random.default_rng(self.rng_act.integers(2 ** 63))
                for _ in self.worker_envs]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            futures = [pool.submit(self._rollout, env, rng)
                       for env, rng in zip(self.worker_envs, rngs)]
            return [f.result() for f in futures]


# ------------------------------------------------------------------ evaluation

def load_policy(path):
    """Rebuild (policy, normalizer, extras) from a checkpoint file."""
    arch, params, extras = nn.load_weights(path)
    if arch.get("kind") != "policy":
        raise ValueError(f"{path} is not a policy checkpoint")
    cfg = nn.PolicyConfig(
        channels=arch["channels"], history=arch["history"],
        filters=arch["filters"], hidden=arch["hidden"],
        input_layer=arch["input_layer"], act_dim=arch["act_dim"],
        log_std_min=arch["log_std_min"], log_std_max=arch["log_std_max"])
    net = nn.PolicyNet(cfg, params)
    normalizer = Normalizer.from_state(extras["normalizer"])
    return net, normalizer, extras


def random_baseline(cfg: RunConfig, nominal: dyn.UavParams, n_episodes: int,
                    seed: int) -> dict:
    """Normalized return of uniform-random actions on the configured env."""
    controller = an.RandomController(np.random.default_rng(seed + 1))
    return an.eval_episodes(controller, cfg.env, nominal, n_episodes, seed,
                            history=cfg.policy.history)
