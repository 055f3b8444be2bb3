"""Minimal reverse-mode network stack for the policy and critics.

Everything is float64 numpy over a single flat parameter vector per network,
which keeps checkpoints byte-stable, makes Adam trivial, and lets the
gradient check sweep every coordinate of every layer. Only the two fixed
architectures needed here are implemented:

  PolicyNet: input window (history x channels) -> conv-over-time input layer
             (one bank of `filters` length-`history` filters shared across
             channels, per-filter bias) or a dense input layer -> two ReLU
             hidden layers -> mu / log_std heads (2 outputs each).
  QNet:      flat window + action -> two ReLU hidden layers -> scalar.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

LOG2PI = math.log(2.0 * math.pi)
WEIGHTS_MAGIC = b"UAVRLW1\n"
WEIGHTS_VERSION = 1


class ParamLayout:
    """Named (offset, shape) slices into one flat float64 vector."""

    def __init__(self):
        self.slices = {}
        self.size = 0

    def add(self, name: str, shape) -> None:
        n = int(np.prod(shape))
        self.slices[name] = (self.size, tuple(shape))
        self.size += n

    def view(self, flat: np.ndarray, name: str) -> np.ndarray:
        off, shape = self.slices[name]
        return flat[off:off + int(np.prod(shape))].reshape(shape)


def _relu(x):
    return np.maximum(x, 0.0)


def _uniform_init(rng, view, fan_in, scale=1.0):
    bound = scale / math.sqrt(fan_in)
    view[...] = rng.uniform(-bound, bound, size=view.shape)


@dataclass
class PolicyConfig:
    channels: int = 14
    history: int = 10
    filters: int = 8
    hidden: int = 64
    input_layer: str = "conv"  # "conv" or "fc"
    act_dim: int = 2
    log_std_min: float = -20.0
    log_std_max: float = 2.0

    @property
    def obs_dim(self) -> int:
        return self.history * self.channels

    @property
    def feature_dim(self) -> int:
        return self.filters * self.channels

    def to_dict(self):
        return {k: getattr(self, k) for k in
                ("channels", "history", "filters", "hidden", "input_layer",
                 "act_dim", "log_std_min", "log_std_max")}


class PolicyNet:
    """Squashed-Gaussian policy over the observation window."""

    def __init__(self, cfg: PolicyConfig, params: np.ndarray | None = None):
        self.cfg = cfg
        lay = ParamLayout()
        if cfg.input_layer == "conv":
            lay.add("conv_w", (cfg.filters, cfg.history))
            lay.add("conv_b", (cfg.filters,))
        elif cfg.input_layer == "fc":
            lay.add("in_w", (cfg.feature_dim, cfg.obs_dim))
            lay.add("in_b", (cfg.feature_dim,))
        else:
            raise ValueError(f"unknown input_layer {cfg.input_layer!r}")
        lay.add("w1", (cfg.hidden, cfg.feature_dim))
        lay.add("b1", (cfg.hidden,))
        lay.add("w2", (cfg.hidden, cfg.hidden))
        lay.add("b2", (cfg.hidden,))
        lay.add("mu_w", (cfg.act_dim, cfg.hidden))
        lay.add("mu_b", (cfg.act_dim,))
        lay.add("ls_w", (cfg.act_dim, cfg.hidden))
        lay.add("ls_b", (cfg.act_dim,))
        self.layout = lay
        self.params = np.zeros(lay.size) if params is None else np.asarray(params, dtype=float)
        if self.params.shape != (lay.size,):
            raise ValueError(f"expected {lay.size} parameters, got {self.params.shape}")

    def input_layer_param_count(self) -> int:
        name = "conv_w" if self.cfg.input_layer == "conv" else "in_w"
        off0, shape_w = self.layout.slices[name]
        nb = self.cfg.filters if self.cfg.input_layer == "conv" else self.cfg.feature_dim
        return int(np.prod(shape_w)) + nb

    def init(self, rng: np.random.Generator, head_scale: float = 0.01,
             log_std_bias: float = -1.0) -> "PolicyNet":
        v = self.layout.view
        p = self.params
        cfg = self.cfg
        if cfg.input_layer == "conv":
            _uniform_init(rng, v(p, "conv_w"), cfg.history)
            _uniform_init(rng, v(p, "conv_b"), cfg.history)
        else:
            _uniform_init(rng, v(p, "in_w"), cfg.obs_dim)
            _uniform_init(rng, v(p, "in_b"), cfg.obs_dim)
        _uniform_init(rng, v(p, "w1"), cfg.feature_dim)
        _uniform_init(rng, v(p, "b1"), cfg.feature_dim)
        _uniform_init(rng, v(p, "w2"), cfg.hidden)
        _uniform_init(rng, v(p, "b2"), cfg.hidden)
        # near-zero heads: the fresh policy starts at the trim offset
        _uniform_init(rng, v(p, "mu_w"), cfg.hidden, scale=head_scale)
        _uniform_init(rng, v(p, "mu_b"), cfg.hidden, scale=head_scale)
        _uniform_init(rng, v(p, "ls_w"), cfg.hidden, scale=head_scale)
        v(p, "ls_b")[...] = log_std_bias
        return self

    def forward(self, obs: np.ndarray):
        """obs (B, history*channels), newest measurement first.

        Returns (mu, log_std, cache); cache feeds backward().
        """
        v = self.layout.view
        p = self.params
        cfg = self.cfg
        obs = np.atleast_2d(obs)
        B = obs.shape[0]
        if cfg.input_layer == "conv":
            x = obs.reshape(B, cfg.history, cfg.channels)
            z0 = np.einsum("fk,bkc->bfc", v(p, "conv_w"), x)
            z0 += v(p, "conv_b")[None, :, None]
            feat = z0.reshape(B, cfg.feature_dim)
        else:
            x = obs
            feat = obs @ v(p, "in_w").T + v(p, "in_b")
        a1 = feat @ v(p, "w1").T + v(p, "b1")
        h1 = _relu(a1)
        a2 = h1 @ v(p, "w2").T + v(p, "b2")
        h2 = _relu(a2)
        mu = h2 @ v(p, "mu_w").T + v(p, "mu_b")
        ls_raw = h2 @ v(p, "ls_w").T + v(p, "ls_b")
        log_std = np.clip(ls_raw, cfg.log_std_min, cfg.log_std_max)
        cache = (x, feat, a1, h1, a2, h2, ls_raw)
        return mu, log_std, cache

    def backward(self, cache, dmu: np.ndarray, dlog_std: np.ndarray,
                 need_input_grad: bool = False):
        """Accumulate dLoss/dparams given head gradients; optionally dLoss/dobs."""
        v = self.layout.view
        p = self.params
        cfg = self.cfg
        x, feat, a1, h1, a2, h2, ls_raw = cache
        grad = np.zeros_like(self.params)
        g = lambda name: self.layout.view(grad, name)

        dls = dlog_std * ((ls_raw > cfg.log_std_min) & (ls_raw < cfg.log_std_max))
        g("mu_w")[...] = dmu.T @ h2
        g("mu_b")[...] = dmu.sum(axis=0)
        g("ls_w")[...] = dls.T @ h2
        g("ls_b")[...] = dls.sum(axis=0)
        dh2 = dmu @ v(p, "mu_w") + dls @ v(p, "ls_w")
        da2 = dh2 * (a2 > 0)
        g("w2")[...] = da2.T @ h1
        g("b2")[...] = da2.sum(axis=0)
        dh1 = da2 @ v(p, "w2")
        da1 = dh1 * (a1 > 0)
        g("w1")[...] = da1.T @ feat
        g("b1")[...] = da1.sum(axis=0)
        dfeat = da1 @ v(p, "w1")
        dobs = None
        if cfg.input_layer == "conv":
            B = dfeat.shape[0]
            dz0 = dfeat.reshape(B, cfg.filters, cfg.channels)
            g("conv_w")[...] = np.einsum("bfc,bkc->fk", dz0, x)
            g("conv_b")[...] = dz0.sum(axis=(0, 2))
            if need_input_grad:
                dx = np.einsum("fk,bfc->bkc", v(p, "conv_w"), dz0)
                dobs = dx.reshape(B, cfg.obs_dim)
        else:
            g("in_w")[...] = dfeat.T @ x
            g("in_b")[...] = dfeat.sum(axis=0)
            if need_input_grad:
                dobs = dfeat @ v(p, "in_w")
        return grad, dobs

    def act_deterministic(self, obs: np.ndarray) -> np.ndarray:
        mu, _, _ = self.forward(obs)
        return np.tanh(mu)


@dataclass
class QConfig:
    obs_dim: int = 140
    act_dim: int = 2
    hidden: int = 64

    def to_dict(self):
        return {k: getattr(self, k) for k in ("obs_dim", "act_dim", "hidden")}


class QNet:
    """Scalar state-action value over (flat window, action)."""

    def __init__(self, cfg: QConfig, params: np.ndarray | None = None):
        self.cfg = cfg
        lay = ParamLayout()
        in_dim = cfg.obs_dim + cfg.act_dim
        lay.add("w1", (cfg.hidden, in_dim))
        lay.add("b1", (cfg.hidden,))
        lay.add("w2", (cfg.hidden, cfg.hidden))
        lay.add("b2", (cfg.hidden,))
        lay.add("w3", (1, cfg.hidden))
        lay.add("b3", (1,))
        self.layout = lay
        self.params = np.zeros(lay.size) if params is None else np.asarray(params, dtype=float)
        if self.params.shape != (lay.size,):
            raise ValueError(f"expected {lay.size} parameters, got {self.params.shape}")

    def init(self, rng: np.random.Generator) -> "QNet":
        v = self.layout.view
        p = self.params
        in_dim = self.cfg.obs_dim + self.cfg.act_dim
        _uniform_init(rng, v(p, "w1"), in_dim)
        _uniform_init(rng, v(p, "b1"), in_dim)
        _uniform_init(rng, v(p, "w2"), self.cfg.hidden)
        _uniform_init(rng, v(p, "b2"), self.cfg.hidden)
        _uniform_init(rng, v(p, "w3"), self.cfg.hidden)
        _uniform_init(rng, v(p, "b3"), self.cfg.hidden)
        return self

    def forward(self, obs: np.ndarray, act: np.ndarray):
        v = self.layout.view
        p = self.params
        xin = np.concatenate([np.atleast_2d(obs), np.atleast_2d(act)], axis=1)
        a1 = xin @ v(p, "w1").T + v(p, "b1")
        h1 = _relu(a1)
        a2 = h1 @ v(p, "w2").T + v(p, "b2")
        h2 = _relu(a2)
        q = (h2 @ v(p, "w3").T + v(p, "b3"))[:, 0]
        cache = (xin, a1, h1, a2, h2)
        return q, cache

    def backward(self, cache, dq: np.ndarray, need_action_grad: bool = False):
        """dq (B,) -> flat parameter gradient, optionally dLoss/daction."""
        v = self.layout.view
        p = self.params
        xin, a1, h1, a2, h2 = cache
        grad = np.zeros_like(self.params)
        g = lambda name: self.layout.view(grad, name)
        dh2 = dq[:, None] @ v(p, "w3")
        g("w3")[...] = dq[None, :] @ h2
        g("b3")[...] = dq.sum()
        da2 = dh2 * (a2 > 0)
        g("w2")[...] = da2.T @ h1
        g("b2")[...] = da2.sum(axis=0)
        dh1 = da2 @ v(p, "w2")
        da1 = dh1 * (a1 > 0)
        g("w1")[...] = da1.T @ xin
        g("b1")[...] = da1.sum(axis=0)
        dact = None
        if need_action_grad:
            dxin = da1 @ v(p, "w1")
            dact = dxin[:, self.cfg.obs_dim:]
        return grad, dact


# ------------------------------------------------------- squashed Gaussian math

def squash_sample(mu: np.ndarray, log_std: np.ndarray, xi: np.ndarray):
    """a = tanh(mu + sigma*xi) and log pi(a) with the change of variables.

    Returns (action, log_prob, cache) where cache supports the analytic
    partials w.r.t. mu and log_std at fixed noise xi.
    """
    sigma = np.exp(log_std)
    u = mu + sigma * xi
    a = np.tanh(u)
    one_m_a2 = 1.0 - a * a
    # log N(u; mu, sigma) reduces to -0.5 xi^2 - log_std - 0.5 log 2pi
    log_prob = np.sum(-0.5 * xi * xi - log_std - 0.5 * LOG2PI
                      - np.log(one_m_a2 + 1e-6), axis=-1)
    cache = (sigma, xi, a, one_m_a2)
    return a, log_prob, cache


def squash_backward(cache, da: np.ndarray, dlogp: np.ndarray):
    """Pull gradients on (action, log_prob) back to (mu, log_std), xi fixed."""
    sigma, xi, a, one_m_a2 = cache
    du_from_a = da * one_m_a2
    # d(-log(1 - a^2 + eps))/du = 2 a (1 - a^2) / (1 - a^2 + eps)
    du_from_logp = dlogp[:, None] * (2.0 * a * one_m_a2 / (one_m_a2 + 1e-6))
    du = du_from_a + du_from_logp
    dmu = du
    dlog_std = du * sigma * xi - dlogp[:, None]
    return dmu, dlog_std


# ------------------------------------------------------------------- optimizer

class Adam:
    """Adam on one flat parameter vector."""

    def __init__(self, size: int, lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def update(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ----------------------------------------------------------------- weight file

def save_weights(path, arch: dict, params: np.ndarray, extras: dict | None = None) -> None:
    """Self-describing binary: magic, JSON header line, raw little-endian f64."""
    blob = np.ascontiguousarray(params, dtype="<f8").tobytes()
    header = {
        "format_version": WEIGHTS_VERSION,
        "arch": arch,
        "param_count": int(params.size),
        "extras": extras or {},
    }
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(blob)


def load_weights(path):
    """Returns (arch dict, flat float64 params, extras dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(WEIGHTS_MAGIC))
        if magic != WEIGHTS_MAGIC:
            raise ValueError(f"not a weight file (bad magic {magic!r})")
        header = json.loads(fh.readline().decode())
        if header.get("format_version") != WEIGHTS_VERSION:
            raise ValueError(f"unsupported weight format {header.get('format_version')}")
        blob = fh.read(8 * header["param_count"])
        params = np.frombuffer(blob, dtype="<f8").astype(float)
        if params.size != header["param_count"]:
            raise ValueError("truncated weight file")
    return header["arch"], params, header["extras"]


# ------------------------------------------------------------------- gradcheck

def gradcheck(loss_fn, params: np.ndarray, eps: float = 1e-5,
              indices=None, floor: float = 1e-8) -> float:
    """Max relative error between loss_fn's gradient and central differences.

    loss_fn(params) must return (scalar_loss, flat_gradient) and be
    deterministic (fix any sampling noise outside). The floor bounds the
    relative-error denominator from below: central differences resolve
    gradients only down to roundoff(loss)/eps, so coordinates whose gradient
    sits under the floor are held to an absolute tolerance of floor * rel
    instead of a meaningless ratio of roundoff noise.
    """
    _, grad = loss_fn(params)
    if indices is None:
        indices = range(params.size)
    worst = 0.0
    for i in indices:
        orig = params[i]
        params[i] = orig + eps
        lp, _ = loss_fn(params)
        params[i] = orig - eps
        lm, _ = loss_fn(params)
        params[i] = orig
        fd = (lp - lm) / (2.0 * eps)
        err = abs(fd - grad[i]) / max(floor, abs(fd) + abs(grad[i]))
        worst = max(worst, err)
    return worst
