"""Stochastic disturbance models.

Ornstein-Uhlenbeck measurement noise (exact discretization, so the step size
may vary), Dryden-form turbulence filters in the body frame, per-episode
steady wind, and exponential control-period jitter.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.signal import lfilter


class OuProcess:
    """Vector Ornstein-Uhlenbeck process dw = theta*(mu - w)dt + sigma dW.

    Uses the exact one-step transition
        w <- mu + (w - mu) e^{-theta dt} + sigma sqrt((1 - e^{-2 theta dt})/(2 theta)) xi
    which stays correct under varying dt (the control period jitters).
    """

    def __init__(self, sigma, theta: float = 1.0, mu: float = 0.0):
        self.sigma = np.asarray(sigma, dtype=float)
        self.theta = float(theta)
        self.mu = float(mu)
        if self.theta <= 0:
            raise ValueError("theta must be > 0")
        self.state = np.zeros_like(self.sigma)

    @property
    def stationary_std(self) -> np.ndarray:
        return self.sigma / math.sqrt(2.0 * self.theta)

    def reset(self) -> None:
        self.state[:] = 0.0

    def step(self, dt: float, rng: np.random.Generator) -> np.ndarray:
        decay = math.exp(-self.theta * dt)
        scale = math.sqrt((1.0 - decay * decay) / (2.0 * self.theta))
        xi = rng.standard_normal(self.sigma.shape)
        self.state = self.mu + (self.state - self.mu) * decay + self.sigma * scale * xi
        return self.state.copy()

    def sample_path(self, n: int, dt: float, rng: np.random.Generator) -> np.ndarray:
        """(n, len(sigma)) path, identical to n step() calls on the same rng."""
        decay = math.exp(-self.theta * dt)
        scale = math.sqrt((1.0 - decay * decay) / (2.0 * self.theta))
        xi = rng.standard_normal((n, self.sigma.size))
        drive = xi * (self.sigma * scale)
        zi = (decay * (self.state - self.mu))[None, :]
        centered, _ = lfilter([1.0], [1.0, -decay], drive, axis=0, zi=zi)
        path = self.mu + centered
        self.state = path[-1].copy()
        return path


def sample_episode_wind(rng: np.random.Generator, max_speed: float = 15.0,
                        vertical_scale: float = 0.1) -> np.ndarray:
    """Steady NED wind for one episode: U(0, max) magnitude, mostly horizontal."""
    magnitude = rng.uniform(0.0, max_speed)
    direction = rng.standard_normal(3)
    direction[2] *= vertical_scale
    norm = np.linalg.norm(direction)
    if norm < 1e-12:
        direction, norm = np.array([1.0, 0.0, 0.0]), 1.0
    return magnitude * direction / norm


def sample_jitter_rate(rng: np.random.Generator, lo: float = 250.0,
                       hi: float = 1000.0) -> float:
    """Per-episode exponential rate kappa; mean extra delay 1/kappa in [1, 4] ms."""
    return float(rng.uniform(lo, hi))


def jittered_period(base: float, rate: float, rng: np.random.Generator) -> float:
    """One control period: base + Exp(rate) extra latency."""
    return base + float(rng.exponential(1.0 / rate))


def jittered_periods(base: float, rate: float, rng: np.random.Generator,
                     n: int) -> np.ndarray:
    return base + rng.exponential(1.0 / rate, size=n)


class DrydenGusts:
    """Body-frame turbulence via the low-altitude Dryden shaping filters.

    Continuous forms (V = reference airspeed through the field):
        H_u(s) = sigma_u sqrt(2V/(pi Lu)) / (s + V/Lu)
        H_v(s) = sigma_v sqrt(3V/(pi Lv)) (s + V/(sqrt(3) Lv)) / (s + V/Lv)^2
        H_w(s) = like H_v with Lw, sigma_w
    driven by unit-intensity white noise (sqrt(dt)-scaled normals), Euler
    discretized each step so jittered periods keep the statistics consistent.
    """

    def __init__(self, sigma_u: float, sigma_v: float, sigma_w: float,
                 va_ref: float = 18.0, Lu: float = 200.0, Lv: float = 200.0,
                 Lw: float = 50.0):
        self.sigma = (float(sigma_u), float(sigma_v), float(sigma_w))
        self.va_ref = float(va_ref)
        v = self.va_ref

        au = v / Lu
        self.Au = np.array([[-au]])
        self.Bu = np.array([1.0])
        self.Cu = np.array([sigma_u * math.sqrt(2.0 * v / (math.pi * Lu))])

        def second_order(L, sigma):
            a = v / L
            A = np.array([[-2.0 * a, -a * a], [1.0, 0.0]])
            B = np.array([1.0, 0.0])
            K = sigma * math.sqrt(3.0 * v / (math.pi * L))
            C = np.array([K, K * a / math.sqrt(3.0)])
            return A, B, C

        self.Av, self.Bv, self.Cv = second_order(Lv, sigma_v)
        self.Aw, self.Bw, self.Cw = second_order(Lw, sigma_w)
        self.xu = np.zeros(1)
        self.xv = np.zeros(2)
        self.xw = np.zeros(2)

    def reset(self) -> None:
        self.xu[:] = 0.0
        self.xv[:] = 0.0
        self.xw[:] = 0.0

    def step(self, dt: float, rng: np.random.Generator) -> np.ndarray:
        """Advance one interval; returns body-frame gust (u, v, w) in m/s."""
        sq = math.sqrt(dt)
        xi = rng.standard_normal(3)
        self.xu = self.xu + dt * (self.Au @ self.xu) + self.Bu * (sq * xi[0])
        self.xv = self.xv + dt * (self.Av @ self.xv) + self.Bv * (sq * xi[1])
        self.xw = self.xw + dt * (self.Aw @ self.xw) + self.Bw * (sq * xi[2])
        return np.array([float(self.Cu @ self.xu),
                         float(self.Cv @ self.xv),
                         float(self.Cw @ self.xw)])


def dryden_intensities(wind_magnitude: float, w_factor: float = 0.1,
                       uv_factor: float = 1.5) -> tuple[float, float, float]:
    """Turbulence intensities scaled by the episode steady-wind magnitude."""
    sigma_w = w_factor * wind_magnitude
    sigma_u = uv_factor * sigma_w
    return sigma_u, sigma_u, sigma_w
