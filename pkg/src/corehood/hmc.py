"""Hamiltonian Monte Carlo with dual-averaging step size and diagonal mass
adaptation during warmup.

Deliberately small: one chain per call, a caller-supplied generator, and a
jittered leapfrog count. Adaptation follows the usual windowed scheme (step
size first, then variance-estimation windows, then a final step-size
polish); after warmup both the step size and the mass matrix are frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class HmcConfig:
    warmup: int
    iterations: int
    target_accept: float = 0.8
    max_leapfrog: int = 32
    init_step_size: float = 0.1
    divergence_threshold: float = 1000.0
    mass_regularization: float = 5.0


@dataclass
class ChainResult:
    draws: np.ndarray         # iterations x dim, post-warmup
    accept_rate: float        # post-warmup mean acceptance probability
    n_divergent: int          # across warmup and sampling
    step_size: float
    mass_diag: np.ndarray     # inverse metric diagonal (variance estimates)


class _DualAveraging:
    """Nesterov dual averaging on log step size (gamma 0.05, t0 10, kappa 0.75)."""

    def __init__(self, step0: float, target: float):
        self.mu = math.log(10.0 * step0)
        self.target = target
        self.log_step = math.log(step0)
        self.log_step_avg = 0.0
        self.h_bar = 0.0
        self.t = 0

    def update(self, accept_prob: float) -> float:
        self.t += 1
        frac = 1.0 / (self.t + 10.0)
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.target - accept_prob)
        self.log_step = self.mu - math.sqrt(self.t) / 0.05 * self.h_bar
        eta = self.t ** -0.75
        self.log_step_avg = eta * self.log_step + (1.0 - eta) * self.log_step_avg
        return math.exp(self.log_step)

    def adapted(self) -> float:
        return math.exp(self.log_step_avg)


def _find_initial_step(logdens_grad, theta, step0, rng):
    """Double or halve the step until a single leapfrog jump has acceptance
    near 0.5 (the usual reasonable-epsilon heuristic)."""
    dim = theta.shape[0]
    lp0, _ = logdens_grad(theta)
    if not math.isfinite(lp0):
        return step0
    p = rng.standard_normal(dim)
    h0 = -lp0 + 0.5 * p @ p

    def joint_after(eps):
        _, g = logdens_grad(theta)
        p1 = p + 0.5 * eps * g
        t1 = theta + eps * p1
        lp1, g1 = logdens_grad(t1)
        if not math.isfinite(lp1):
            return -math.inf
        p1 = p1 + 0.5 * eps * g1
        return h0 - (-lp1 + 0.5 * float(p1 @ p1))

    eps = step0
    delta = joint_after(eps)
    direction = 1.0 if delta > math.log(0.5) else -1.0
    for _ in range(50):
        eps = eps * (2.0 ** direction)
        delta = joint_after(eps)
        if (direction > 0) != (delta > math.log(0.5)):
            break
        if eps < 1e-10 or eps > 1e4:
            break
    return eps


def _leapfrog(logdens_grad, theta, p, grad, step, n_steps, mass_inv):
    """Standard leapfrog; returns final state or None on numeric blowup."""
    p = p + 0.5 * step * grad
    for i in range(n_steps):
        theta = theta + step * mass_inv * p
        lp, grad = logdens_grad(theta)
        if not np.isfinite(lp):
            return None
        p = p + (step if i < n_steps - 1 else 0.5 * step) * grad
    return theta, p, lp, grad


def sample_chain(logdens_grad, theta0: np.ndarray, config: HmcConfig,
                 rng: np.random.Generator) -> ChainResult:
    """One HMC chain: ``config.warmup`` adaptation transitions followed by
    ``config.iterations`` recorded draws."""
    theta = np.asarray(theta0, dtype=float).copy()
    dim = theta.shape[0]
    mass_inv = np.ones(dim)

    lp, grad = logdens_grad(theta)
    if not math.isfinite(lp):
        raise ValueError("initial point has non-finite log density")

    step = _find_initial_step(logdens_grad, theta, config.init_step_size, rng)
    averager = _DualAveraging(step, config.target_accept)

    w = config.warmup
    if w >= 200:
        # variance-estimation windows inside warmup; bounds are fractions of w
        windows = [(int(0.15 * w), int(0.45 * w)), (int(0.45 * w), int(0.8 * w))]
    else:
        windows = []
    window_buffer: list[np.ndarray] = []

    draws = np.empty((config.iterations, dim))
    n_divergent = 0
    accept_sum = 0.0

    total = w + config.iterations
    for it in range(total):
        sampling = it >= w
        sd = np.sqrt(1.0 / mass_inv)
        p = rng.standard_normal(dim) * sd
        n_steps = int(rng.integers(1, config.max_leapfrog + 1))
        h0 = -lp + 0.5 * float(p * mass_inv @ p)

        result = _leapfrog(logdens_grad, theta, p, grad, step, n_steps, mass_inv)
        if result is None:
            accept_prob = 0.0
            n_divergent += 1
        else:
            theta_new, p_new, lp_new, grad_new = result
            h1 = -lp_new + 0.5 * float(p_new * mass_inv @ p_new)
            delta = h1 - h0
            if not math.isfinite(delta) or delta > config.divergence_threshold:
                accept_prob = 0.0
                n_divergent += 1
            else:
                accept_prob = min(1.0, math.exp(-max(delta, -700.0)))
                if rng.random() < accept_prob:
                    theta, lp, grad = theta_new, lp_new, grad_new

        if sampling:
            draws[it - w] = theta
            accept_sum += accept_prob
        else:
            step = averager.update(accept_prob)
            for lo, hi in windows:
                if lo <= it < hi:
                    window_buffer.append(theta.copy())
                    if it == hi - 1 and len(window_buffer) >= 10:
                        buf = np.array(window_buffer)
                        var = buf.var(axis=0, ddof=1)
                        n = buf.shape[0]
                        reg = config.mass_regularization
                        mass_inv = (n / (n + reg)) * var + (reg / (n + reg)) * 1e-3
                        mass_inv = np.maximum(mass_inv, 1e-8)
                        window_buffer = []
                        # restart step adaptation for the new metric
                        averager = _DualAveraging(max(step, 1e-6),
                                                  config.target_accept)
                    break
            if it == w - 1:
                step = averager.adapted()

    return ChainResult(
        draws=draws,
        accept_rate=accept_sum / config.iterations,
        n_divergent=n_divergent,
        step_size=step,
        mass_diag=mass_inv,
    )
