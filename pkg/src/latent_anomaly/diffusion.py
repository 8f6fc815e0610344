"""Noise schedule and closed-form forward-process quantities.

All schedule arrays have length ``T + 1`` and are indexed directly by the
timestep, with index 0 standing for the clean sample (``alpha_bar[0] == 1``,
``beta[0] == 0``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, UndefinedStepError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray

    def check_t(self, t, lo: int = 0) -> None:
        tt = np.asarray(t)
        if tt.size and (tt.min() < lo or tt.max() > self.T):
            raise IndexError(f"timestep out of range [{lo}, {self.T}]: {t!r}")


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear-beta schedule with every derived array precomputed."""
    if int(T) != T or T < 1:
        raise ConfigurationError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start!r}, beta_end={beta_end!r}"
        )
    T = int(T)
    beta = np.zeros(T + 1)
    if T == 1:
        beta[1] = beta_start
    else:
        s = np.arange(T) / (T - 1)
        beta[1:] = beta_start + s * (beta_end - beta_start)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    beta_tilde = np.zeros(T + 1)
    beta_tilde[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    for arr in (beta, alpha, alpha_bar, beta_tilde):
        arr.setflags(write=False)
    return NoiseSchedule(T, float(beta_start), float(beta_end), beta, alpha, alpha_bar, beta_tilde)


def _coef(values: np.ndarray, t) -> np.ndarray | float:
    c = values[t]
    if np.ndim(c):
        return c[..., None]
    return float(c)


def forward_diffuse(z0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """Sample ``z_t`` from ``q(z_t | z_0)`` given the noise draw ``eps``.

    ``t`` may be a scalar or one timestep per row of ``z0``.
    """
    sched.check_t(t)
    z0 = np.asarray(z0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if z0.shape != eps.shape:
        raise ConfigurationError(f"z0 shape {z0.shape} != eps shape {eps.shape}")
    if np.ndim(t) == 0 and t == 0:
        return z0.copy()
    ab = _coef(sched.alpha_bar, t)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def posterior_params(z_t, eps_hat, t: int, sched: NoiseSchedule) -> tuple[np.ndarray, float]:
    """Mean and variance of ``p(z_{t-1} | z_t)`` under the eps parameterization."""
    if t == 0:
        raise UndefinedStepError("posterior is undefined at t=0")
    sched.check_t(t, lo=1)
    z_t = np.asarray(z_t, dtype=float)
    mean = (z_t - sched.beta[t] / np.sqrt(1.0 - sched.alpha_bar[t]) * eps_hat) / np.sqrt(sched.alpha[t])
    return mean, float(sched.beta_tilde[t])


def posterior_mean_from_x0(z_t, z0, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Posterior mean written in terms of the clean sample (``mu_tilde``)."""
    ab, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t - 1]
    b, a = sched.beta[t], sched.alpha[t]
    return (np.sqrt(ab_prev) * b / (1.0 - ab)) * z0 + (np.sqrt(a) * (1.0 - ab_prev) / (1.0 - ab)) * z_t
