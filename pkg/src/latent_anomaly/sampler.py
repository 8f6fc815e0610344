"""Ancestral and PLMS samplers, and partial-diffusion reconstruction.

A *denoiser* is any object with ``eps(z_t, t, cond) -> array``; see
:mod:`latent_anomaly.denoiser`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule, forward_diffuse, posterior_params
from .errors import InvalidGridError, InvalidStepError

# Adams-Bashforth rows, newest eps first; each row sums to 1.
PLMS_COEFFS = (
    (1.0,),
    (3.0 / 2.0, -1.0 / 2.0),
    (23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0),
    (55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0),
)


@dataclass(frozen=True)
class TimestepGrid:
    t_star: int
    steps: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class PlmsState:
    """Most recent eps predictions, newest first (at most 4)."""

    eps: tuple = ()

    def push(self, e) -> "PlmsState":
        return PlmsState(((e,) + self.eps)[:4])


def make_grid(t_star: int, n_steps: int, T: int) -> TimestepGrid:
    """``n_steps`` integer timesteps evenly spaced from ``t_star`` down toward 1."""
    if not 1 <= t_star <= T:
        raise InvalidGridError(f"t_star={t_star} outside [1, {T}]")
    if not 1 <= n_steps <= t_star:
        raise InvalidGridError(f"n_steps={n_steps} must lie in [1, t_star={t_star}]")
    steps = np.rint(np.linspace(t_star, 1, n_steps)).astype(np.int64)
    steps[0] = t_star
    for i in range(1, n_steps):
        if steps[i] >= steps[i - 1]:
            steps[i] = steps[i - 1] - 1
    return TimestepGrid(int(t_star), steps)


def ddpm_step(z_t, t: int, eps_hat, noise, sched: NoiseSchedule) -> np.ndarray:
    mean, var = posterior_params(z_t, eps_hat, t, sched)
    if t == 1:
        return mean
    return mean + np.sqrt(var) * noise


def plms_eps(eps_new, state: PlmsState):
    coeffs = PLMS_COEFFS[len(state.eps[:3])]
    out = coeffs[0] * eps_new
    for c, e in zip(coeffs[1:], state.eps):
        out = out + c * e
    return out


def plms_step(z_t, t: int, t_next: int, eps_new, state: PlmsState, sched: NoiseSchedule):
    """One deterministic PLMS transfer from ``t`` to ``t_next`` (``t_next`` may be 0)."""
    if not (t > t_next >= 0):
        raise InvalidStepError(f"PLMS step needs t > t_next >= 0, got ({t}, {t_next})")
    sched.check_t(t)
    e = plms_eps(eps_new, state)
    ab, ab_next = sched.alpha_bar[t], sched.alpha_bar[t_next]
    x0 = (z_t - np.sqrt(1.0 - ab) * e) / np.sqrt(ab)
    z_next = np.sqrt(ab_next) * x0 + np.sqrt(1.0 - ab_next) * e
    return z_next, state.push(eps_new)


def run_plms(z, grid: TimestepGrid, c, denoiser, sched: NoiseSchedule) -> np.ndarray:
    state = PlmsState()
    steps = list(grid.steps) + [0]
    for t, t_next in zip(steps[:-1], steps[1:]):
        eps_new = denoiser.eps(z, int(t), c)
        z, state = plms_step(z, int(t), int(t_next), eps_new, state, sched)
    return z


def run_ancestral(z, t_start: int, c, denoiser, sched: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    for t in range(t_start, 0, -1):
        eps_hat = denoiser.eps(z, t, c)
        noise = rng.standard_normal(np.shape(z)) if t > 1 else 0.0
        z = ddpm_step(z, t, eps_hat, noise, sched)
    return z


def sample(denoiser, c, sched: NoiseSchedule, n_steps: int, rng: np.random.Generator,
           n: int | None = None, dim: int | None = None, method: str = "plms") -> np.ndarray:
    """Generate from pure noise at ``T`` down to the clean endpoint.

    ``method`` is ``"plms"`` (over a ``n_steps`` grid) or ``"ancestral"``
    (all ``T`` steps; ``n_steps`` ignored). Returns ``(n, dim)`` or ``(dim,)``.
    """
    if dim is None:
        dim = denoiser.mix.dim if hasattr(denoiser, "mix") else denoiser.dim
    shape = (dim,) if n is None else (n, dim)
    z = rng.standard_normal(shape)
    if method == "ancestral":
        return run_ancestral(z, sched.T, c, denoiser, sched, rng)
    if method == "plms":
        return run_plms(z, make_grid(sched.T, n_steps, sched.T), c, denoiser, sched)
    raise InvalidStepError(f"unknown sampler {method!r}")


def reconstruct(z0, t_star: int, c, denoiser, sched: NoiseSchedule, n_steps: int,
                rng: np.random.Generator | None = None, noise=None, method: str = "plms") -> np.ndarray:
    """Diffuse ``z0`` to ``t_star`` and denoise back to the clean endpoint.

    The partial-diffusion noise is drawn from ``rng`` unless given
    explicitly via ``noise`` (same shape as ``z0``). ``method="ancestral"``
    denoises through every step from ``t_star`` and needs ``rng`` for the
    per-step noise; ``n_steps`` is then only validated.
    """
    z0 = np.asarray(z0, dtype=float)
    if t_star == 0:
        return z0.copy()
    grid = make_grid(t_star, n_steps, sched.T)
    if noise is None:
        noise = rng.standard_normal(z0.shape)
    z = forward_diffuse(z0, t_star, noise, sched)
    if method == "plms":
        return run_plms(z, grid, c, denoiser, sched)
    if method == "ancestral":
        return run_ancestral(z, t_star, c, denoiser, sched, rng)
    raise InvalidStepError(f"unknown sampler {method!r}")
