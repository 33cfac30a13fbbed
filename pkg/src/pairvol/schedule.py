"""Diffusion noise schedule: forward noising and deterministic DDIM reversal.

Timesteps are 1-based: ``t`` runs over [1, T] and ``alpha_bar`` carries T+1
entries with ``alpha_bar[0] == 1.0`` so that t=0 denotes clean data. The
default training schedule scales the classic (1e-4, 0.02) linear beta range
by 1000/T, which keeps alpha_bar[T] near zero for short schedules; without
the rescale a T=100 run would leave far too much signal at the final step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

REFERENCE_T = 1000  # schedule length the (1e-4, 0.02) endpoints were tuned for


@dataclass(frozen=True)
class Schedule:
    """Precomputed beta/alpha tables, float64 for accuracy.

    betas[i] is beta at timestep t=i+1; alpha_bar[t] = prod_{s<=t}(1 - beta_s).
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)


def _build(betas: np.ndarray) -> Schedule:
    if np.any(betas <= 0.0) or np.any(betas >= 1.0):
        raise ConfigError("schedule: all betas must lie strictly inside (0, 1)")
    alphas = 1.0 - betas
    alpha_bar = np.empty(len(betas) + 1, dtype=np.float64)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(alphas)
    return Schedule(betas=betas, alphas=alphas, alpha_bar=alpha_bar)


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> Schedule:
    """Linearly spaced betas with the given endpoints, T steps."""
    if T < 1:
        raise ConfigError(f"schedule: T must be >= 1, got {T}")
    return _build(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def make_default_schedule(T: int) -> Schedule:
    """Linear schedule with endpoints rescaled by 1000/T (see module docstring).

    For very short schedules (T < 50) the scaled endpoints are clipped just
    below 1 so the betas stay valid.
    """
    if T < 1:
        raise ConfigError(f"schedule: T must be >= 1, got {T}")
    scale = REFERENCE_T / T
    beta_end = min(0.02 * scale, 0.999)
    beta_start = min(1e-4 * scale, beta_end)
    return make_linear_schedule(T, beta_start=beta_start, beta_end=beta_end)


def _check_t(t: int, T: int) -> None:
    if not isinstance(t, (int, np.integer)) or not (1 <= t <= T):
        raise ContractError(f"timestep t={t} outside [1, {T}]")


def forward_noise(x0: np.ndarray, t: int, eps: np.ndarray, sched: Schedule) -> np.ndarray:
    """x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    _check_t(t, sched.T)
    if x0.shape != eps.shape:
        raise DimensionError(f"forward_noise: x0 {x0.shape} vs eps {eps.shape}")
    ab = sched.alpha_bar[t]
    return float(np.sqrt(ab)) * x0 + float(np.sqrt(1.0 - ab)) * eps


def x0_from_eps(xt: np.ndarray, t: int, eps: np.ndarray, sched: Schedule) -> np.ndarray:
    """Invert the forward map given the exact noise: the x0 the pair implies."""
    _check_t(t, sched.T)
    if xt.shape != eps.shape:
        raise DimensionError(f"x0_from_eps: xt {xt.shape} vs eps {eps.shape}")
    ab = sched.alpha_bar[t]
    return (xt - float(np.sqrt(1.0 - ab)) * eps) / float(np.sqrt(ab))


def ddim_timesteps(T: int, n_steps: int) -> list[int]:
    """Ascending boundary timesteps [0, ..., T] for an n_steps DDIM pass."""
    if not (1 <= n_steps <= T):
        raise ConfigError(f"ddim: n_steps must be in [1, T={T}], got {n_steps}")
    taus = np.round(np.linspace(0.0, float(T), n_steps + 1)).astype(int)
    if np.any(np.diff(taus) <= 0):
        raise ConfigError(f"ddim: degenerate timestep ladder {taus.tolist()}")
    return taus.tolist()


def ddim_sample(
    eps_fn: Callable[[np.ndarray, int], np.ndarray],
    x_init: np.ndarray,
    sched: Schedule,
    n_steps: int,
    eta: float = 0.0,
    rng: np.random.Generator | None = None,
    x0_clip: tuple[float, float] | None = None,
) -> np.ndarray:
    """Run the DDIM reverse pass from x_T = x_init down to x_0.

    With eta=0 the pass is a pure function of (x_init, eps_fn): no randomness,
    so repeated calls are bit-identical. eta>0 adds the stochastic DDIM term
    and then requires an rng. ``x0_clip`` optionally clamps the per-step x0
    prediction (useful when the data lives in a known range).
    """
    if eta < 0.0 or eta > 1.0:
        raise ConfigError(f"ddim: eta must be in [0, 1], got {eta}")
    if eta > 0.0 and rng is None:
        raise ContractError("ddim: eta > 0 requires an rng")
    taus = ddim_timesteps(sched.T, n_steps)
    x = np.array(x_init, copy=True)
    for i in range(len(taus) - 1, 0, -1):
        t, t_prev = taus[i], taus[i - 1]
        ab_t = sched.alpha_bar[t]
        ab_p = sched.alpha_bar[t_prev]
        eps = eps_fn(x, t)
        if eps.shape != x.shape:
            raise DimensionError(f"ddim: eps_fn returned {eps.shape}, expected {x.shape}")
        x0p = (x - float(np.sqrt(1.0 - ab_t)) * eps) / float(np.sqrt(ab_t))
        if x0_clip is not None:
            np.clip(x0p, x0_clip[0], x0_clip[1], out=x0p)
        if eta > 0.0:
            sigma = eta * float(np.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_p))
        else:
            sigma = 0.0
        dir_coef = float(np.sqrt(max(1.0 - ab_p - sigma * sigma, 0.0)))
        x = float(np.sqrt(ab_p)) * x0p + dir_coef * eps
        if sigma > 0.0:
            x += sigma * rng.standard_normal(x.shape).astype(x.dtype, copy=False)
    return x
