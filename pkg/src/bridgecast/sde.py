"""Variance-exploding SDE: schedule, forward noising, reverse Euler-Maruyama
sampling and the low-to-high resolution diffusion bridge."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .fields import Field, concat_channels

T_END = 1e-5
FULL_STEPS = 500


class ScoreDivergenceError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"score divergence at step {step}")
        self.step = step


class TStarClampWarning(UserWarning):
    pass


def _check_t(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1) or not np.all(np.isfinite(t)):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return t


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance-exploding schedule ``sigma^2(t) = s0^2 ((s1/s0)^(2t) - 1)``.

    ``sigma(0)`` is pinned to ``sigma_min`` rather than the formula's 0.
    """

    sigma_min: float = 0.01
    sigma_max: float = 10.0

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")

    @property
    def log_ratio(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)

    def sigma2(self, t):
        t = _check_t(t)
        s2 = self.sigma_min**2 * np.expm1(2 * t * self.log_ratio)
        out = np.where(t > 0, s2, self.sigma_min**2)
        return float(out) if out.ndim == 0 else out

    def sigma(self, t):
        return np.sqrt(self.sigma2(t))

    def g2(self, t):
        t = _check_t(t)
        out = self.sigma_min**2 * np.exp(2 * t * self.log_ratio) * 2 * self.log_ratio
        return float(out) if out.ndim == 0 else out

    def g(self, t):
        return np.sqrt(self.g2(t))

    def inverse(self, sigma):
        """Exact ``t`` with ``sigma(t) = sigma``; not clamped."""
        sigma = np.asarray(sigma, dtype=np.float64)
        out = np.log1p(sigma**2 / self.sigma_min**2) / (2 * self.log_ratio)
        return float(out) if out.ndim == 0 else out


def sigma(sched: NoiseSchedule, t):
    return sched.sigma(t)


def g(sched: NoiseSchedule, t):
    return sched.g(t)


def _noised_index(f: Field, context_channels) -> list[int]:
    return [i for i, c in enumerate(f.channels) if c not in set(context_channels)]


def forward_noise(x0: Field, sched: NoiseSchedule, t, rng: np.random.Generator, context_channels=("context",)) -> Field:
    """Draw ``x(t) = x0 + sigma(t) eps``; context channels are left untouched.

    ``t`` is a scalar or one value per sample.
    """
    t = np.broadcast_to(_check_t(t), (x0.n_samples,))
    idx = _noised_index(x0, context_channels)
    data = np.array(x0.data)
    s = sched.sigma(t)[:, None, None, None]
    eps = rng.standard_normal(data.shape[:3] + (len(idx),))
    data[..., idx] += s * eps
    return Field(data, x0.channels)


def t_star_from_psd(sched: NoiseSchedule, psd_star: float, n_grid: int) -> float:
    """Bridge time at which the noise PSD ``sigma^2 / N^2`` reaches ``psd_star``."""
    if not psd_star > 0:
        warnings.warn(f"non-positive PSD* {psd_star}; t* clamped to 0", TStarClampWarning, stacklevel=2)
        return 0.0
    s_star = math.sqrt(n_grid**2 * psd_star)
    if s_star < sched.sigma_min:
        # below the pinned sigma(0)
        warnings.warn(f"sigma* = {s_star:.6g} below sigma_min; t* clamped to 0", TStarClampWarning, stacklevel=2)
        return 0.0
    t = sched.inverse(s_star)
    if t > 1:
        warnings.warn(f"t* = {t:.6g} above 1; clamped", TStarClampWarning, stacklevel=2)
    return float(min(t, 1.0))


def prorated_steps(t_start: float, t_end: float = T_END, full: int = FULL_STEPS) -> int:
    """Step count keeping the full-interval step size ``(1 - t_end)/full``."""
    return max(1, math.ceil(full * (t_start - t_end) / (1 - t_end) - 1e-9))


def reverse_em(
    x_init: Field,
    score,
    sched,
    t_start: float,
    t_end: float,
    n_steps: int,
    rng: np.random.Generator,
) -> Field:
    """Integrate the reverse-time SDE from ``t_start`` down to ``t_end``.

    Each step does ``x += g^2 s dt + g sqrt(dt) eta`` on the channels the
    score model noises; its context channels are copied through. ``sched``
    only needs a ``g2`` method.
    """
    if not t_end < t_start:
        raise ValueError("need t_end < t_start")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    order = [x_init.channel_index(c) for c in score.channels]
    x = np.array(x_init.data[..., order])
    noised = [score.channels.index(c) for c in score.noised_channels]
    dt = (t_start - t_end) / n_steps
    b = x.shape[0]
    for i in range(n_steps):
        t = t_start - i * dt
        s = score.score(x, np.full(b, t))
        if not np.all(np.isfinite(s)):
            raise ScoreDivergenceError(i)
        g2 = float(sched.g2(t))
        eta = rng.standard_normal(s.shape)
        x[..., noised] += g2 * s * dt + math.sqrt(g2 * dt) * eta
        if not np.all(np.isfinite(x)):
            raise ScoreDivergenceError(i)
    out = np.array(x_init.data)
    out[..., order] = x
    return Field(out, x_init.channels)


@dataclass(frozen=True)
class BridgeConfig:
    """Bridge switchover settings; ``n_steps=None`` pro-rates 500 full steps."""

    schedule: NoiseSchedule
    t_star: float
    k_star: int = 0
    n_steps: int | None = None
    t_end: float = T_END

    def __post_init__(self):
        if not 0 < self.t_end < self.t_star <= 1:
            raise ValueError(f"need 0 < t_end < t_star <= 1, got t_end={self.t_end}, t_star={self.t_star}")
        if self.n_steps is not None and self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    @property
    def steps(self) -> int:
        if self.n_steps is not None:
            return self.n_steps
        return prorated_steps(self.t_star, self.t_end)


def downscale(x_source: Field, context: Field | None, score_target, cfg: BridgeConfig, rng: np.random.Generator) -> Field:
    """Bridge source samples into the target domain.

    Noise the (already upsampled) source channels to ``t*``, replace the
    context with the target's, then denoise with the target score.
    Returns a field in the score model's channel layout.
    """
    ctx_names = tuple(score_target.context_channels)
    noised_names = tuple(score_target.noised_channels)
    if context is not None and context.n_grid != x_source.n_grid:
        raise ValueError("context and source grids differ")
    src = x_source.select(noised_names)
    if ctx_names:
        if context is None:
            raise ValueError(f"score model needs context channels {ctx_names}")
        ctx = context.select(ctx_names)
        if ctx.n_samples == 1 and src.n_samples > 1:
            ctx = Field(np.repeat(ctx.data, src.n_samples, axis=0), ctx.channels)
        if ctx.n_samples != src.n_samples:
            raise ValueError("context and source sample counts differ")
    noisy = forward_noise(src, cfg.schedule, cfg.t_star, rng, context_channels=())
    x = concat_channels(noisy, ctx) if ctx_names else noisy
    x = x.select(score_target.channels)
    return reverse_em(x, score_target, cfg.schedule, cfg.t_star, cfg.t_end, cfg.steps, rng)
