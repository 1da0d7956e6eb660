"""DDPM forward process, epsilon-MSE training objective, and ancestral
sampler with classifier-free guidance.

The schedule is the linear-beta DDPM default (1e-4 to 2e-2 over 1000 steps);
sampling with fewer steps respaces the cumulative-alpha sequence. The
sampler's posterior variance is fixed to beta_t and the model's learned
variance channels are ignored.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .dit import DiTModel
from .errors import ConfigError, InputError, ShapeError
from .numerics import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray        # [T], float64
    alpha_bars: np.ndarray   # [T], cumulative products of (1 - beta)

    def __post_init__(self):
        if np.any(self.betas <= 0.0) or np.any(self.betas >= 1.0):
            raise ConfigError("betas must lie strictly inside (0, 1)")
        if np.any(np.diff(self.betas) < 0.0):
            raise ConfigError("betas must be monotone non-decreasing")
        if np.any(np.diff(self.alpha_bars) >= 0.0):
            raise ConfigError("alpha_bars must be strictly decreasing")

    @property
    def steps(self) -> int:
        return len(self.betas)


def linear_schedule(steps: int = 1000, start: float = 1e-4, end: float = 2e-2) -> NoiseSchedule:
    betas = np.linspace(start, end, steps, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars)


_DEFAULT_SCHEDULE: NoiseSchedule | None = None


def default_schedule() -> NoiseSchedule:
    global _DEFAULT_SCHEDULE
    if _DEFAULT_SCHEDULE is None:
        _DEFAULT_SCHEDULE = linear_schedule()
    return _DEFAULT_SCHEDULE


def q_sample(schedule: NoiseSchedule, x0: Tensor, t, eps: Tensor) -> Tensor:
    """Diffuse x0 to timestep t: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if eps.shape != x0.shape:
        raise ShapeError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if np.any(t < 0) or np.any(t >= schedule.steps):
        raise InputError(f"timestep out of [0, {schedule.steps})")
    abar = schedule.alpha_bars[t].astype(np.float32)
    shape = (-1,) + (1,) * (x0.ndim - 1)
    c0 = Tensor(np.sqrt(abar).reshape(shape))
    c1 = Tensor(np.sqrt(1.0 - abar).astype(np.float32).reshape(shape))
    return nm.add(nm.mul(x0, c0), nm.mul(eps, c1))


def eps_half(out: Tensor, in_channels: int) -> Tensor:
    """First in_channels channels of the model output (the noise prediction)."""
    return nm.slice_axis(out, 1, 0, in_channels)


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"MSE operands differ: {a.shape} vs {b.shape}")
    d = nm.sub(a, b)
    return nm.tmean(nm.mul(d, d))


def diffusion_loss(model: DiTModel, x0: Tensor, t, y, eps: Tensor,
                   schedule: NoiseSchedule | None = None,
                   training: bool = False, rng=None) -> Tensor:
    """Mean squared error between eps and the model's noise prediction."""
    schedule = schedule or default_schedule()
    x_t = q_sample(schedule, x0, t, eps)
    out = model.forward(x_t, t, y, training=training, rng=rng)
    return mse(eps_half(out, model.config.in_channels), eps)


def cfg_combine(eps_cond: Tensor, eps_uncond: Tensor, scale: float) -> Tensor:
    """eps_uncond + scale * (eps_cond - eps_uncond)."""
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError(f"CFG operands differ: {eps_cond.shape} vs {eps_uncond.shape}")
    return nm.add(eps_uncond, nm.mul(nm.sub(eps_cond, eps_uncond), float(scale)))


def respaced_timesteps(total: int, steps: int) -> np.ndarray:
    """`steps` indices spread over [0, total), descending (sampling order)."""
    if not 1 <= steps <= total:
        raise ConfigError(f"sample steps {steps} outside [1, {total}]")
    ts = np.unique(np.round(np.linspace(total - 1, 0, steps)).astype(np.int64))
    return ts[::-1]


def ddpm_sample_loop(model: DiTModel, y, steps: int, cfg_scale: float, seed: int,
                     schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Ancestral DDPM sampling from pure noise; deterministic given seed.

    y is one label or an array of labels (one image each). When cfg_scale
    != 1 every step runs a conditional and a null-label pass combined by
    cfg_combine. Returns a [B, C, H, W] float array clamped to [-1, 1].
    """
    schedule = schedule or default_schedule()
    cfg = model.config
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if np.any(labels < 0) or np.any(labels >= cfg.num_classes):
        raise InputError(f"class ids must lie in [0, {cfg.num_classes})")
    batch = labels.shape[0]
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, cfg.in_channels, cfg.input_size, cfg.input_size)
                            ).astype(np.float32)

    ts = respaced_timesteps(schedule.steps, steps)
    abars = schedule.alpha_bars[ts]
    prev_abars = np.concatenate([abars[1:], [1.0]])  # ts is descending
    null = np.full(batch, cfg.null_label, dtype=np.int64)

    for i, t in enumerate(ts):
        abar, abar_prev = abars[i], prev_abars[i]
        beta = 1.0 - abar / abar_prev
        alpha = 1.0 - beta
        xt = Tensor(x)
        eps_c = eps_half(model.forward(xt, t, labels), cfg.in_channels).data
        if cfg_scale != 1.0:
            eps_u = eps_half(model.forward(xt, t, null), cfg.in_channels).data
            eps_hat = cfg_combine(Tensor(eps_c), Tensor(eps_u), cfg_scale).data
        else:
            eps_hat = eps_c
        mean = (x - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
        if i + 1 < len(ts):
            noise = rng.standard_normal(x.shape)
            x = (mean + np.sqrt(beta) * noise).astype(np.float32)
        else:
            x = mean.astype(np.float32)
    return np.clip(x, -1.0, 1.0)
