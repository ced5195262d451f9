"""Noise schedule, forward noising and the ancestral Euler sampling step.

Latents follow the variance-preserving convention z_t = sqrt(abar_t)*x0 +
sqrt(1-abar_t)*eps; the sampler converts to the sigma parameterization
x = z/sqrt(abar) with sigma_t = sqrt((1-abar_t)/abar_t) for its updates.
Schedule tables are float64 for accumulation accuracy; tensors stay float32.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    pass


def seed_from(*parts) -> int:
    """Stable 64-bit seed derived from a tuple of keys (ints/strings)."""
    text = "\x1f".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def rng_from(*parts) -> np.random.Generator:
    return np.random.default_rng(seed_from(*parts))


@dataclass(frozen=True)
class NoiseSchedule:
    t_train: int
    betas: np.ndarray       # [T], index 0 == timestep 1
    alphas: np.ndarray      # 1 - beta
    alpha_bars: np.ndarray  # cumulative product

    def alpha_bar(self, t: int) -> float:
        """abar at integer timestep t, with abar(0) = 1 by convention."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.t_train:
            raise ScheduleError(f"timestep {t} outside [0, {self.t_train}]")
        return float(self.alpha_bars[t - 1])

    def sigma(self, t: int) -> float:
        ab = self.alpha_bar(t)
        return float(np.sqrt((1.0 - ab) / ab))


def build_schedule(t_train: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp; alpha_bar by cumulative product."""
    if t_train < 1:
        raise ScheduleError(f"t_train must be >= 1, got {t_train}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(f"invalid beta range [{beta_start}, {beta_end}]")
    if t_train == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, t_train, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(t_train=t_train, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def sampling_timesteps(t_train: int, steps: int) -> list[int]:
    """Strictly decreasing, uniformly strided timesteps from t_train down."""
    if steps < 1 or steps > t_train:
        raise ScheduleError(f"steps {steps} outside [1, {t_train}]")
    ts = np.linspace(t_train, 1, steps)
    out = sorted({int(round(t)) for t in ts}, reverse=True)
    return out


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    timestep_indices: tuple[int, ...] = field(default=None)  # type: ignore[assignment]
    guidance_scale: float = 3.0
    seed: int = 0

    def __post_init__(self):
        idx = self.timestep_indices
        if idx is None:
            raise ScheduleError("timestep_indices required; use SamplerConfig.for_schedule")
        idx = tuple(int(t) for t in idx)
        if len(idx) == 0:
            raise ScheduleError("timestep_indices must be non-empty")
        if any(nxt >= prev for prev, nxt in zip(idx, idx[1:])):
            raise ScheduleError(f"timestep_indices must be strictly decreasing: {idx}")
        if len(idx) != self.steps:
            raise ScheduleError(f"steps={self.steps} != len(timestep_indices)={len(idx)}")
        object.__setattr__(self, "timestep_indices", idx)

    @classmethod
    def for_schedule(cls, schedule: NoiseSchedule, steps: int = 50, guidance_scale: float = 3.0, seed: int = 0):
        idx = sampling_timesteps(schedule.t_train, steps)
        return cls(steps=len(idx), timestep_indices=tuple(idx), guidance_scale=guidance_scale, seed=seed)


def forward_noise(
    x_ref: np.ndarray, t: int, schedule: NoiseSchedule, rng: np.random.Generator
) -> np.ndarray:
    """z_ref = sqrt(abar_t)*x_ref + sqrt(1-abar_t)*N(0,I), noise from rng."""
    if not 1 <= t <= schedule.t_train:
        raise ScheduleError(f"timestep {t} outside [1, {schedule.t_train}]")
    ab = schedule.alpha_bar(t)
    eps = rng.standard_normal(x_ref.shape, dtype=np.float32)
    return (np.float32(np.sqrt(ab)) * x_ref + np.float32(np.sqrt(1.0 - ab)) * eps).astype(np.float32)


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, guidance_scale: float) -> np.ndarray:
    """eps_uncond + s * (eps_cond - eps_uncond)."""
    if eps_cond.shape != eps_uncond.shape:
        raise ScheduleError(f"cfg shapes differ: {eps_cond.shape} vs {eps_uncond.shape}")
    return (eps_uncond + np.float32(guidance_scale) * (eps_cond - eps_uncond)).astype(np.float32)


def euler_ancestral_step(
    z_t: np.ndarray,
    eps_hat: np.ndarray,
    t_from: int,
    t_to: int,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """One ancestral Euler update from timestep t_from down to t_to.

    sigma_up^2 = sigma_to^2 * (sigma_from^2 - sigma_to^2) / sigma_from^2 and
    sigma_down^2 = sigma_to^2 - sigma_up^2; the Euler step targets sigma_down,
    then fresh noise of scale sigma_up is added (none on the final step).
    """
    if not t_from > t_to >= 0:
        raise ScheduleError(f"need t_from > t_to >= 0, got {t_from} -> {t_to}")
    if eps_hat.shape != z_t.shape:
        raise ScheduleError(f"eps shape {eps_hat.shape} != z shape {z_t.shape}")
    s_from = schedule.sigma(t_from)
    s_to = schedule.sigma(t_to)
    var_up = s_to**2 * (s_from**2 - s_to**2) / s_from**2
    s_up = np.sqrt(var_up)
    s_down = np.sqrt(s_to**2 - var_up)

    x = z_t / np.float32(np.sqrt(schedule.alpha_bar(t_from)))
    x = x + np.float32(s_down - s_from) * eps_hat
    noise = rng.standard_normal(z_t.shape, dtype=np.float32)
    if s_up > 0.0:
        x = x + np.float32(s_up) * noise
    return (np.float32(np.sqrt(schedule.alpha_bar(t_to))) * x).astype(np.float32)
