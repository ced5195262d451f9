"""Iterative feedback loop: liked/disliked image sets steer generation by
key/value injection, liked references conditioning the guided pass and
disliked references the unconditional pass.

Randomness is split into named substreams so arms stay paired: the main
trajectory stream (initial latent + ancestral noise) never depends on
feedback, reference noise is keyed by (role, index, timestep), and prompt
dropout draws from its own stream.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore
from .schedule import (
    NoiseSchedule,
    SamplerConfig,
    cfg_combine,
    euler_ancestral_step,
    rng_from,
    seed_from,
)
from .shapes import DATASET_CHANNEL_MEAN, NULL_PROMPT, Prompt, quantize
from .unet import DenoiserConfig, unet_forward

F32 = np.float32


class FeedbackError(ValueError):
    pass


@dataclass
class FeedbackState:
    liked: list[np.ndarray] = field(default_factory=list)
    disliked: list[np.ndarray] = field(default_factory=list)
    round_index: int = 0

    def extended(self, liked: Sequence[np.ndarray], disliked: Sequence[np.ndarray]) -> "FeedbackState":
        """Sets only grow; returns a new state one round further."""
        return FeedbackState(
            liked=self.liked + [np.asarray(im, dtype=F32) for im in liked],
            disliked=self.disliked + [np.asarray(im, dtype=F32) for im in disliked],
            round_index=self.round_index + 1,
        )

    @property
    def empty(self) -> bool:
        return not self.liked and not self.disliked


@dataclass(frozen=True)
class FeedbackSchedule:
    kind: str = "first_half"  # constant | first_half | second_half | linear_interp
    w_max: float = 0.8
    cutoff: float = 0.5
    w_start: float = 1.0
    w_end: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "first_half", "second_half", "linear_interp"):
            raise FeedbackError(f"unknown schedule kind {self.kind!r}")
        if not 0.0 <= self.cutoff <= 1.0:
            raise FeedbackError(f"cutoff must be in [0,1], got {self.cutoff}")


def schedule_weight(schedule: FeedbackSchedule, step_index: int, total_steps: int) -> tuple[float, float]:
    """(w_pos, w_neg) at a sampling step; step 0 is the noisiest."""
    if not 0 <= step_index < total_steps:
        raise FeedbackError(f"step {step_index} outside [0, {total_steps})")
    if schedule.kind == "constant":
        w = schedule.w_max
    elif schedule.kind == "first_half":
        w = schedule.w_max if step_index < schedule.cutoff * total_steps else 0.0
    elif schedule.kind == "second_half":
        w = schedule.w_max if step_index >= schedule.cutoff * total_steps else 0.0
    else:  # linear_interp
        frac = step_index / total_steps
        w = schedule.w_start + (schedule.w_end - schedule.w_start) * frac
    w = max(0.0, float(w))
    return w, w


def prompt_dropout(prompt: Prompt, p: float, rng: np.random.Generator) -> Prompt:
    """Independently null each non-null token with probability p."""
    if not 0.0 <= p <= 1.0:
        raise FeedbackError(f"dropout probability {p} outside [0,1]")
    kw = {}
    for slot in ("shape", "color", "size"):
        tok = getattr(prompt, slot)
        kw[slot] = None if (tok is not None and rng.uniform() < p) else tok
    return Prompt(**kw)


@dataclass(frozen=True)
class GenerationConfig:
    batch_size: int = 4
    rounds: int = 3
    feedback_schedule: FeedbackSchedule = FeedbackSchedule()
    dropout_p: float = 0.0
    steps: int = 50
    guidance_scale: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.rounds < 1:
            raise FeedbackError("batch_size and rounds must be >= 1")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise FeedbackError(f"dropout_p {self.dropout_p} outside [0,1]")
        if self.feedback_schedule.w_max < 0:
            raise FeedbackError("feedback strength must be >= 0")


@dataclass
class ModelBundle:
    """Denoiser weights plus everything the sampler needs."""

    params: ParamStore
    arch: DenoiserConfig
    schedule: NoiseSchedule



def _initial_latent(arch: DenoiserConfig, schedule: NoiseSchedule, n: int, rng) -> np.ndarray:
    """Initial latent drawn to match the forward-process marginal at t_max:
    sqrt(abar_T)*channel_mean + sqrt(1-abar_T)*N(0,I). With abar_T far from
    zero on a short schedule, pure N(0,I) would start sampling off the
    distribution the denoiser was trained on."""
    eps = rng.standard_normal((n,) + arch.image_shape, dtype=F32)
    ab = schedule.alpha_bar(schedule.t_train)
    mean = np.asarray(DATASET_CHANNEL_MEAN, dtype=F32)[:, None, None]
    return np.float32(np.sqrt(ab)) * mean[None] + np.float32(np.sqrt(1.0 - ab)) * eps

def _noise_reference(img: np.ndarray, t: int, schedule: NoiseSchedule, seed: int, role: str, index: int) -> np.ndarray:
    ab = schedule.alpha_bar(t)
    eps = rng_from(seed, "refnoise", role, index, t).standard_normal(img.shape, dtype=F32)
    return np.float32(np.sqrt(ab)) * img + np.float32(np.sqrt(1.0 - ab)) * eps


def _capture_tokens(model: ModelBundle, z_refs: np.ndarray, t: int, n_tokens: int, channels: int) -> np.ndarray:
    """Hidden states just before self-attention for a batch of references."""
    k = z_refs.shape[0]
    null_ids = np.broadcast_to(NULL_PROMPT.token_ids(), (k, 4))
    with ad.no_grad():
        _, captured = unet_forward(
            model.params, model.arch, z_refs, np.full(k, t), null_ids, capture_hidden=True
        )
    return captured[0].reshape(k * n_tokens, channels)


def generate(
    model: ModelBundle,
    prompt: Prompt,
    feedback: FeedbackState,
    config: GenerationConfig,
    seed: int | None = None,
) -> np.ndarray:
    """One feedback-conditioned batch; [n,3,16,16] in [-1,1].

    Per denoising step, every liked and disliked image is re-noised to the
    current timestep and its hidden states cached; liked caches extend the
    prompted pass's key/value set with weight w_pos(t), disliked caches the
    unconditional pass's with w_neg(t). Both passes run fused as one batch.
    """
    n = config.batch_size
    arch = model.arch
    schedule = model.schedule
    sampler = SamplerConfig.for_schedule(
        schedule, steps=config.steps, guidance_scale=config.guidance_scale,
        seed=seed if seed is not None else config.seed,
    )
    for img in feedback.liked + feedback.disliked:
        if img.shape != arch.image_shape:
            raise FeedbackError(f"feedback image shape {img.shape} != {arch.image_shape}")

    n_tok = arch.token_count
    c = arch.bottleneck_channels
    cond_ids = np.broadcast_to(prompt.token_ids(), (n, 4))
    uncond_ids = np.broadcast_to(NULL_PROMPT.token_ids(), (n, 4))
    ids2 = np.concatenate([cond_ids, uncond_ids], axis=0)

    main_rng = rng_from(sampler.seed, "trajectory")
    z = _initial_latent(arch, schedule, n, main_rng)
    timesteps = list(sampler.timestep_indices)

    for step_index, t in enumerate(timesteps):
        w_pos, w_neg = schedule_weight(config.feedback_schedule, step_index, len(timesteps))
        pos = feedback.liked if w_pos > 0 else []
        neg = feedback.disliked if w_neg > 0 else []

        if pos or neg:
            z_refs = np.stack(
                [_noise_reference(im, t, schedule, sampler.seed, "pos", i) for i, im in enumerate(pos)]
                + [_noise_reference(im, t, schedule, sampler.seed, "neg", j) for j, im in enumerate(neg)]
            )
            tokens = _capture_tokens(model, z_refs, t, n_tok, c)
            pos_tok = tokens[: len(pos) * n_tok]
            neg_tok = tokens[len(pos) * n_tok :]
            r = max(pos_tok.shape[0], neg_tok.shape[0])
            ref_tokens = np.zeros((2 * n, r, c), dtype=F32)
            ref_weights = np.zeros((2 * n, r), dtype=F32)
            if len(pos):
                ref_tokens[:n, : pos_tok.shape[0]] = pos_tok
                ref_weights[:n, : pos_tok.shape[0]] = w_pos
            if len(neg):
                ref_tokens[n:, : neg_tok.shape[0]] = neg_tok
                ref_weights[n:, : neg_tok.shape[0]] = w_neg
        else:
            ref_tokens = None
            ref_weights = None

        z2 = np.concatenate([z, z], axis=0)
        with ad.no_grad():
            eps2 = unet_forward(
                model.params, arch, z2, np.full(2 * n, t), ids2,
                ref_tokens=ref_tokens, ref_weights=ref_weights,
            ).data
        eps = cfg_combine(eps2[:n], eps2[n:], sampler.guidance_scale)
        t_to = timesteps[step_index + 1] if step_index + 1 < len(timesteps) else 0
        z = euler_ancestral_step(z, eps, t, t_to, schedule, main_rng)

    return np.clip(z, -1.0, 1.0)


def sample_vanilla(
    model: ModelBundle,
    prompt: Prompt,
    config: GenerationConfig,
    seed: int | None = None,
) -> np.ndarray:
    """Plain guided sampler, no reference machinery at all (baseline path)."""
    n = config.batch_size
    arch = model.arch
    schedule = model.schedule
    sampler = SamplerConfig.for_schedule(
        schedule, steps=config.steps, guidance_scale=config.guidance_scale,
        seed=seed if seed is not None else config.seed,
    )
    ids2 = np.concatenate(
        [np.broadcast_to(prompt.token_ids(), (n, 4)), np.broadcast_to(NULL_PROMPT.token_ids(), (n, 4))],
        axis=0,
    )
    main_rng = rng_from(sampler.seed, "trajectory")
    z = _initial_latent(arch, schedule, n, main_rng)
    timesteps = list(sampler.timestep_indices)
    for step_index, t in enumerate(timesteps):
        with ad.no_grad():
            eps2 = unet_forward(model.params, arch, np.concatenate([z, z]), np.full(2 * n, t), ids2).data
        eps = cfg_combine(eps2[:n], eps2[n:], sampler.guidance_scale)
        t_to = timesteps[step_index + 1] if step_index + 1 < len(timesteps) else 0
        z = euler_ancestral_step(z, eps, t, t_to, schedule, main_rng)
    return np.clip(z, -1.0, 1.0)


@dataclass
class RoundRecord:
    round_index: int
    prompt: Prompt
    prompt_used: Prompt          # after dropout
    images: np.ndarray           # [n,3,16,16], uint8-quantized values
    image_ids: list[str]
    liked_ids: list[str] = field(default_factory=list)
    disliked_ids: list[str] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)


FeedbackSource = Callable[[np.ndarray, int], tuple[list[int], list[int]]]
MetricsFn = Callable[[np.ndarray, FeedbackState], dict]


def run_feedback_rounds(
    model: ModelBundle,
    prompt: Prompt,
    feedback_source: FeedbackSource,
    config: GenerationConfig,
    apply_feedback: bool = True,
    metrics_fn: MetricsFn | None = None,
) -> list[RoundRecord]:
    """N rounds of generate -> select -> extend.

    feedback_source(batch, round_index) returns (liked, disliked) indices
    into the batch; indices outside it are rejected. With apply_feedback
    False the selections are still recorded (and scored) but generation
    never sees them, which is the no-feedback baseline protocol.
    """
    state = FeedbackState()
    records: list[RoundRecord] = []
    for r in range(1, config.rounds + 1):
        drop_rng = rng_from(config.seed, "dropout", r)
        used = prompt_dropout(prompt, config.dropout_p, drop_rng) if config.dropout_p > 0 else prompt
        round_seed = seed_from(config.seed, "round", r)
        gen_state = state if apply_feedback else FeedbackState()
        batch = generate(model, used, gen_state, config, seed=round_seed)
        batch = np.stack([quantize(im) for im in batch])
        ids = [f"r{r:03d}_{i}" for i in range(config.batch_size)]

        liked_idx, disliked_idx = feedback_source(batch, r)
        for idx in list(liked_idx) + list(disliked_idx):
            if not 0 <= idx < config.batch_size:
                raise FeedbackError(f"feedback selected index {idx} outside batch")
        metrics = metrics_fn(batch, state) if metrics_fn else {}
        records.append(
            RoundRecord(
                round_index=r,
                prompt=prompt,
                prompt_used=used,
                images=batch,
                image_ids=ids,
                liked_ids=[ids[i] for i in liked_idx],
                disliked_ids=[ids[i] for i in disliked_idx],
                metrics=metrics,
            )
        )
        state = state.extended([batch[i] for i in liked_idx], [batch[i] for i in disliked_idx])
    return records
