"""Training loops for the noise predictor and the embedding classifier.

Both are fully deterministic given their seeds: data generation, shuffling,
timestep/noise draws and null-prompt masking all come from named substreams.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, SubstrateError, Tensor
from .checkpoint import save_checkpoint
from .embedder import EmbedderConfig, embed_images, embedder_forward, init_embedder, nuisance_targets
from .schedule import NoiseSchedule, build_schedule, rng_from
from .shapes import Prompt, ShapeSpec, prompt_token_array, sample_dataset
from .unet import DenoiserConfig, init_denoiser, unet_forward

F32 = np.float32


@dataclass
class TrainReport:
    epoch_losses: list[float]
    val_metrics: dict[str, float]
    wall_clock_s: float
    seed: int

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1))


@dataclass(frozen=True)
class DenoiserTrainConfig:
    n_images: int = 4096
    epochs: int = 24
    batch_size: int = 128
    lr: float = 2e-4
    null_prompt_prob: float = 0.1  # fraction of batches trained unconditional
    seed: int = 0
    t_train: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class EmbedderTrainConfig:
    n_train: int = 4096
    n_val: int = 1024
    epochs: int = 40
    batch_size: int = 128
    lr: float = 2e-3
    aux_weight: float = 0.3
    seed: int = 0


def _dataset_arrays(n: int, rng) -> tuple[np.ndarray, list[ShapeSpec]]:
    pairs = sample_dataset(n, rng)
    images = np.stack([img for img, _ in pairs])
    specs = [spec for _, spec in pairs]
    return images, specs


def train_denoiser(
    config: DenoiserTrainConfig = DenoiserTrainConfig(),
    arch: DenoiserConfig = DenoiserConfig(),
    out_path: str | Path | None = None,
    log=None,
) -> tuple[ParamStore, TrainReport]:
    """Minimize E||eps - eps_hat(z_t, t, prompt)||^2 with Adam."""
    t0 = time.time()
    schedule = build_schedule(config.t_train, config.beta_start, config.beta_end)
    sqrt_ab = np.sqrt(schedule.alpha_bars).astype(F32)     # index t-1
    sqrt_1mab = np.sqrt(1.0 - schedule.alpha_bars).astype(F32)

    data_rng = rng_from("denoiser-data", config.seed)
    images, specs = _dataset_arrays(config.n_images, data_rng)
    prompt_ids = prompt_token_array([Prompt.from_spec(s) for s in specs])
    null_ids = Prompt().token_ids()

    params = init_denoiser(arch, seed=config.seed)
    train_rng = rng_from("denoiser-train", config.seed)
    epoch_losses: list[float] = []
    steps_per_epoch = max(1, config.n_images // config.batch_size)

    for epoch in range(config.epochs):
        perm = train_rng.permutation(config.n_images)
        losses = []
        for step in range(steps_per_epoch):
            idx = perm[step * config.batch_size : (step + 1) * config.batch_size]
            x = images[idx]
            B = x.shape[0]
            t = train_rng.integers(1, config.t_train + 1, B)
            eps = train_rng.standard_normal(x.shape, dtype=F32)
            z = sqrt_ab[t - 1][:, None, None, None] * x + sqrt_1mab[t - 1][:, None, None, None] * eps
            if train_rng.uniform() < config.null_prompt_prob:
                ids = np.broadcast_to(null_ids, (B, 4))
            else:
                ids = prompt_ids[idx]
            out = unet_forward(params, arch, z, t, ids)
            loss = ad.mean(ad.square(ad.sub(out, Tensor(eps))))
            if not np.isfinite(loss.data):
                raise SubstrateError(f"non-finite training loss at epoch {epoch}")
            params.zero_grad()
            grads = ad.backward(loss, params)
            ad.adam_step(params, grads, lr=config.lr)
            losses.append(float(loss.data))
        epoch_losses.append(float(np.mean(losses)))
        if log:
            log(f"denoiser epoch {epoch + 1}/{config.epochs} loss {epoch_losses[-1]:.4f}")

    report = TrainReport(
        epoch_losses=epoch_losses,
        val_metrics={"final_loss": epoch_losses[-1]},
        wall_clock_s=time.time() - t0,
        seed=config.seed,
    )
    if out_path is not None:
        save_checkpoint(params, out_path, arch={"kind": "denoiser", **_arch_dict(arch), "train": asdict(config)})
    return params, report


def _arch_dict(arch) -> dict:
    d = asdict(arch)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def train_embedder(
    config: EmbedderTrainConfig = EmbedderTrainConfig(),
    arch: EmbedderConfig = EmbedderConfig(),
    out_path: str | Path | None = None,
    log=None,
) -> tuple[ParamStore, TrainReport]:
    """Cross-entropy over 24 classes plus a small nuisance-regression head."""
    t0 = time.time()
    data_rng = rng_from("embedder-data", config.seed)
    images, specs = _dataset_arrays(config.n_train + config.n_val, data_rng)
    labels = np.array([s.class_index for s in specs], dtype=np.int64)
    aux = np.stack([nuisance_targets(s) for s in specs])

    tr = slice(0, config.n_train)
    va = slice(config.n_train, None)
    params = init_embedder(arch, seed=config.seed)
    train_rng = rng_from("embedder-train", config.seed)
    epoch_losses: list[float] = []
    steps_per_epoch = max(1, config.n_train // config.batch_size)

    for epoch in range(config.epochs):
        perm = train_rng.permutation(config.n_train)
        losses = []
        for step in range(steps_per_epoch):
            idx = perm[step * config.batch_size : (step + 1) * config.batch_size]
            logits, _, aux_pred = embedder_forward(params, arch, images[idx])
            ce = ad.mul(ad.mean(ad.take_rows(ad.log_softmax(logits), labels[idx])), Tensor(-1.0))
            aux_loss = ad.mean(ad.square(ad.sub(aux_pred, Tensor(aux[idx]))))
            loss = ad.add(ce, ad.mul(aux_loss, Tensor(config.aux_weight)))
            if not np.isfinite(loss.data):
                raise SubstrateError(f"non-finite embedder loss at epoch {epoch}")
            params.zero_grad()
            grads = ad.backward(loss, params)
            ad.adam_step(params, grads, lr=config.lr)
            losses.append(float(loss.data))
        epoch_losses.append(float(np.mean(losses)))
        if log:
            log(f"embedder epoch {epoch + 1}/{config.epochs} loss {epoch_losses[-1]:.4f}")

    val_acc = classifier_accuracy(params, arch, images[va], labels[va])
    report = TrainReport(
        epoch_losses=epoch_losses,
        val_metrics={"val_accuracy": val_acc},
        wall_clock_s=time.time() - t0,
        seed=config.seed,
    )
    if out_path is not None:
        save_checkpoint(params, out_path, arch={"kind": "embedder", **_arch_dict(arch), "train": asdict(config)})
    return params, report


def classifier_accuracy(params, arch, images, labels, batch=512) -> float:
    hits = 0
    for i in range(0, len(images), batch):
        with ad.no_grad():
            logits, _, _ = embedder_forward(params, arch, images[i : i + batch])
        hits += int((logits.data.argmax(axis=1) == labels[i : i + batch]).sum())
    return hits / len(images)


def classify_images(params, arch, images, batch=512) -> np.ndarray:
    preds = []
    for i in range(0, len(images), batch):
        with ad.no_grad():
            logits, _, _ = embedder_forward(params, arch, images[i : i + batch])
        preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds)
