"""Small convolutional classifier over the 24 shape classes; its penultimate
features (L2-normalized, dim 32) are the embedding used by every similarity
metric. An auxiliary nuisance-regression head keeps within-class structure
(offset/rotation/brightness) in the features instead of collapsing classes
to points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .shapes import ShapeSpec

F32 = np.float32


@dataclass(frozen=True)
class EmbedderConfig:
    channels: tuple[int, int] = (24, 48)
    feature_dim: int = 32
    n_classes: int = 24
    aux_dim: int = 4
    groups: int = 4


def _he(rng, fan_in, shape):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(F32)


def init_embedder(cfg: EmbedderConfig, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(seed)
    p = ParamStore()
    c0, c1 = cfg.channels

    p.add("conv1.w", _he(rng, 3 * 9, (c0, 3, 3, 3)))
    p.add("conv1.b", np.zeros(c0, dtype=F32))
    p.add("gn1.g", np.ones(c0, dtype=F32))
    p.add("gn1.b", np.zeros(c0, dtype=F32))
    p.add("conv2.w", _he(rng, c0 * 9, (c1, c0, 3, 3)))
    p.add("conv2.b", np.zeros(c1, dtype=F32))
    p.add("gn2.g", np.ones(c1, dtype=F32))
    p.add("gn2.b", np.zeros(c1, dtype=F32))
    p.add("conv3.w", _he(rng, c1 * 9, (c1, c1, 3, 3)))
    p.add("conv3.b", np.zeros(c1, dtype=F32))
    p.add("gn3.g", np.ones(c1, dtype=F32))
    p.add("gn3.b", np.zeros(c1, dtype=F32))
    p.add("feat.w", _he(rng, c1, (c1, cfg.feature_dim)))
    p.add("feat.b", np.zeros(cfg.feature_dim, dtype=F32))
    p.add("cls.w", _he(rng, cfg.feature_dim, (cfg.feature_dim, cfg.n_classes)))
    p.add("cls.b", np.zeros(cfg.n_classes, dtype=F32))
    p.add("aux.w", _he(rng, cfg.feature_dim, (cfg.feature_dim, cfg.aux_dim)))
    p.add("aux.b", np.zeros(cfg.aux_dim, dtype=F32))
    return p


def embedder_forward(p: ParamStore, cfg: EmbedderConfig, images) -> tuple[Tensor, Tensor, Tensor]:
    """images [B,3,16,16] -> (logits, features, aux)."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    x = ad.transpose(x, (0, 2, 3, 1))
    h = ad.conv2d(x, p["conv1.w"], p["conv1.b"], stride=2)       # 8x8
    h = ad.silu(ad.group_norm(h, p["gn1.g"], p["gn1.b"], cfg.groups))
    h = ad.conv2d(h, p["conv2.w"], p["conv2.b"], stride=2)       # 4x4
    h = ad.silu(ad.group_norm(h, p["gn2.g"], p["gn2.b"], cfg.groups))
    h = ad.conv2d(h, p["conv3.w"], p["conv3.b"])
    h = ad.silu(ad.group_norm(h, p["gn3.g"], p["gn3.b"], cfg.groups))
    pooled = ad.mean(h, axes=(1, 2))                             # [B,C]
    feats = ad.dense(pooled, p["feat.w"], p["feat.b"])
    logits = ad.dense(ad.silu(feats), p["cls.w"], p["cls.b"])
    aux = ad.dense(ad.silu(feats), p["aux.w"], p["aux.b"])
    return logits, feats, aux


def nuisance_targets(spec: ShapeSpec) -> np.ndarray:
    return np.array(
        [
            spec.offset_x / 3.0,
            spec.offset_y / 3.0,
            spec.rotation / 90.0,
            (spec.brightness - 1.0) / 0.1,
        ],
        dtype=F32,
    )


def embed_images(p: ParamStore, cfg: EmbedderConfig, images: np.ndarray) -> np.ndarray:
    """L2-normalized penultimate features, [B, feature_dim]."""
    if images.ndim == 3:
        images = images[None]
    with ad.no_grad():
        _, feats, _ = embedder_forward(p, cfg, images)
    f = feats.data
    return f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)
