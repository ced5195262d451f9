"""Toy U-Net noise predictor with prompt cross-attention and reference
key/value injection in its bottleneck self-attention.

The single self-attention layer sits at the 4x4 bottleneck (16 tokens, 64
channels, 4 heads of 16). Reference conditioning caches the exact tensor that
feeds W_K/W_V (the post-norm hidden states right before self-attention) from
a noised reference pass, and later passes concatenate those cached tokens
into the key/value set. Injected keys carry an attention weight; self keys
always weigh 1, so with no references (or weight 0) the pass reduces to the
plain network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor

F32 = np.float32


class CacheMismatchError(ValueError):
    pass


class WeightedAttentionError(ValueError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    image_shape: tuple[int, int, int] = (3, 16, 16)
    widths: tuple[int, int] = (32, 64)
    bottleneck_hw: int = 4
    heads: int = 4
    head_dim: int = 16
    prompt_slots: int = 4          # shape/color/size + null
    vocab_size: int = 10
    time_dim: int = 64
    ffn_mult: int = 4
    groups: int = 8

    def __post_init__(self):
        if self.heads * self.head_dim != self.widths[-1]:
            raise ValueError("heads * head_dim must equal bottleneck channels")
        if self.bottleneck_hw**2 != self.token_count:
            raise ValueError("inconsistent bottleneck")

    @property
    def token_count(self) -> int:
        return self.bottleneck_hw * self.bottleneck_hw

    @property
    def bottleneck_channels(self) -> int:
        return self.widths[-1]

    @property
    def self_attention_layers(self) -> tuple[int, ...]:
        return (0,)


@dataclass
class HiddenStateCache:
    """Pre-self-attention hidden states of one noised reference at timestep t."""

    layers: dict[int, np.ndarray]  # layer index -> [tokens, channels]
    ref_id: str
    t: int


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, [B, dim]."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(F32)


# ---------------------------------------------------------------------------
# parameters


def _he(rng, fan_in, shape):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(F32)


def init_denoiser(cfg: DenoiserConfig, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(seed)
    p = ParamStore()
    c0, c1 = cfg.widths
    cin = cfg.image_shape[0]
    td = cfg.time_dim

    def conv(name, co, ci, k, zero=False):
        w = np.zeros((co, ci, k, k), dtype=F32) if zero else _he(rng, ci * k * k, (co, ci, k, k))
        p.add(f"{name}.w", w)
        p.add(f"{name}.b", np.zeros(co, dtype=F32))

    def lin(name, ci, co, zero=False):
        w = np.zeros((ci, co), dtype=F32) if zero else _he(rng, ci, (ci, co))
        p.add(f"{name}.w", w)
        p.add(f"{name}.b", np.zeros(co, dtype=F32))

    def norm(name, c):
        p.add(f"{name}.g", np.ones(c, dtype=F32))
        p.add(f"{name}.b", np.zeros(c, dtype=F32))

    lin("time.fc1", td, td)
    lin("time.fc2", td, td)
    p.add("prompt.table", rng.standard_normal((cfg.vocab_size, c1)).astype(F32))

    conv("stem", c0, cin, 3)

    # encoder block at 16x16 (single conv + time shift)
    norm("enc1.gn", c0)
    conv("enc1.conv", c0, c0, 3)
    lin("enc1.temb", td, c0)

    conv("down1", c1, c0, 3)

    # encoder block at 8x8 (two convs)
    norm("enc2.gn1", c1)
    conv("enc2.conv1", c1, c1, 3)
    lin("enc2.temb", td, c1)
    norm("enc2.gn2", c1)
    conv("enc2.conv2", c1, c1, 3, zero=True)

    conv("down2", c1, c1, 3)

    norm("mid1.gn1", c1)
    conv("mid1.conv1", c1, c1, 3)
    lin("mid1.temb", td, c1)
    norm("mid1.gn2", c1)
    conv("mid1.conv2", c1, c1, 3, zero=True)

    # transformer block at the bottleneck
    norm("attn.gn", c1)
    norm("attn.ln1", c1)
    lin("attn.q", c1, c1)
    lin("attn.k", c1, c1)
    lin("attn.v", c1, c1)
    lin("attn.out", c1, c1)
    norm("attn.ln2", c1)
    lin("cross.q", c1, c1)
    lin("cross.k", c1, c1)
    lin("cross.v", c1, c1)
    lin("cross.out", c1, c1)
    norm("attn.ln3", c1)
    lin("ffn.fc1", c1, c1 * cfg.ffn_mult)
    lin("ffn.fc2", c1 * cfg.ffn_mult, c1)

    norm("mid2.gn1", c1)
    conv("mid2.conv1", c1, c1, 3)
    lin("mid2.temb", td, c1)
    norm("mid2.gn2", c1)
    conv("mid2.conv2", c1, c1, 3, zero=True)

    conv("up1", c1, c1, 1)
    norm("dec1.gn1", c1)
    conv("dec1.conv1", c1, c1, 3)
    lin("dec1.temb", td, c1)
    norm("dec1.gn2", c1)
    conv("dec1.conv2", c1, c1, 3, zero=True)

    conv("up2", c0, c1, 1)
    norm("dec2.gn", c0)
    conv("dec2.conv", c0, c0, 3)
    lin("dec2.temb", td, c0)

    norm("head.gn", c0)
    conv("head.conv", cin, c0, 3, zero=True)
    return p


# ---------------------------------------------------------------------------
# attention


def weighted_attention(q: Tensor, k: Tensor, v: Tensor, w: np.ndarray) -> Tensor:
    """Attention whose per-key probabilities are reweighted by w >= 0 and
    renormalized per row: equivalent to adding log(w) to the logits with
    log 0 = -inf. w broadcasts over the key axis.
    """
    w = np.asarray(w, dtype=F32)
    if np.any(w < 0):
        raise WeightedAttentionError("attention weights must be non-negative")
    if not np.any(w > 0):
        raise WeightedAttentionError("all-zero attention weights (degenerate row)")
    if w.shape[-1] != k.data.shape[-2]:
        raise WeightedAttentionError(
            f"weight length {w.shape[-1]} != key count {k.data.shape[-2]}"
        )
    if np.all(w == 1.0):
        return ad.attention(q, k, v)
    with np.errstate(divide="ignore"):
        logw = np.where(w > 0, np.log(np.maximum(w, np.finfo(F32).tiny)), -np.inf).astype(F32)
    # broadcast over query rows: [..., 1, Tk]
    bias = Tensor(np.expand_dims(logw, -2))
    return ad.attention(q, k, v, bias)


def renormalized_attention_reference(q, k, v, w):
    """Direct renormalized-probability formulation; oracle for the log-weight path."""
    d = q.shape[-1]
    logits = q @ np.swapaxes(k, -1, -2) / np.sqrt(d)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    pw = p * w
    pw = pw / pw.sum(axis=-1, keepdims=True)
    return pw @ v


# ---------------------------------------------------------------------------
# forward


def _resblock(p: ParamStore, name: str, x: Tensor, temb: Tensor, groups: int) -> Tensor:
    h = ad.group_norm(x, p[f"{name}.gn1.g"], p[f"{name}.gn1.b"], groups)
    h = ad.conv2d(ad.silu(h), p[f"{name}.conv1.w"], p[f"{name}.conv1.b"])
    shift = ad.dense(ad.silu(temb), p[f"{name}.temb.w"], p[f"{name}.temb.b"])
    h = ad.add(h, ad.reshape(shift, (shift.shape[0], 1, 1, shift.shape[1])))
    h = ad.group_norm(h, p[f"{name}.gn2.g"], p[f"{name}.gn2.b"], groups)
    h = ad.conv2d(ad.silu(h), p[f"{name}.conv2.w"], p[f"{name}.conv2.b"])
    return ad.add(x, h)


def _lightblock(p: ParamStore, name: str, x: Tensor, temb: Tensor, groups: int) -> Tensor:
    h = ad.group_norm(x, p[f"{name}.gn.g"], p[f"{name}.gn.b"], groups)
    h = ad.conv2d(ad.silu(h), p[f"{name}.conv.w"], p[f"{name}.conv.b"])
    shift = ad.dense(ad.silu(temb), p[f"{name}.temb.w"], p[f"{name}.temb.b"])
    h = ad.add(h, ad.reshape(shift, (shift.shape[0], 1, 1, shift.shape[1])))
    return ad.add(x, h)


def _split_heads(x: Tensor, heads: int, head_dim: int) -> Tensor:
    b, t, _ = x.shape
    return ad.transpose(ad.reshape(x, (b, t, heads, head_dim)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, d = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * d))


def unet_forward(
    p: ParamStore,
    cfg: DenoiserConfig,
    z,
    t: np.ndarray,
    prompt_ids: np.ndarray,
    ref_tokens: np.ndarray | None = None,
    ref_weights: np.ndarray | None = None,
    capture_hidden: bool = False,
):
    """Noise prediction for a batch.

    z [B,3,16,16], t [B] integer timesteps, prompt_ids [B,4].
    ref_tokens [B,R,C] cached reference hidden states appended to the
    self-attention key/value set with per-token weights ref_weights [B,R]
    (self tokens always weigh 1). Returns the eps Tensor, or (eps, captured)
    when capture_hidden is set.
    """
    x = z if isinstance(z, Tensor) else Tensor(z)
    x = ad.transpose(x, (0, 2, 3, 1))  # channels-last internally
    B = x.shape[0]
    g = cfg.groups
    captured: dict[int, np.ndarray] = {}

    temb = Tensor(timestep_embedding(np.broadcast_to(np.asarray(t), (B,)), cfg.time_dim))
    temb = ad.dense(temb, p["time.fc1.w"], p["time.fc1.b"])
    temb = ad.dense(ad.silu(temb), p["time.fc2.w"], p["time.fc2.b"])

    prompt_ids = np.broadcast_to(np.asarray(prompt_ids), (B, cfg.prompt_slots))
    ptok = ad.embedding(p["prompt.table"], prompt_ids)  # [B,4,C]

    h16 = ad.conv2d(x, p["stem.w"], p["stem.b"])
    h16 = _lightblock(p, "enc1", h16, temb, g)
    h8 = ad.conv2d(h16, p["down1.w"], p["down1.b"], stride=2)
    h8 = _resblock(p, "enc2", h8, temb, g)
    h4 = ad.conv2d(h8, p["down2.w"], p["down2.b"], stride=2)
    h4 = _resblock(p, "mid1", h4, temb, g)

    # transformer block (the only self-attention layer, index 0)
    c = cfg.bottleneck_channels
    n = cfg.token_count
    tok = ad.group_norm(h4, p["attn.gn.g"], p["attn.gn.b"], g)
    tok = ad.reshape(tok, (B, n, c))  # [B,16,C]

    hs = ad.layer_norm(tok, p["attn.ln1.g"], p["attn.ln1.b"])
    if capture_hidden:
        captured[0] = hs.data.copy()
    if ref_tokens is not None and ref_tokens.shape[1] > 0:
        kv_in = ad.concat([hs, Tensor(ref_tokens)], axis=1)
        w = np.concatenate(
            [np.ones((B, n), dtype=F32), np.asarray(ref_weights, dtype=F32)], axis=1
        )
    else:
        kv_in = hs
        w = np.ones((B, n), dtype=F32)
    q = _split_heads(ad.dense(hs, p["attn.q.w"], p["attn.q.b"]), cfg.heads, cfg.head_dim)
    k = _split_heads(ad.dense(kv_in, p["attn.k.w"], p["attn.k.b"]), cfg.heads, cfg.head_dim)
    v = _split_heads(ad.dense(kv_in, p["attn.v.w"], p["attn.v.b"]), cfg.heads, cfg.head_dim)
    att = weighted_attention(q, k, v, w[:, None, :])  # broadcast over heads
    att = ad.dense(_merge_heads(att), p["attn.out.w"], p["attn.out.b"])
    tok = ad.add(tok, att)

    hs2 = ad.layer_norm(tok, p["attn.ln2.g"], p["attn.ln2.b"])
    cq = _split_heads(ad.dense(hs2, p["cross.q.w"], p["cross.q.b"]), cfg.heads, cfg.head_dim)
    ck = _split_heads(ad.dense(ptok, p["cross.k.w"], p["cross.k.b"]), cfg.heads, cfg.head_dim)
    cv = _split_heads(ad.dense(ptok, p["cross.v.w"], p["cross.v.b"]), cfg.heads, cfg.head_dim)
    catt = ad.attention(cq, ck, cv)
    catt = ad.dense(_merge_heads(catt), p["cross.out.w"], p["cross.out.b"])
    tok = ad.add(tok, catt)

    hs3 = ad.layer_norm(tok, p["attn.ln3.g"], p["attn.ln3.b"])
    ff = ad.dense(ad.silu(ad.dense(hs3, p["ffn.fc1.w"], p["ffn.fc1.b"])), p["ffn.fc2.w"], p["ffn.fc2.b"])
    tok = ad.add(tok, ff)

    hw = cfg.bottleneck_hw
    h4 = ad.add(h4, ad.reshape(tok, (B, hw, hw, c)))

    h4 = _resblock(p, "mid2", h4, temb, g)
    u8 = ad.conv2d(ad.upsample2x(h4), p["up1.w"], p["up1.b"])
    u8 = _resblock(p, "dec1", ad.add(u8, h8), temb, g)
    u16 = ad.conv2d(ad.upsample2x(u8), p["up2.w"], p["up2.b"])
    u16 = _lightblock(p, "dec2", ad.add(u16, h16), temb, g)

    out = ad.group_norm(u16, p["head.gn.g"], p["head.gn.b"], g)
    out = ad.conv2d(ad.silu(out), p["head.conv.w"], p["head.conv.b"])
    out = ad.transpose(out, (0, 3, 1, 2))
    if capture_hidden:
        return out, captured
    return out


# ---------------------------------------------------------------------------
# spec surface


def precompute_hidden_states(
    p: ParamStore,
    cfg: DenoiserConfig,
    z_ref: np.ndarray,
    t: int,
    prompt_ids: np.ndarray | None = None,
    ref_id: str = "",
    t_train: int = 200,
) -> HiddenStateCache:
    """Full forward pass on a noised reference; records the hidden states
    entering each self-attention layer and discards the noise prediction.
    """
    if not 1 <= t <= t_train:
        raise CacheMismatchError(f"timestep {t} outside schedule [1, {t_train}]")
    if prompt_ids is None:
        prompt_ids = np.zeros((1, cfg.prompt_slots), dtype=np.int64)
    with ad.no_grad():
        _, captured = unet_forward(
            p, cfg, z_ref[None], np.array([t]), prompt_ids, capture_hidden=True
        )
    return HiddenStateCache(layers={i: h[0] for i, h in captured.items()}, ref_id=ref_id, t=t)


def modified_unet(
    p: ParamStore,
    cfg: DenoiserConfig,
    z_t: np.ndarray,
    t: int,
    prompt_ids: np.ndarray,
    hiddens: list[HiddenStateCache],
    w_ref: float,
):
    """Noise prediction with reference key/value injection.

    With empty hiddens this is exactly the plain network. All caches must
    come from the same timestep t.
    """
    for cache in hiddens:
        if cache.t != t:
            raise CacheMismatchError(f"cache at t={cache.t}, pass at t={t}")
        for i in cfg.self_attention_layers:
            if i not in cache.layers:
                raise CacheMismatchError(f"cache missing layer {i}")
            if cache.layers[i].shape != (cfg.token_count, cfg.bottleneck_channels):
                raise CacheMismatchError(
                    f"cache layer {i} shape {cache.layers[i].shape} != "
                    f"{(cfg.token_count, cfg.bottleneck_channels)}"
                )
    z = z_t if z_t.ndim == 4 else z_t[None]
    B = z.shape[0]
    if hiddens:
        ref = np.concatenate([c.layers[0] for c in hiddens], axis=0)  # [R,C]
        ref_tokens = np.broadcast_to(ref[None], (B,) + ref.shape)
        ref_weights = np.full((B, ref.shape[0]), w_ref, dtype=F32)
    else:
        ref_tokens = None
        ref_weights = None
    with ad.no_grad():
        out = unet_forward(
            p, cfg, z, np.full(B, t), prompt_ids, ref_tokens=ref_tokens, ref_weights=ref_weights
        )
    return out.data if z_t.ndim == 4 else out.data[0]
