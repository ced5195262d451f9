"""Minimal reverse-mode autodiff over float32 numpy arrays.

Every operation builds a per-forward graph (when gradients are enabled and
some input requires them); `backward` walks it once in reverse topological
order. Just enough ops to train and run the toy denoiser and the embedding
classifier: dense, 3x3 conv, group/layer norm, SiLU, softmax, attention,
embedding lookup, plus elementwise/shape glue and Adam.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

F32 = np.float32


class SubstrateError(ValueError):
    """Raised on shape mismatches, non-scalar losses and bad updates."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=F32)
        self.data = arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # convenience operators; all route through the op functions below
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return mul(self, _wrap(-1.0))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=F32))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    y = a.data + b.data
    return _make(y, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    y = a.data - b.data
    return _make(y, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    y = a.data * b.data
    return _make(
        y,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def mean(a: Tensor, axes: tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    if axes is not None:
        axes = tuple(ax % a.data.ndim for ax in axes)
    y = a.data.mean(axis=axes, keepdims=keepdims)
    n = a.data.size if axes is None else int(np.prod([a.data.shape[i] for i in axes]))

    def bwd(g):
        gg = g if keepdims or axes is None else np.expand_dims(g, axes)
        return (np.broadcast_to(gg / F32(n), a.data.shape),)

    return _make(y, (a,), bwd)


def sum_(a: Tensor, axes: tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    if axes is not None:
        axes = tuple(ax % a.data.ndim for ax in axes)
    y = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        gg = g if keepdims or axes is None else np.expand_dims(g, axes)
        return (np.broadcast_to(gg, a.data.shape).astype(F32),)

    return _make(y, (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)
    return _make(
        np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),)
    )


def concat(parts: Iterable[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    sizes = [p.data.shape[axis] for p in parts]
    y = np.concatenate([p.data for p in parts], axis=axis)

    def bwd(g):
        return tuple(np.array_split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _make(y, tuple(parts), bwd)


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    y = a.data * s
    return _make(y, (a,), lambda g: (g * (s * (1.0 + a.data * (1.0 - s))),))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis; supports -inf logits (masked keys)."""
    m = np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (a,), bwd)


def log_softmax(a: Tensor) -> Tensor:
    m = np.max(a.data, axis=-1, keepdims=True)
    z = a.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bwd(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(y, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise SubstrateError(
            f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}"
        )
    y = a.data @ b.data

    def bwd(g):
        bT = b.data.swapaxes(-1, -2) if b.data.ndim > 1 else b.data[None, :]
        aT = a.data.swapaxes(-1, -2) if a.data.ndim > 1 else a.data[:, None]
        ga = _unbroadcast(g @ bT, a.data.shape)
        gb = _unbroadcast(aT @ g, b.data.shape)
        return ga, gb

    return _make(y, (a, b), bwd)


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x [..., in] @ w [in, out] (+ b [out])."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise SubstrateError(f"dense: input dim {x.data.shape[-1]} != {w.data.shape[0]}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data

    def bwd(g):
        x2 = x.data.reshape(-1, x.data.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        grads = [g @ w.data.T, x2.T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(y, (x, w) if b is None else (x, w, b), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids]; ids is an integer array (not differentiated)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise SubstrateError(f"embedding ids out of range for table {table.data.shape}")
    y = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return _make(y, (table,), bwd)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """a[i, idx[i]] for 2-D a; used by the cross-entropy loss."""
    idx = np.asarray(idx)
    rows = np.arange(a.data.shape[0])
    y = a.data[rows, idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[rows, idx] = g
        return (ga,)

    return _make(y, (a,), bwd)


# ---------------------------------------------------------------------------
# conv / norm / resampling


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3 (or 1x1) convolution, padding preserves size at stride 1.

    Channels-last activations: x [B,H,W,Cin], w [Cout,Cin,k,k].
    Implemented as one GEMM per kernel tap, which beats im2col at these sizes.
    """
    B, H, W, Cin = x.data.shape
    Cout, Cin2, k, k2 = w.data.shape
    if Cin != Cin2 or k != k2 or k not in (1, 3):
        raise SubstrateError(f"conv2d: bad kernel {w.data.shape} for input {x.data.shape}")
    pad = (k - 1) // 2
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    wk = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))  # [k,k,Cin,Cout]

    if k == 1 and stride == 1:
        xm = x.data.reshape(-1, Cin)
        y = (xm @ wk[0, 0]).reshape(B, H, W, Cout)
        if b is not None:
            y = y + b.data

        def bwd1(g):
            g2 = g.reshape(-1, Cout)
            gx = (g2 @ wk[0, 0].T).reshape(B, H, W, Cin)
            gw = (g2.T @ xm).reshape(Cout, Cin, 1, 1)
            grads = [gx, gw]
            if b is not None:
                grads.append(g2.sum(axis=0))
            return tuple(grads)

        return _make(y, (x, w) if b is None else (x, w, b), bwd1)

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    y = np.zeros((B, Ho, Wo, Cout), dtype=F32)
    for ky in range(k):
        for kx in range(k):
            xs = xp[:, ky : ky + stride * Ho : stride, kx : kx + stride * Wo : stride, :]
            y += (xs.reshape(-1, Cin) @ wk[ky, kx]).reshape(B, Ho, Wo, Cout)
    if b is not None:
        y = y + b.data

    def bwd(g):
        g2 = np.ascontiguousarray(g).reshape(-1, Cout)
        gxp = np.zeros_like(xp)
        gw = np.empty((k, k, Cin, Cout), dtype=F32)
        for ky in range(k):
            for kx in range(k):
                gxp[:, ky : ky + stride * Ho : stride, kx : kx + stride * Wo : stride, :] += (
                    g2 @ wk[ky, kx].T
                ).reshape(B, Ho, Wo, Cin)
                xs = xp[:, ky : ky + stride * Ho : stride, kx : kx + stride * Wo : stride, :]
                gw[ky, kx] = xs.reshape(-1, Cin).T @ g2
        gx = gxp[:, pad : pad + H, pad : pad + W, :] if pad else gxp
        grads = [np.ascontiguousarray(gx), gw.transpose(3, 2, 0, 1)]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(y, (x, w) if b is None else (x, w, b), bwd)


def _group_reduce(per_channel: np.ndarray, groups: int) -> np.ndarray:
    """[B,C] per-channel sums -> [B,C] per-group means, broadcast back to channels."""
    B, C = per_channel.shape
    g = per_channel.reshape(B, groups, C // groups).mean(axis=2)
    return np.repeat(g, C // groups, axis=1)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """GroupNorm over channels-last [B,H,W,C]; per-sample, per-group statistics.

    Stats run channel-first (contiguous reductions), then average within groups.
    """
    B, H, W, C = x.data.shape
    if C % groups:
        raise SubstrateError(f"group_norm: {C} channels not divisible by {groups} groups")
    x2 = x.data.reshape(B, H * W, C)
    cm = x2.mean(axis=1)                      # [B,C]
    cm2 = np.einsum("bnc,bnc->bc", x2, x2) / (H * W)
    mu = _group_reduce(cm, groups)            # [B,C], equal within each group
    var = _group_reduce(cm2, groups) - mu * mu
    inv = 1.0 / np.sqrt(np.maximum(var, 0.0) + F32(eps))
    xhat = (x.data - mu[:, None, None, :]) * inv[:, None, None, :]
    y = xhat * gamma.data + beta.data
    n = H * W * (C // groups)

    def bwd(g):
        gxh = g * gamma.data
        gxh2 = gxh.reshape(B, H * W, C)
        s1 = _group_reduce(gxh2.sum(axis=1), groups) * (C // groups)
        s2 = _group_reduce(
            np.einsum("bnc,bnc->bc", gxh2, xhat.reshape(B, H * W, C)), groups
        ) * (C // groups)
        gx = (inv[:, None, None, :] / n) * (n * gxh - s1[:, None, None, :] - xhat * s2[:, None, None, :])
        ggamma = np.einsum("bnc,bnc->c", g.reshape(B, H * W, C), xhat.reshape(B, H * W, C))
        gbeta = g.reshape(-1, C).sum(axis=0)
        return gx.astype(F32), ggamma, gbeta

    return _make(y.astype(F32), (x, gamma, beta), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """LayerNorm over the last axis of x [..., C]."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + F32(eps))
    xhat = (x.data - mu) * inv
    y = xhat * gamma.data + beta.data
    n = x.data.shape[-1]

    def bwd(g):
        gxh = g * gamma.data
        s1 = gxh.sum(axis=-1, keepdims=True)
        s2 = (gxh * xhat).sum(axis=-1, keepdims=True)
        gx = (inv / n) * (n * gxh - s1 - xhat * s2)
        red = tuple(range(g.ndim - 1))
        return gx.astype(F32), (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(y.astype(F32), (x, gamma, beta), bwd)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of channels-last [B,H,W,C]."""
    y = x.data.repeat(2, axis=1).repeat(2, axis=2)
    B, H, W, C = x.data.shape

    def bwd(g):
        return (g.reshape(B, H, 2, W, 2, C).sum(axis=(2, 4)),)

    return _make(y, (x,), bwd)


def attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention over [..., T, d] with optional logit bias."""
    if k.data.shape[-2] != v.data.shape[-2]:
        raise SubstrateError(f"attention: key/value counts differ {k.data.shape} vs {v.data.shape}")
    if q.data.shape[-1] != k.data.shape[-1]:
        raise SubstrateError(f"attention: query/key dims differ {q.data.shape} vs {k.data.shape}")
    d = q.data.shape[-1]
    logits = matmul(q, transpose(k, tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2)))
    logits = mul(logits, _wrap(1.0 / np.sqrt(d)))
    if bias is not None:
        logits = add(logits, bias)
    return matmul(softmax(logits), v)


# ---------------------------------------------------------------------------
# spec surface: generic dispatch, backward, parameters, Adam

_OP_TABLE = {
    "dense": dense,
    "conv3x3": conv2d,
    "group_norm": group_norm,
    "layer_norm": layer_norm,
    "silu": silu,
    "softmax": softmax,
    "attention": attention,
    "embedding": embedding,
    "matmul": matmul,
    "add": add,
    "mul": mul,
}


def forward_op(op_kind: str, inputs: Sequence, params: Sequence = (), **kw) -> Tensor:
    """Run one named substrate op. Inputs/params are Tensors (or raw ids)."""
    if op_kind not in _OP_TABLE:
        raise SubstrateError(f"unknown op kind {op_kind!r}")
    return _OP_TABLE[op_kind](*inputs, *params, **kw)


Grad = dict[str, np.ndarray]


def backward(loss: Tensor, store: "ParamStore | None" = None) -> Grad:
    """Reverse-mode sweep from a scalar loss.

    Populates `.grad` on every reachable requires-grad leaf and, when a
    ParamStore is given, returns {name: grad} with zeros for parameters not
    on the loss path.
    """
    if loss.data.size != 1:
        raise SubstrateError(f"loss must be scalar, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._bwd is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._parents, node._bwd(g)):
            if gp is None or not p.requires_grad:
                continue
            gp = np.asarray(gp, dtype=F32)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = gp

    if store is None:
        return {}
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in store.params.items()
    }


class ParamStore:
    """Named trainable parameters plus Adam moment buffers and step count."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise SubstrateError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}


def adam_step(
    store: ParamStore,
    grads: Grad,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """One in-place Adam update with bias correction; rejects non-finite grads."""
    for name, g in grads.items():
        if name not in store.params:
            raise SubstrateError(f"gradient for unknown parameter {name!r}")
        if g.shape != store.params[name].data.shape:
            raise SubstrateError(
                f"gradient shape {g.shape} != parameter shape {store.params[name].data.shape} for {name!r}"
            )
        if not np.all(np.isfinite(g)):
            raise SubstrateError(f"non-finite gradient for {name!r}; update rejected")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in grads.items():
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p = store.params[name].data
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(F32)
    return store
