"""Differentiable layers on NHWC batches built on :mod:`msdg.tensor`."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import ShapeError, Tensor, _node

LEAKY_SLOPE = 0.01


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass
class Conv2DParams:
    """Kernel ``(out_ch, in_ch, k, k)`` plus bias ``(out_ch,)``; stride 1."""

    kernel: Tensor
    bias: Tensor
    padding: str = "same"

    def __post_init__(self):
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        k = self.kernel.shape[-1]
        if self.padding == "same" and k % 2 == 0:
            raise ValueError("same padding needs an odd kernel size")

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def size(self) -> int:
        return self.kernel.shape[2]


@dataclass
class AttentionParams:
    """Per-head projections stacked as ``(h, D, D/h)`` and an output map ``(D, D)``."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor

    @property
    def heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def dim(self) -> int:
        return self.w_o.shape[0]


@dataclass
class LinearParams:
    weight: Tensor
    bias: Tensor


def named_tensors(obj, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` for every tensor reachable in ``obj``.

    Walks dataclasses, lists, tuples and dicts. A tensor reachable along two
    paths is reported once, under the first name.
    """
    seen = set()

    def walk(o, name):
        if isinstance(o, Tensor):
            if id(o) not in seen:
                seen.add(id(o))
                yield name, o
        elif dataclasses.is_dataclass(o):
            for f in dataclasses.fields(o):
                yield from walk(getattr(o, f.name), f"{name}.{f.name}" if name else f.name)
        elif isinstance(o, (list, tuple)):
            for i, item in enumerate(o):
                yield from walk(item, f"{name}.{i}" if name else str(i))
        elif isinstance(o, dict):
            for key in sorted(o):
                yield from walk(o[key], f"{name}.{key}" if name else str(key))

    yield from walk(obj, prefix)


def init_conv(rng: np.random.Generator, in_ch: int, out_ch: int, k: int, padding: str = "same") -> Conv2DParams:
    # uniform(+-1/sqrt(fan_in)) kernel; biases start at zero so that pooled
    # embeddings are not dominated by a shared offset at initialization
    bound = 1.0 / math.sqrt(in_ch * k * k)
    kernel = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k))
    bias = np.zeros(out_ch)
    return Conv2DParams(Tensor(kernel, requires_grad=True), Tensor(bias, requires_grad=True), padding)


def init_linear(rng: np.random.Generator, n_in: int, n_out: int) -> LinearParams:
    bound = 1.0 / math.sqrt(n_in)
    return LinearParams(Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)), requires_grad=True),
                        Tensor(np.zeros(n_out), requires_grad=True))


def init_attention(rng: np.random.Generator, dim: int, heads: int) -> AttentionParams:
    if dim % heads:
        raise ShapeError(f"embedding dim {dim} is not divisible by {heads} heads")
    dh = dim // heads
    bound = 1.0 / math.sqrt(dim)

    def w(*shape):
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    return AttentionParams(w(heads, dim, dh), w(heads, dim, dh), w(heads, dim, dh), w(dim, dim))


def linear(x: Tensor, p: LinearParams) -> Tensor:
    return T.matmul(x, p.weight) + p.bias


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int) -> np.ndarray:
    """``(B, Hp, Wp, C)`` -> ``(B*Ho*Wo, k*k*C)`` rows ordered ``(i, j, c)``."""
    B, Hp, Wp, C = xp.shape
    win = sliding_window_view(xp, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    return win.reshape(B * (Hp - k + 1) * (Wp - k + 1), k * k * C)


def conv2d(x: Tensor, p: Conv2DParams) -> Tensor:
    """Stride-1 cross-correlation of an ``(H, W, C)`` or ``(B, H, W, C)`` input."""
    x = T.as_tensor(x)
    single = x.ndim == 3
    if single:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (B, H, W, C) input, got {x.shape}")
    cout, cin, k, _ = p.kernel.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[-1]}, kernel expects {cin}")
    pad = k // 2 if p.padding == "same" else 0
    xd = x.data
    K = p.kernel.data
    if k == 1:
        B, H, W, _ = xd.shape
        Ho, Wo = H, W
        cols = xd.reshape(B * H * W, cin)
        kmat = K.reshape(cout, cin).T
    else:
        xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xd
        B, Hp, Wp, _ = xp.shape
        Ho, Wo = Hp - k + 1, Wp - k + 1
        if Ho < 1 or Wo < 1:
            raise ShapeError(f"kernel {k} larger than padded input {Hp}x{Wp}")
        cols = _im2col(xp, k)
        kmat = K.transpose(2, 3, 1, 0).reshape(k * k * cin, cout)
    out = (cols @ kmat).reshape(B, Ho, Wo, cout) + p.bias.data

    def fn(g, needs):
        g2 = g.reshape(B * Ho * Wo, cout)
        gx = gk = gb = None
        if needs[0]:
            if k == 1:
                gx = (g2 @ kmat.T).reshape(xd.shape)
            elif pad == 0 and Ho == 1 and Wo == 1:
                gx = (g2 @ kmat.T).reshape(B, k, k, cin)
            else:
                # correlate the zero-padded output gradient with the flipped kernel
                gp = np.pad(g, ((0, 0), (k - 1 - pad,) * 2, (k - 1 - pad,) * 2, (0, 0)))
                flipped = K[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * cout, cin)
                gx = (_im2col(gp, k) @ flipped).reshape(xd.shape)
        if needs[1]:
            gk = (cols.T @ g2).reshape(k, k, cin, cout).transpose(3, 2, 0, 1)
        if needs[2]:
            gb = g2.sum(axis=0)
        return gx, gk, gb

    y = _node(out, (x, p.kernel, p.bias), fn)
    return T.reshape(y, y.shape[1:]) if single else y


def deconv2d(x: Tensor, p: Conv2DParams, target: int) -> Tensor:
    """Transposed convolution of a ``1x1xC`` feature up to a ``target x target`` map.

    ``p.kernel`` has shape ``(C_out, C_in, target, target)``, so the output at
    ``(i, j, o)`` is ``sum_c x[c] * kernel[o, c, i, j] + bias[o]``.
    """
    x = T.as_tensor(x)
    single = x.ndim == 3
    if single:
        x = T.reshape(x, (1,) + x.shape)
    cout, cin, k, _ = p.kernel.shape
    if k != target:
        raise ShapeError(f"deconv kernel size {k} does not match target patch size {target}")
    if x.shape[1:3] != (1, 1) or x.shape[-1] != cin:
        raise ShapeError(f"deconv2d expects (B, 1, 1, {cin}) input, got {x.shape}")
    B = x.shape[0]
    flat = T.reshape(x, (B, cin))
    kmat = T.reshape(T.transpose(p.kernel, (1, 2, 3, 0)), (cin, k * k * cout))
    y = T.reshape(T.matmul(flat, kmat), (B, k, k, cout)) + p.bias
    return T.reshape(y, y.shape[1:]) if single else y


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    x = T.as_tensor(x)
    d = x.data
    scale = np.where(d > 0, 1.0, slope)
    return _node(d * scale, (x,), lambda g, n: (g * scale,))


def sigmoid(x: Tensor) -> Tensor:
    x = T.as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(out, (x,), lambda g, n: (g * out * (1.0 - out),))


def elu_plus_one(x: Tensor) -> Tensor:
    """``ELU(x) + 1`` with alpha 1; strictly positive."""
    x = T.as_tensor(x)
    d = x.data
    neg = np.exp(np.minimum(d, 0.0))
    out = np.where(d > 0, d + 1.0, neg)
    slope = np.where(d > 0, 1.0, neg)
    return _node(out, (x,), lambda g, n: (g * slope,))


_ACTIVATIONS = {"leaky_relu": leaky_relu, "sigmoid": sigmoid, "elu_plus_one": elu_plus_one}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = T.as_tensor(x)
    out = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def fn(g, n):
        gi = g * out
        gi -= out * gi.sum(axis=axis, keepdims=True)
        return (gi,)

    return _node(out, (x,), fn)


def clamp01(x: Tensor) -> Tensor:
    return T.clip(x, 0.0, 1.0)


# ---------------------------------------------------------------------------
# instance-statistics randomization
# ---------------------------------------------------------------------------

def spar(content: Tensor, style: Tensor, eps: float = 1e-5) -> Tensor:
    """Re-style ``content`` with the per-channel spatial statistics of ``style``.

    Works on ``(m, m, C)`` or ``(B, m, m, C)``; statistics run over the two
    spatial axes, population convention.
    """
    if content.shape != style.shape:
        raise ShapeError(f"spar shape mismatch: {content.shape} vs {style.shape}")
    axes = (content.ndim - 3, content.ndim - 2)
    mu_c = T.mean(content, axes, keepdims=True)
    sd_c = T.std(content, axes, keepdims=True)
    mu_s = T.mean(style, axes, keepdims=True)
    sd_s = T.std(style, axes, keepdims=True)
    return sd_s * (content - mu_c) / (sd_c + eps) + mu_s


def char(own: Tensor, partner: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalized partner content rescaled by ``own``'s channel statistics.

    Statistics run over the last (channel) axis.
    """
    if own.shape != partner.shape:
        raise ShapeError(f"char shape mismatch: {own.shape} vs {partner.shape}")
    mu_o = T.mean(own, -1, keepdims=True)
    sd_o = T.std(own, -1, keepdims=True)
    mu_p = T.mean(partner, -1, keepdims=True)
    sd_p = T.std(partner, -1, keepdims=True)
    return sd_o * (partner - mu_p) / (sd_p + eps) + mu_o


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def multi_head_cross_attention(fq: Tensor, fkv: Tensor, p: AttentionParams,
                               return_weights: bool = False):
    """Queries from ``fq``, keys and values from ``fkv``, plus a residual on ``fq``.

    Inputs are ``(L, D)`` or ``(B, L, D)``. With ``return_weights`` the
    ``(B, h, L, L)`` attention matrix is returned as a second value.
    """
    fq, fkv = T.as_tensor(fq), T.as_tensor(fkv)
    h, D = p.heads, p.dim
    if D % h:
        raise ShapeError(f"embedding dim {D} is not divisible by {h} heads")
    if fq.shape[-1] != D or fkv.shape[-1] != D:
        raise ShapeError(f"token width must be {D}, got {fq.shape[-1]} and {fkv.shape[-1]}")
    single = fq.ndim == 2
    if single:
        fq, fkv = T.reshape(fq, (1,) + fq.shape), T.reshape(fkv, (1,) + fkv.shape)
    B, L, _ = fq.shape
    dh = D // h
    q_in = T.reshape(fq, (B, 1, L, D))
    kv_in = T.reshape(fkv, (B, 1, fkv.shape[1], D))
    q = T.matmul(q_in, p.w_q)
    k = T.matmul(kv_in, p.w_k)
    v = T.matmul(kv_in, p.w_v)
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1)
    heads = T.matmul(weights, v)  # (B, h, L, dh)
    merged = T.reshape(T.transpose(heads, (0, 2, 1, 3)), (B, L, D))
    out = T.matmul(merged, p.w_o) + fq
    if single:
        out = T.reshape(out, (L, D))
    return (out, weights) if return_weights else out


def mean_pool(x: Tensor) -> Tensor:
    """Average the two spatial axes of a ``(B, H, W, C)`` map to ``(B, C)``."""
    return T.mean(x, (1, 2))


def count_parameters(obj) -> int:
    return sum(t.size for _, t in named_tensors(obj))


def set_requires_grad(obj, flag: bool) -> None:
    for _, t in named_tensors(obj):
        t.requires_grad = flag


def zero_params_like(obj) -> None:
    for _, t in named_tensors(obj):
        t.data[...] = 0.0
