"""Domain encoder, feature randomization and the cross/intra-domain fusion paths.

All maps are NHWC batches ``(B, m, m, C)``; a domain index ``k`` is 0 or 1.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class EncoderParams:
    spa: nn.Conv2DParams      # 1x1, n_k -> d_spa
    cha: nn.Conv2DParams      # m x m valid, n_k -> d_cha
    deconv: nn.Conv2DParams   # (d_cha, d_cha, m, m)


@dataclass
class DomainFeatures:
    spa: Tensor
    cha: Tensor
    cha_map: Tensor


@dataclass
class CoupledEnhanceParams:
    w: nn.Conv2DParams  # pointwise, shared by both directions
    lam: Tensor         # (2,), one coefficient per domain


@dataclass
class CrossFuseParams:
    proj: List[nn.Conv2DParams]  # per-domain 1x1, d_cha -> d_spa
    enhance_spa: CoupledEnhanceParams
    enhance_cha: CoupledEnhanceParams
    attn_spa: nn.AttentionParams
    attn_cha: nn.AttentionParams
    agg3: nn.Conv2DParams        # 3x3, 2*d_spa -> d_spa
    agg1: nn.Conv2DParams        # 1x1, d_spa -> d_c


@dataclass
class IntraFuseParams:
    deep1: nn.Conv2DParams    # 3x3, d_spa + d_cha -> a
    deep2: nn.Conv2DParams    # 3x3, a -> a
    point_spa: nn.Conv2DParams
    point_cha: nn.Conv2DParams


@dataclass
class FusionOutputs:
    f_cross1: Tensor
    f_cross2: Tensor
    f_intra: Tensor


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def init_encoder(rng, n_in: int, m: int, d_spa: int, d_cha: int) -> EncoderParams:
    return EncoderParams(
        spa=nn.init_conv(rng, n_in, d_spa, 1),
        cha=nn.init_conv(rng, n_in, d_cha, m, padding="valid"),
        deconv=nn.init_conv(rng, d_cha, d_cha, m, padding="valid"),
    )


def init_enhance(rng, dim: int) -> CoupledEnhanceParams:
    return CoupledEnhanceParams(nn.init_conv(rng, dim, dim, 1), Tensor(np.ones(2), requires_grad=True))


def init_cross(rng, d_spa: int, d_cha: int, d_c: int, heads: int) -> CrossFuseParams:
    return CrossFuseParams(
        proj=[nn.init_conv(rng, d_cha, d_spa, 1) for _ in range(2)],
        enhance_spa=init_enhance(rng, d_spa),
        enhance_cha=init_enhance(rng, d_spa),
        attn_spa=nn.init_attention(rng, d_spa, heads),
        attn_cha=nn.init_attention(rng, d_spa, heads),
        agg3=nn.init_conv(rng, 2 * d_spa, d_spa, 3),
        agg1=nn.init_conv(rng, d_spa, d_c, 1),
    )


def intra_widths(d_i: int) -> Tuple[int, int, int]:
    """Output widths of the conv stack and of the two pointwise maps."""
    a, b = d_i // 2, d_i // 4
    return a, b, d_i - a - b


def init_intra(rng, d_spa: int, d_cha: int, d_i: int) -> IntraFuseParams:
    a, b, c = intra_widths(d_i)
    return IntraFuseParams(
        deep1=nn.init_conv(rng, d_spa + d_cha, a, 3),
        deep2=nn.init_conv(rng, a, a, 3),
        point_spa=nn.init_conv(rng, d_spa, b, 1),
        point_cha=nn.init_conv(rng, d_cha, c, 1),
    )


# ---------------------------------------------------------------------------
# encoder and randomization
# ---------------------------------------------------------------------------

def encode_domain(X: Tensor, p: EncoderParams) -> DomainFeatures:
    X = T.as_tensor(X)
    if X.shape[-1] != p.spa.in_channels:
        raise ShapeError(f"encoder expects {p.spa.in_channels} channels, got {X.shape[-1]}")
    m = X.shape[-2]
    spa = nn.leaky_relu(nn.conv2d(X, p.spa))
    cha = nn.conv2d(X, p.cha)
    return DomainFeatures(spa, cha, nn.deconv2d(cha, p.deconv, m))


def pick_partners(batch: int, rng: np.random.Generator) -> np.ndarray:
    """A uniformly random other index for every sample; size-1 batches pair with themselves."""
    if batch < 2:
        return np.zeros(batch, dtype=np.intp)
    return (np.arange(batch) + rng.integers(1, batch, size=batch)) % batch


def randomize(f1: DomainFeatures, f2: DomainFeatures, encoders: Sequence[EncoderParams],
              rng: Optional[np.random.Generator] = None, train: bool = True,
              partners: Optional[Tuple[np.ndarray, np.ndarray]] = None,
              eps: float = 1e-5) -> Tuple[DomainFeatures, DomainFeatures]:
    """Swap spatial style across domains and channel content within each domain.

    Evaluation mode returns the inputs untouched. ``partners`` overrides the
    random minibatch pairing used for the channel features.
    """
    if not train:
        return f1, f2
    batched = f1.spa.ndim == 4
    B = f1.spa.shape[0] if batched else 1
    if partners is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        partners = (pick_partners(B, rng), pick_partners(B, rng))
    spa1 = nn.spar(f1.spa, f2.spa, eps)
    spa2 = nn.spar(f2.spa, f1.spa, eps)
    out = []
    for f, spa, idx, enc in zip((f1, f2), (spa1, spa2), partners, encoders):
        partner = T.take(f.cha, idx, axis=0) if batched else f.cha
        cha = nn.char(f.cha, partner, eps)
        m = f.spa.shape[-2]
        out.append(DomainFeatures(spa, cha, nn.deconv2d(cha, enc.deconv, m)))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------

def coupled_enhance(f1: Tensor, f2: Tensor, p: CoupledEnhanceParams) -> Tuple[Tensor, Tensor]:
    """Exchange gated complementary components between the two domain maps."""
    if f1.shape != f2.shape:
        raise ShapeError(f"coupled_enhance shape mismatch: {f1.shape} vs {f2.shape}")
    lam1, lam2 = T.getitem(p.lam, 0), T.getitem(p.lam, 1)
    to2 = f1 * lam1 * nn.sigmoid(nn.conv2d(f2, p.w))  # component leaving domain 1
    to1 = f2 * lam2 * nn.sigmoid(nn.conv2d(f1, p.w))  # component leaving domain 2
    return f1 + to1 - to2, f2 + to2 - to1


def _tokens(x: Tensor) -> Tensor:
    B, H, W, C = x.shape
    return T.reshape(x, (B, H * W, C))


def cross_fuse(spa: Tuple[Tensor, Tensor], cha: Tuple[Tensor, Tensor],
               p: CrossFuseParams) -> Tuple[Tensor, Tensor]:
    """Per-domain cross-domain embeddings ``(B, d_c)`` from spatial and channel streams.

    ``cha`` holds the restored ``(B, m, m, d_cha)`` channel maps; they are
    projected to the spatial width before enhancement and attention.
    """
    B, H, W, D = spa[0].shape
    if spa[1].shape != spa[0].shape:
        raise ShapeError(f"spatial streams disagree: {spa[0].shape} vs {spa[1].shape}")
    c1 = nn.conv2d(cha[0], p.proj[0])
    c2 = nn.conv2d(cha[1], p.proj[1])
    s1, s2 = coupled_enhance(spa[0], spa[1], p.enhance_spa)
    c1, c2 = coupled_enhance(c1, c2, p.enhance_cha)
    # both branches share the attention and aggregation weights: stack them on the batch axis
    q_s, kv_s = T.concat([_tokens(s1), _tokens(s2)], 0), T.concat([_tokens(s2), _tokens(s1)], 0)
    q_c, kv_c = T.concat([_tokens(c1), _tokens(c2)], 0), T.concat([_tokens(c2), _tokens(c1)], 0)
    a_s = nn.multi_head_cross_attention(q_s, kv_s, p.attn_spa)
    a_c = nn.multi_head_cross_attention(q_c, kv_c, p.attn_cha)
    fused = T.reshape(T.concat([a_s, a_c], -1), (2 * B, H, W, 2 * D))
    agg = nn.conv2d(nn.conv2d(fused, p.agg3), p.agg1)
    pooled = nn.mean_pool(agg)
    return T.getitem(pooled, np.s_[:B]), T.getitem(pooled, np.s_[B:])


def rich_domain(n1: int, n2: int) -> int:
    """Index of the domain routed through the conv stack; ties go to domain 0."""
    return 0 if n1 >= n2 else 1


def intra_fuse(f1: DomainFeatures, f2: DomainFeatures, n1: int, n2: int,
               p: IntraFuseParams) -> Tensor:
    rich = rich_domain(n1, n2)
    outs = []
    for k, f in enumerate((f1, f2)):
        if k == rich:
            h = T.concat([f.spa, f.cha_map], -1)
            o = nn.leaky_relu(nn.conv2d(nn.leaky_relu(nn.conv2d(h, p.deep1)), p.deep2))
        else:
            o = T.concat([nn.conv2d(f.spa, p.point_spa), nn.conv2d(f.cha_map, p.point_cha)], -1)
        outs.append(o)
    return nn.mean_pool(T.concat(outs, -1))
