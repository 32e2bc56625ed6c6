"""The task model: two domain encoders, both fusion paths and the kernel head."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import fusion, heads, nn
from .config import RunConfig
from .tensor import Tensor


@dataclass
class ModelParams:
    encoders: List[fusion.EncoderParams]
    cross: fusion.CrossFuseParams
    intra: fusion.IntraFuseParams
    kmm: heads.KernelHeadParams
    channels: Tuple[int, int]
    patch: int
    n_classes: int


@dataclass
class ForwardOutputs:
    f_cross1: Tensor
    f_cross2: Tensor
    f_intra: Tensor
    features: Tuple[fusion.DomainFeatures, fusion.DomainFeatures]


def build_model(cfg: RunConfig, n1: int, n2: int, n_classes: int,
                rng: Optional[np.random.Generator] = None) -> ModelParams:
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    m = cfg.patch
    encoders = [fusion.init_encoder(rng, n, m, cfg.d_spa, cfg.d_cha) for n in (n1, n2)]
    return ModelParams(
        encoders=encoders,
        cross=fusion.init_cross(rng, cfg.d_spa, cfg.d_cha, cfg.d_c, cfg.heads),
        intra=fusion.init_intra(rng, cfg.d_spa, cfg.d_cha, cfg.d_i),
        kmm=heads.init_kmm(rng, cfg.d_i, n_classes),
        channels=(n1, n2),
        patch=m,
        n_classes=n_classes,
    )


def forward(model: ModelParams, X1, X2, train: bool = False,
            rng: Optional[np.random.Generator] = None, partners=None,
            eps: float = 1e-5) -> ForwardOutputs:
    f1 = fusion.encode_domain(X1, model.encoders[0])
    f2 = fusion.encode_domain(X2, model.encoders[1])
    f1, f2 = fusion.randomize(f1, f2, model.encoders, rng=rng, train=train, partners=partners, eps=eps)
    c1, c2 = fusion.cross_fuse((f1.spa, f2.spa), (f1.cha_map, f2.cha_map), model.cross)
    intra = fusion.intra_fuse(f1, f2, model.channels[0], model.channels[1], model.intra)
    return ForwardOutputs(c1, c2, intra, (f1, f2))


def parameters(model) -> List[Tensor]:
    return [t for _, t in nn.named_tensors(model)]
