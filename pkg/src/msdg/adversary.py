"""Partly weight-sharing adversarial augmentation network and its objective."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ShapeError, Tensor

PROB_FLOOR = 1e-12


@dataclass
class AdversaryParams:
    """Layers per domain: ``pre[k]`` independent, ``shared`` common, ``out[k]`` residual head.

    ``shared`` holds one set of convolutions used by both domains, so a
    gradient step on it sees contributions from both paths.
    """

    pre: List[List[nn.Conv2DParams]]
    shared: List[nn.Conv2DParams]
    out: List[nn.Conv2DParams]
    channels: Tuple[int, int] = (1, 1)
    width: int = 32

    @property
    def layer_count(self) -> int:
        return len(self.pre[0]) + len(self.shared) + 1


@dataclass
class AugmentedBatch:
    xhat1: Tensor
    xhat2: Tensor


def layer_schedule(L: int) -> List[str]:
    """Role of each layer, e.g. ``L=5`` gives independent x2, shared x2, output."""
    if L < 2:
        raise ValueError(f"adversary needs at least 2 layers, got {L}")
    middle = L - 2
    n_shared = min(2, middle)
    return ["independent"] * (1 + middle - n_shared) + ["shared"] * n_shared + ["output"]


def build_adversary(L: int, n1: int, n2: int, width: int = 32, seed=0) -> AdversaryParams:
    if not 2 <= L <= 6:
        raise ValueError(f"adversary layer count must be in [2, 6], got {L}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    roles = layer_schedule(L)
    n_indep = roles.count("independent")
    pre, out = [], []
    for n in (n1, n2):
        layers = [nn.init_conv(rng, n, width, 3)]
        layers += [nn.init_conv(rng, width, width, 3) for _ in range(n_indep - 1)]
        pre.append(layers)
    shared = [nn.init_conv(rng, width, width, 3) for _ in range(roles.count("shared"))]
    for n in (n1, n2):
        out.append(nn.init_conv(rng, width, n, 3))
    return AdversaryParams(pre, shared, out, (n1, n2), width)


def residual(g: AdversaryParams, k: int, x: Tensor) -> Tensor:
    """Unclamped perturbation the domain-``k`` path adds to ``x``."""
    h = x
    for layer in g.pre[k]:
        h = nn.leaky_relu(nn.conv2d(h, layer))
    for layer in g.shared:
        h = nn.leaky_relu(nn.conv2d(h, layer))
    return nn.conv2d(h, g.out[k])


def _domain_path(g: AdversaryParams, k: int, x: Tensor) -> Tensor:
    return nn.clamp01(x + residual(g, k, x))


def augment(g: AdversaryParams, X1: Tensor, X2: Tensor) -> AugmentedBatch:
    """Residual perturbation of both modalities, clamped to ``[0, 1]``."""
    X1, X2 = T.as_tensor(X1), T.as_tensor(X2)
    for k, X in enumerate((X1, X2)):
        if X.shape[-1] != g.channels[k]:
            raise ShapeError(f"domain {k + 1} has {X.shape[-1]} channels, adversary expects {g.channels[k]}")
    if X1.shape[:-1] != X2.shape[:-1]:
        raise ShapeError(f"modalities disagree on patch layout: {X1.shape} vs {X2.shape}")
    return AugmentedBatch(_domain_path(g, 0, X1), _domain_path(g, 1, X2))


def tv_loss(xhat: Tensor) -> Tensor:
    """Squared-difference total variation of ``(m, m, n)`` or ``(B, m, m, n)``.

    Batched inputs are averaged over the batch.
    """
    xhat = T.as_tensor(xhat)
    single = xhat.ndim == 3
    if single:
        xhat = T.reshape(xhat, (1,) + xhat.shape)
    B, H, W, _ = xhat.shape
    total = Tensor(0.0)
    if W > 1:
        dx = T.getitem(xhat, np.s_[:, :, 1:, :]) - T.getitem(xhat, np.s_[:, :, :-1, :])
        total = total + T.sum(T.square(dx))
    if H > 1:
        dy = T.getitem(xhat, np.s_[:, 1:, :, :]) - T.getitem(xhat, np.s_[:, :-1, :, :])
        total = total + T.sum(T.square(dy))
    return total * (1.0 / B)


def _check_rows(p: Tensor, what: str) -> None:
    err = np.abs(p.data.sum(axis=-1) - 1.0)
    if np.any(err > 1e-6):
        raise ValueError(f"{what} rows are not probability vectors (max deviation {err.max():.3g})")


def adv_loss(p_g: Tensor, y, xhat1: Tensor, xhat2: Tensor) -> Tensor:
    """Signed cross-entropy plus total variation of both augmented modalities.

    The first term is ``+mean(sum(y * log p))``: minimizing the total drives
    the task model's cross-entropy up while keeping the images smooth.
    """
    _check_rows(p_g, "p_g")
    y = T.as_tensor(y)
    n = p_g.shape[0]
    logp = T.log(T.clip(p_g, PROB_FLOOR, None))
    signed_ce = T.sum(y * logp) * (1.0 / n)
    return signed_ce + tv_loss(xhat1) + tv_loss(xhat2)
