"""Cross-domain prototype classifier and the intra-domain kernel mixture head."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ShapeError, Tensor

NORM_FLOOR = 1e-12
PROB_FLOOR = 1e-12
PI_FLOOR = 1e-6
# distance assigned to prototype slots that have never been filled
EXCLUDED = 1e6


class PrototypeBank:
    """Unit-norm cluster centres ``P[k, c]`` for domain ``k`` and class ``c``.

    Updated by exponential moving average outside the gradient graph.
    """

    def __init__(self, n_classes: int, dim: int, momentum: float = 0.9):
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.protos = Tensor(np.zeros((2, n_classes, dim)))
        self.initialized = np.zeros((2, n_classes), dtype=bool)
        self.momentum = float(momentum)

    @property
    def n_classes(self) -> int:
        return self.protos.shape[1]

    @property
    def dim(self) -> int:
        return self.protos.shape[2]

    def excluded_classes(self) -> np.ndarray:
        return np.flatnonzero(~self.initialized.any(axis=0))

    def copy(self) -> "PrototypeBank":
        other = PrototypeBank(self.n_classes, self.dim, self.momentum)
        other.protos = Tensor(self.protos.data.copy())
        other.initialized = self.initialized.copy()
        return other


def _norm(x: Tensor) -> Tensor:
    return T.sqrt(T.clip(T.sum(T.square(x), -1, keepdims=True), NORM_FLOOR ** 2, None))


def prototype_distances(f_cross1: Tensor, f_cross2: Tensor, bank: PrototypeBank) -> Tensor:
    """Negative cosine similarity of each branch embedding to its domain's prototypes.

    Embeddings are ``(d_c,)`` or ``(B, d_c)``; the result is ``(2, C)`` or
    ``(B, 2, C)``. Slots never initialized sit at a large constant distance.
    """
    single = f_cross1.ndim == 1
    if single:
        f_cross1, f_cross2 = T.reshape(f_cross1, (1, -1)), T.reshape(f_cross2, (1, -1))
    if f_cross1.shape[-1] != bank.dim or f_cross2.shape[-1] != bank.dim:
        raise ShapeError(f"embedding width must be {bank.dim}")
    missing = bank.excluded_classes()
    if missing.size:
        warnings.warn(f"classes {missing.tolist()} have no initialized prototype and are excluded")
    P = bank.protos.data
    pn = np.maximum(np.linalg.norm(P, axis=-1), NORM_FLOOR)
    rows = []
    for k, f in enumerate((f_cross1, f_cross2)):
        unit = f / _norm(f)
        cos = T.matmul(unit, Tensor((P[k] / pn[k][:, None]).T))
        penalty = np.where(bank.initialized[k], 0.0, EXCLUDED)
        rows.append(T.reshape(-cos + penalty, (f.shape[0], 1, bank.n_classes)))
    d = T.concat(rows, 1)
    return T.reshape(d, d.shape[1:]) if single else d


def prototype_predict(d: Tensor) -> Tuple[np.ndarray, Tensor]:
    """Winner-take-all class and softmax probabilities from ``(..., 2, C)`` distances."""
    d = T.as_tensor(d)
    nearest = T.minimum(T.getitem(d, np.s_[..., 0, :]), T.getitem(d, np.s_[..., 1, :]))
    p = nn.softmax(-nearest, axis=-1)
    cls = np.argmin(nearest.data, axis=-1)
    return cls, p


def prototype_update(bank: PrototypeBank, f_cross1, f_cross2, y) -> None:
    """EMA step toward the current class means, followed by renormalization."""
    y = np.asarray(y)
    labels = y.argmax(axis=-1) if y.ndim == 2 else y.astype(int)
    m = bank.momentum
    for k, f in enumerate((f_cross1, f_cross2)):
        f = f.data if isinstance(f, Tensor) else np.asarray(f, dtype=np.float64)
        for c in np.unique(labels):
            centre = f[labels == c].mean(axis=0)
            if bank.initialized[k, c]:
                centre = m * bank.protos.data[k, c] + (1.0 - m) * centre
            bank.protos.data[k, c] = centre / max(np.linalg.norm(centre), NORM_FLOOR)
            bank.initialized[k, c] = True


def _check_rows(p: Tensor, what: str = "probability") -> None:
    dev = np.abs(p.data.sum(axis=-1) - 1.0)
    if np.any(dev > 1e-6):
        raise ValueError(f"{what} rows do not sum to 1 (max deviation {dev.max():.3g})")


def loss_pce(p: Tensor, y) -> Tensor:
    _check_rows(p)
    y = T.as_tensor(y)
    return -T.sum(y * T.log(T.clip(p, PROB_FLOOR, None))) * (1.0 / p.shape[0])


# ---------------------------------------------------------------------------
# kernel mixture module
# ---------------------------------------------------------------------------

@dataclass
class KernelHeadParams:
    mean: nn.LinearParams
    sigma: nn.LinearParams
    pi: nn.LinearParams


@dataclass
class KMMOutputs:
    pi: Tensor
    mu: Tensor
    sigma: Tensor
    zeta: Tensor
    phi: Tensor
    sqdist: Tensor


def init_kmm(rng, d_i: int, n_classes: int) -> KernelHeadParams:
    return KernelHeadParams(nn.init_linear(rng, d_i, n_classes),
                            nn.init_linear(rng, d_i, n_classes),
                            nn.init_linear(rng, d_i, n_classes))


def kmm_forward(f: Tensor, p: KernelHeadParams) -> KMMOutputs:
    """Per-class isotropic Gaussian kernel on ``f`` (``(d_i,)`` or ``(B, d_i)``)."""
    f = T.as_tensor(f)
    if f.ndim == 1:
        f = T.reshape(f, (1, -1))
    B, d = f.shape
    mu = nn.linear(f, p.mean)
    sigma = nn.elu_plus_one(nn.linear(f, p.sigma))
    pi = nn.sigmoid(nn.linear(f, p.pi))
    C = mu.shape[-1]
    diff = T.reshape(f, (B, 1, d)) - T.reshape(mu, (B, C, 1))
    sqdist = T.sum(T.square(diff), -1)
    zeta = T.exp(-sqdist / (2.0 * T.square(sigma)))
    return KMMOutputs(pi, mu, sigma, zeta, pi * zeta, sqdist)


def kmm_loss(out: KMMOutputs, y, gamma_plus: float = 2.0, gamma_minus: float = 4.0) -> Tensor:
    """True-class reconstruction ``-log zeta`` plus the asymmetric focal terms."""
    y = T.as_tensor(y)
    n = out.pi.shape[0]
    recon = T.sum(y * out.sqdist / (2.0 * T.square(out.sigma)))
    pi = T.clip(out.pi, PI_FLOOR, 1.0 - PI_FLOOR)
    one_minus = 1.0 - pi
    pos = T.power(one_minus, gamma_plus) * T.log(pi)
    neg = T.power(pi, gamma_minus) * T.log(one_minus)
    asym = -T.sum(y * pos + (1.0 - y) * neg)
    return (recon + asym) * (1.0 / n)
