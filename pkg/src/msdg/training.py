"""Composite objectives, Adam, and the alternating adversary / task-model loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import adversary as adv
from . import heads, nn
from . import tensor as T
from .config import RunConfig
from .heads import PrototypeBank
from .metrics import Scores, confusion_matrix, metrics
from .model import ModelParams, build_model, forward
from .tensor import Tensor

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
LOSS_KEYS = ("L_pre", "L_PCE", "L_K", "L_ADV", "L_consist", "L_joint")


class NumericalError(RuntimeError):
    def __init__(self, step: int, component: str, value: float):
        super().__init__(f"non-finite {component} ({value}) at step {step}")
        self.step = step
        self.component = component


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_pre(l_pce: Tensor, l_k, alpha1: float) -> Tensor:
    return l_pce + alpha1 * T.as_tensor(l_k)


def _kl(a: Tensor, b: Tensor) -> Tensor:
    la = T.log(T.clip(a, PROB_FLOOR, None))
    lb = T.log(T.clip(b, PROB_FLOOR, None))
    return T.sum(a * (la - lb), -1)


def loss_consist(p_c: Tensor, p_g: Tensor) -> Tensor:
    """``KL(mix || p_c) + KL(mix || p_g)`` with ``mix`` their average, batch mean."""
    if p_c.shape != p_g.shape:
        raise ValueError(f"prediction shapes differ: {p_c.shape} vs {p_g.shape}")
    heads._check_rows(p_c, "p_c")
    heads._check_rows(p_g, "p_g")
    mix = (p_c + p_g) * 0.5
    return T.mean(_kl(mix, p_c) + _kl(mix, p_g))


def loss_joint(l_pre: Tensor, l_consist: Tensor, alpha2: float) -> Tensor:
    if not 0.0 <= alpha2 <= 1.0:
        raise ValueError(f"alpha2 must be in [0, 1], got {alpha2}")
    return alpha2 * T.as_tensor(l_pre) + (1.0 - alpha2) * T.as_tensor(l_consist)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "OptimizerState":
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params], 0)


def adam_step(params: Sequence[Tensor], grads: Dict[Tensor, np.ndarray], state: OptimizerState,
              lr: float, wd: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam with L2 weight decay folded into the gradient.

    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    if len(state.m) != len(params):
        raise ValueError(f"optimizer holds {len(state.m)} buffers for {len(params)} parameters")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for i, p in enumerate(params):
        if state.m[i].shape != p.shape:
            raise ValueError(f"buffer {i} has shape {state.m[i].shape}, parameter {p.shape}")
        g = grads.get(p)
        g = np.zeros(p.shape) if g is None else g
        if wd:
            g = g + wd * p.data
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        p.data -= lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: ModelParams
    adversary: adv.AdversaryParams
    bank: PrototypeBank
    config: RunConfig
    history: List[Dict[str, float]] = field(default_factory=list)
    opt_model: Optional[OptimizerState] = None
    opt_adv: Optional[OptimizerState] = None


def format_history(history: Sequence[Dict[str, float]]) -> str:
    lines = []
    for rec in history:
        parts = [f"step {rec['step']}"] + [f"{k} {rec[k]!r}" for k in LOSS_KEYS]
        lines.append(" ".join(parts))
    return "\n".join(lines) + ("\n" if lines else "")


def one_hot(y, n_classes: int) -> np.ndarray:
    out = np.zeros((len(y), n_classes))
    out[np.arange(len(y)), np.asarray(y, dtype=np.intp)] = 1.0
    return out


def _predict_probs(model: ModelParams, bank: PrototypeBank, X1, X2, train=False, rng=None):
    out = forward(model, X1, X2, train=train, rng=rng)
    d = heads.prototype_distances(out.f_cross1, out.f_cross2, bank)
    cls, p = heads.prototype_predict(d)
    return out, cls, p


def init_prototypes(model: ModelParams, bank: PrototypeBank, X1, X2, y, batch: int = 256) -> None:
    """Seed every prototype slot with the class mean of the untrained embeddings."""
    f1, f2 = [], []
    for s in range(0, len(y), batch):
        out = forward(model, X1[s:s + batch], X2[s:s + batch], train=False)
        f1.append(out.f_cross1.data)
        f2.append(out.f_cross2.data)
    heads.prototype_update(bank, np.concatenate(f1), np.concatenate(f2), np.asarray(y))


def _finite(step: int, name: str, value: Tensor) -> float:
    v = float(value.data) if isinstance(value, Tensor) else float(value)
    if not math.isfinite(v):
        raise NumericalError(step, name, v)
    return v


def minibatches(order: np.ndarray, batch_size: int) -> List[np.ndarray]:
    """Split ``order`` into ``ceil(N / batch_size)`` batches whose sizes differ by at most one.

    A short remainder batch (down to a single sample) would take an Adam step
    as large as a full one from a much noisier gradient.
    """
    return np.array_split(order, -(-len(order) // batch_size))


def train(X1: np.ndarray, X2: np.ndarray, y: np.ndarray, cfg: RunConfig,
          n_classes: Optional[int] = None,
          on_step: Optional[Callable[[str, int], None]] = None) -> TrainResult:
    """Alternate adversary and task-model updates over shuffled minibatches.

    Epochs ``< cfg.t_pre`` (and every epoch when ``cfg.use_adv`` is off) only
    pre-train the task model. Later steps run ``cfg.t_adv`` adversary updates
    with the model frozen, regenerate the augmented batch, then take one model
    step with the adversary frozen. ``on_step(phase, step)`` is called after
    each parameter update, with phase ``"adversary"`` or ``"model"``.
    """
    X1 = np.asarray(X1, dtype=np.float64)
    X2 = np.asarray(X2, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    if len(y) == 0:
        raise ValueError("empty training set")
    if not (np.isfinite(X1).all() and np.isfinite(X2).all()):
        raise ValueError("training patches contain non-finite values")
    C = int(n_classes or y.max() + 1)
    missing = sorted(set(range(C)) - set(np.unique(y).tolist()))
    if missing:
        raise ValueError(f"classes {missing} have no training samples")
    if X1.shape[1] != cfg.patch or X1.shape[2] != cfg.patch:
        raise ValueError(f"patches are {X1.shape[1]}x{X1.shape[2]}, config expects {cfg.patch}")
    rng = np.random.default_rng(cfg.seed)
    n1, n2 = X1.shape[-1], X2.shape[-1]
    model = build_model(cfg, n1, n2, C, rng)
    g = adv.build_adversary(cfg.adv_layers, n1, n2, cfg.adv_width, rng)
    bank = PrototypeBank(C, cfg.d_c, cfg.proto_momentum)
    init_prototypes(model, bank, X1, X2, y)

    m_params = [t for _, t in nn.named_tensors(model)]
    g_params = [t for _, t in nn.named_tensors(g)]
    opt_m = OptimizerState.for_params(m_params)
    opt_g = OptimizerState.for_params(g_params)
    Y = one_hot(y, C)
    history: List[Dict[str, float]] = []
    step = 0
    N = len(y)
    for epoch in range(cfg.epochs):
        order = rng.permutation(N)
        pretrain = epoch < cfg.t_pre or not cfg.use_adv
        for idx in minibatches(order, cfg.batch_size):
            x1, x2, yb, Yb = X1[idx], X2[idx], y[idx], Y[idx]
            rec = {k: 0.0 for k in LOSS_KEYS}
            rec["step"] = step
            aug = None
            if not pretrain:
                nn.set_requires_grad(model, False)
                nn.set_requires_grad(g, True)
                for _ in range(cfg.t_adv):
                    a = adv.augment(g, x1, x2)
                    _, _, p_g = _predict_probs(model, bank, a.xhat1, a.xhat2, train=False)
                    l_adv = adv.adv_loss(p_g, Yb, a.xhat1, a.xhat2)
                    rec["L_ADV"] = _finite(step, "L_ADV", l_adv)
                    grads = T.backward(l_adv)
                    adam_step(g_params, grads, opt_g, cfg.lr_adv, cfg.weight_decay,
                              cfg.beta1, cfg.beta2, cfg.adam_eps)
                    if on_step:
                        on_step("adversary", step)
                nn.set_requires_grad(g, False)
                aug = adv.augment(g, x1, x2)
            nn.set_requires_grad(model, True)

            out, _, p_c = _predict_probs(model, bank, x1, x2, train=True, rng=rng)
            l_pce = heads.loss_pce(p_c, Yb)
            rec["L_PCE"] = _finite(step, "L_PCE", l_pce)
            l_k = Tensor(0.0)
            if cfg.use_kmm:
                l_k = heads.kmm_loss(heads.kmm_forward(out.f_intra, model.kmm), Yb,
                                     cfg.gamma_plus, cfg.gamma_minus)
                rec["L_K"] = _finite(step, "L_K", l_k)
            l_pre = loss_pre(l_pce, l_k, cfg.alpha1)
            rec["L_pre"] = _finite(step, "L_pre", l_pre)
            if aug is None:
                loss = l_pre
            else:
                _, _, p_g = _predict_probs(model, bank, aug.xhat1.data, aug.xhat2.data, train=True, rng=rng)
                if cfg.use_consist:
                    l_con = loss_consist(p_c, p_g)
                    rec["L_consist"] = _finite(step, "L_consist", l_con)
                    loss = loss_joint(l_pre, l_con, cfg.alpha2)
                else:
                    loss = l_pre + heads.loss_pce(p_g, Yb)
            rec["L_joint"] = _finite(step, "L_joint", loss)
            grads = T.backward(loss)
            adam_step(m_params, grads, opt_m, cfg.lr_model, cfg.weight_decay,
                      cfg.beta1, cfg.beta2, cfg.adam_eps)
            heads.prototype_update(bank, out.f_cross1.data, out.f_cross2.data, yb)
            history.append(rec)
            if on_step:
                on_step("model", step)
            step += 1
        logger.info("epoch %d done, last L_joint %.4f", epoch, history[-1]["L_joint"] if history else float("nan"))
    nn.set_requires_grad(g, True)
    return TrainResult(model, g, bank, cfg, history, opt_m, opt_g)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    scores: Scores
    confusion: np.ndarray
    predictions: np.ndarray
    probabilities: np.ndarray
    embeddings: np.ndarray

    @property
    def oa(self) -> float:
        return self.scores.oa

    @property
    def aa(self) -> float:
        return self.scores.aa

    @property
    def kappa(self) -> float:
        return self.scores.kappa

    @property
    def per_class(self) -> np.ndarray:
        return self.scores.per_class


def predict(model: ModelParams, bank: PrototypeBank, X1, X2, batch: int = 256):
    """Eval-mode class indices, probabilities and concatenated cross-domain embeddings."""
    X1 = np.asarray(X1, dtype=np.float64)
    X2 = np.asarray(X2, dtype=np.float64)
    if len(X1) == 0:
        raise ValueError("nothing to predict")
    cls, probs, emb = [], [], []
    for s in range(0, len(X1), batch):
        out, c, p = _predict_probs(model, bank, X1[s:s + batch], X2[s:s + batch])
        cls.append(c)
        probs.append(p.data)
        emb.append(np.concatenate([out.f_cross1.data, out.f_cross2.data], axis=-1))
    return np.concatenate(cls), np.concatenate(probs), np.concatenate(emb)


def evaluate(model: ModelParams, bank: PrototypeBank, X1, X2, y, batch: int = 256) -> EvalResult:
    y = np.asarray(y, dtype=np.intp)
    if len(y) == 0:
        raise ValueError("empty evaluation split")
    cls, probs, emb = predict(model, bank, X1, X2, batch)
    cm = confusion_matrix(y, cls, model.n_classes)
    return EvalResult(metrics(cm), cm, cls, probs, emb)
