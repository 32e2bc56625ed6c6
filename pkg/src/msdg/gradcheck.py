"""Randomized finite-difference checks for every differentiable piece.

Each check draws a fresh small instance (every extent at most 4) from its
own seed and reports the worst relative error between the analytic and the
central-difference gradient.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import adversary as adv
from . import fusion, heads, nn, training
from . import tensor as T
from .tensor import Tensor

TOLERANCE = 1e-4

Builder = Callable[[np.random.Generator], Tuple[Callable[[], Tensor], List[Tensor]]]


def _leaf(rng, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _probe(rng, out: Tensor) -> np.ndarray:
    # a random projection keeps every gradient entry generically nonzero
    return rng.normal(size=out.shape)


def _weighted(rng, fn: Callable[[], Tensor]):
    w = _probe(rng, fn())
    return lambda: T.sum(fn() * w)


def _dims(rng, n: int, lo: int = 1, hi: int = 4) -> List[int]:
    return [int(v) for v in rng.integers(lo, hi + 1, size=n)]


def _labels(rng, B, C) -> np.ndarray:
    return training.one_hot(rng.integers(0, C, size=B), C)


# --- tensor core ------------------------------------------------------------

def _binary(kind):
    def build(rng):
        a_shape = _dims(rng, 3)
        b_shape = [d if rng.random() < 0.5 else 1 for d in a_shape]
        a = _leaf(rng, *a_shape)
        b = _leaf(rng, *b_shape, lo=0.5, hi=1.5) if kind == "div" else _leaf(rng, *b_shape)
        return _weighted(rng, lambda: T.elementwise(kind, a, b)), [a, b]
    return build


def _unary(kind, lo=-1.0, hi=1.0):
    def build(rng):
        a = _leaf(rng, *_dims(rng, 3), lo=lo, hi=hi)
        return _weighted(rng, lambda: T.elementwise(kind, a)), [a]
    return build


def _power(rng):
    a = _leaf(rng, *_dims(rng, 2), lo=0.2, hi=2.0)
    e = float(rng.uniform(-2, 3))
    return _weighted(rng, lambda: T.power(a, e)), [a]


def _clip(rng):
    # interior points only: keep every entry well clear of the bounds
    vals = rng.choice([-0.8, -0.1, 0.4, 0.9], size=_dims(rng, 2)) + rng.uniform(-0.05, 0.05)
    a = Tensor(vals, requires_grad=True)
    return _weighted(rng, lambda: T.clip(a, -0.5, 0.6)), [a]


def _minimum(rng):
    shape = _dims(rng, 2)
    a = _leaf(rng, *shape)
    b = Tensor(a.data + rng.choice([-0.3, 0.3], size=shape), requires_grad=True)
    return _weighted(rng, lambda: T.minimum(a, b)), [a, b]


def _matmul(rng):
    B, n, k, m = _dims(rng, 4)
    a = _leaf(rng, B, n, k)
    b = _leaf(rng, k, m)
    return _weighted(rng, lambda: T.matmul(a, b)), [a, b]


def _reduce(kind):
    def build(rng):
        x = _leaf(rng, *_dims(rng, 3, lo=2))
        axes = tuple(sorted(rng.choice(3, size=int(rng.integers(1, 3)), replace=False).tolist()))
        keep = bool(rng.random() < 0.5)
        return _weighted(rng, lambda: T.reduce(kind, x, axes, keep)), [x]
    return build


def _shape_ops(rng):
    a, b, c = _dims(rng, 3)
    x = _leaf(rng, a, b, c)
    y = _leaf(rng, a, b, 2)
    idx = rng.integers(0, a, size=3)

    def f():
        z = T.concat([x, y], -1)
        z = T.transpose(T.reshape(z, (a, b * (c + 2))), (1, 0))
        return T.take(z, idx, axis=1) + T.getitem(z, np.s_[:, :1])

    return _weighted(rng, f), [x, y]


# --- nn ops -----------------------------------------------------------------

def _conv(padding, k):
    def build(rng):
        B, H, cin, cout = _dims(rng, 4)
        H = max(H, k) if padding == "valid" else H
        x = _leaf(rng, B, H, H, cin)
        p = nn.init_conv(rng, cin, cout, k, padding)
        return _weighted(rng, lambda: nn.conv2d(x, p)), [x, p.kernel, p.bias]
    return build


def _deconv(rng):
    B, C, Co, m = _dims(rng, 4)
    x = _leaf(rng, B, 1, 1, C)
    p = nn.init_conv(rng, C, Co, m, "valid")
    return _weighted(rng, lambda: nn.deconv2d(x, p, m)), [x, p.kernel, p.bias]


def _activation(kind):
    def build(rng):
        # keep clear of the leaky-relu and elu kinks at zero
        x = Tensor(rng.choice([-1, 1], size=_dims(rng, 3)) * rng.uniform(0.05, 2.0), requires_grad=True)
        return _weighted(rng, lambda: nn.activation(kind, x)), [x]
    return build


def _softmax(rng):
    x = _leaf(rng, *_dims(rng, 3, lo=2), lo=-3, hi=3)
    return _weighted(rng, lambda: nn.softmax(x, -1)), [x]


def _spar(rng):
    B, m, C = _dims(rng, 3, lo=2)
    c = _leaf(rng, B, m, m, C)
    s = _leaf(rng, B, m, m, C)
    return _weighted(rng, lambda: nn.spar(c, s)), [c, s]


def _char(rng):
    # two channels would make the normalized partner a constant +-1
    B, m = _dims(rng, 2, lo=2)
    C = int(rng.integers(3, 5))
    o = _leaf(rng, B, m, m, C)
    q = _leaf(rng, B, m, m, C)
    return _weighted(rng, lambda: nn.char(o, q)), [o, q]


def _attention(rng):
    B, L, h = _dims(rng, 3, hi=3)
    D = h * int(rng.integers(1, 3))
    fq = _leaf(rng, B, L, D)
    fkv = _leaf(rng, B, L, D)
    p = nn.init_attention(rng, D, h)
    params = [fq, fkv, p.w_q, p.w_k, p.w_v, p.w_o]
    return _weighted(rng, lambda: nn.multi_head_cross_attention(fq, fkv, p)), params


# --- adversary --------------------------------------------------------------

def _adversary(rng):
    B, m, C = 2, int(rng.integers(2, 4)), 3
    n1, n2 = int(rng.integers(2, 4)), 1
    g = adv.build_adversary(int(rng.integers(2, 4)), n1, n2, width=2, seed=rng)
    x1 = rng.uniform(0.4, 0.6, size=(B, m, m, n1))
    x2 = rng.uniform(0.4, 0.6, size=(B, m, m, n2))
    # unit-gain, mostly active hidden layers keep gradients well above round-off; the output
    # layer is then shrunk so the residual stays inside the clamp's linear zone
    for layer in g.shared + g.pre[0] + g.pre[1]:
        layer.kernel.data *= 2.5
        layer.bias.data += 0.5
    for k, x in enumerate((x1, x2)):
        scale = 0.08 / max(np.abs(adv.residual(g, k, Tensor(x)).data).max(), 1e-3)
        g.out[k].kernel.data *= scale
        g.out[k].bias.data *= scale
    proj = Tensor(rng.normal(size=(n1 + n2, C)))
    y = _labels(rng, B, C)

    def f():
        a = adv.augment(g, x1, x2)
        pooled = T.concat([nn.mean_pool(a.xhat1), nn.mean_pool(a.xhat2)], -1)
        p = nn.softmax(T.matmul(pooled, proj), -1)
        return adv.adv_loss(p, y, a.xhat1, a.xhat2)

    return f, [t for _, t in nn.named_tensors(g)]


def _tv(rng):
    x = _leaf(rng, *_dims(rng, 4, lo=2))
    return (lambda: adv.tv_loss(x)), [x]


# --- fusion -----------------------------------------------------------------

def _features(rng, B, m, d_spa, d_cha) -> fusion.DomainFeatures:
    return fusion.DomainFeatures(_leaf(rng, B, m, m, d_spa), _leaf(rng, B, 1, 1, d_cha),
                                 _leaf(rng, B, m, m, d_cha))


def _encoder(rng):
    B, m, n = 2, int(rng.integers(1, 4)), int(rng.integers(1, 4))
    X = _leaf(rng, B, m, m, n, lo=0, hi=1)
    p = fusion.init_encoder(rng, n, m, 2, 2)

    def f():
        d = fusion.encode_domain(X, p)
        return d.spa, d.cha_map

    w = [_probe(rng, t) for t in f()]
    return (lambda: sum(T.sum(t * wi) for t, wi in zip(f(), w))), [X] + [t for _, t in nn.named_tensors(p)]


def _randomize(rng):
    B, m = 3, 2
    f1, f2 = _features(rng, B, m, 2, 2), _features(rng, B, m, 2, 2)
    encs = [fusion.init_encoder(rng, 1, m, 2, 2) for _ in range(2)]
    partners = (fusion.pick_partners(B, rng), fusion.pick_partners(B, rng))

    def f():
        r1, r2 = fusion.randomize(f1, f2, encs, train=True, partners=partners)
        return r1.spa, r1.cha_map, r2.spa, r2.cha_map

    w = [_probe(rng, t) for t in f()]
    params = [f1.spa, f1.cha, f2.spa, f2.cha, encs[0].deconv.kernel, encs[1].deconv.bias]
    return (lambda: sum(T.sum(t * wi) for t, wi in zip(f(), w))), params


def _enhance(rng):
    B, m, D = _dims(rng, 3)
    a, b = _leaf(rng, B, m, m, D), _leaf(rng, B, m, m, D)
    p = fusion.init_enhance(rng, D)
    p.lam.data = rng.uniform(0.5, 1.5, size=2)

    def f():
        return T.concat(list(fusion.coupled_enhance(a, b, p)), -1)

    return _weighted(rng, f), [a, b, p.w.kernel, p.w.bias, p.lam]


def _cross(rng):
    B, m, d_spa, d_cha, d_c = 2, 2, 2, 2, 3
    p = fusion.init_cross(rng, d_spa, d_cha, d_c, 2)
    spa = (_leaf(rng, B, m, m, d_spa), _leaf(rng, B, m, m, d_spa))
    cha = (_leaf(rng, B, m, m, d_cha), _leaf(rng, B, m, m, d_cha))

    def f():
        return T.concat(list(fusion.cross_fuse(spa, cha, p)), -1)

    params = list(spa) + list(cha) + [p.attn_spa.w_q, p.attn_cha.w_v, p.enhance_spa.lam, p.agg3.kernel, p.proj[1].kernel]
    return _weighted(rng, f), params


def _intra(rng):
    B, m, d_spa, d_cha = 2, 2, 2, 2
    p = fusion.init_intra(rng, d_spa, d_cha, 4)
    f1, f2 = _features(rng, B, m, d_spa, d_cha), _features(rng, B, m, d_spa, d_cha)
    n1, n2 = (3, 1) if rng.random() < 0.5 else (1, 3)
    params = [f1.spa, f1.cha_map, f2.spa, f2.cha_map, p.deep1.kernel, p.deep2.bias, p.point_spa.kernel, p.point_cha.kernel]
    return _weighted(rng, lambda: fusion.intra_fuse(f1, f2, n1, n2, p)), params


# --- heads and losses -------------------------------------------------------

def _prototype_pce(rng):
    B, C, d = 3, int(rng.integers(2, 5)), int(rng.integers(2, 5))
    bank = heads.PrototypeBank(C, d)
    heads.prototype_update(bank, rng.normal(size=(C, d)), rng.normal(size=(C, d)), np.arange(C))
    f1, f2 = _leaf(rng, B, d), _leaf(rng, B, d)
    y = _labels(rng, B, C)

    def f():
        _, p = heads.prototype_predict(heads.prototype_distances(f1, f2, bank))
        return heads.loss_pce(p, y)

    return f, [f1, f2]


def _kmm(rng):
    B, d, C = _dims(rng, 3, lo=2)
    x = _leaf(rng, B, d)
    p = heads.init_kmm(rng, d, C)
    y = _labels(rng, B, C)
    return (lambda: heads.kmm_loss(heads.kmm_forward(x, p), y)), [x] + [t for _, t in nn.named_tensors(p)]


def _pre(rng):
    B, d, C = _dims(rng, 3, lo=2)
    x = _leaf(rng, B, d)
    p = heads.init_kmm(rng, d, C)
    z = _leaf(rng, B, C, lo=-2, hi=2)
    y = _labels(rng, B, C)
    a1 = float(rng.uniform(0, 1))

    def f():
        return training.loss_pre(heads.loss_pce(nn.softmax(z), y), heads.kmm_loss(heads.kmm_forward(x, p), y), a1)

    return f, [x, z]


def _consist(rng):
    B, C = _dims(rng, 2, lo=2)
    zc, zg = _leaf(rng, B, C, lo=-2, hi=2), _leaf(rng, B, C, lo=-2, hi=2)
    return (lambda: training.loss_consist(nn.softmax(zc), nn.softmax(zg))), [zc, zg]


def _joint(rng):
    B, C = _dims(rng, 2, lo=2)
    zc, zg = _leaf(rng, B, C, lo=-2, hi=2), _leaf(rng, B, C, lo=-2, hi=2)
    y = _labels(rng, B, C)
    a2 = float(rng.uniform(0, 1))

    def f():
        pc, pg = nn.softmax(zc), nn.softmax(zg)
        return training.loss_joint(heads.loss_pce(pc, y), training.loss_consist(pc, pg), a2)

    return f, [zc, zg]


CHECKS: Dict[str, Dict[str, Builder]] = {
    "tensor": {
        "add": _binary("add"), "sub": _binary("sub"), "mul": _binary("mul"), "div": _binary("div"),
        "exp": _unary("exp"), "log": _unary("log", 0.2, 2.0), "sqrt": _unary("sqrt", 0.2, 2.0),
        "square": _unary("square"), "neg": _unary("neg"), "power": _power, "clip": _clip,
        "minimum": _minimum, "matmul": _matmul, "sum": _reduce("sum"), "mean": _reduce("mean"),
        "std": _reduce("std"), "shape_ops": _shape_ops,
    },
    "nn": {
        "conv_same3": _conv("same", 3), "conv_same1": _conv("same", 1), "conv_valid": _conv("valid", 2),
        "deconv": _deconv, "leaky_relu": _activation("leaky_relu"), "sigmoid": _activation("sigmoid"),
        "elu_plus_one": _activation("elu_plus_one"), "softmax": _softmax, "spar": _spar,
        "char": _char, "attention": _attention,
    },
    "adversary": {"adv_loss": _adversary, "tv": _tv},
    "fusion": {"encoder": _encoder, "randomize": _randomize, "coupled_enhance": _enhance,
               "cross_fuse": _cross, "intra_fuse": _intra},
    "heads": {"prototype_pce": _prototype_pce, "kmm_loss": _kmm},
    "training": {"loss_pre": _pre, "loss_consist": _consist, "loss_joint": _joint},
}


@dataclass
class CheckResult:
    module: str
    name: str
    seed: int
    error: float

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


def run_check(module: str, name: str, seed: int) -> CheckResult:
    rng = np.random.default_rng([seed, len(name), sum(map(ord, module + name))])
    f, params = CHECKS[module][name](rng)
    return CheckResult(module, name, seed, T.finite_diff_check(f, params))


def run(modules: Sequence[str] = (), seeds: Sequence[int] = range(4)) -> List[CheckResult]:
    """Run the named modules (all when empty) over each seed."""
    unknown = set(modules) - set(CHECKS)
    if unknown:
        raise KeyError(f"unknown module(s): {', '.join(sorted(unknown))}; choose from {', '.join(CHECKS)}")
    chosen = list(modules) or list(CHECKS)
    return [run_check(mod, name, seed) for mod in chosen for name in CHECKS[mod] for seed in seeds]


def worst_by_module(results: Sequence[CheckResult]) -> Dict[str, float]:
    out: Dict[str, float] = {}
    for r in results:
        out[r.module] = max(out.get(r.module, 0.0), r.error)
    return out
