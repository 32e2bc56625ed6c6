"""Source-to-target runs and the ablation lattice."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import RunConfig
from .data import SceneRaster, extract_patches, stratified_split
from .training import EvalResult, TrainResult, evaluate, train

# loss switches per ablation row, in reporting order
VARIANTS: Dict[str, Dict[str, bool]] = {
    "L_PCE": dict(use_kmm=False, use_adv=False, use_consist=False),
    "+L_K": dict(use_kmm=True, use_adv=False, use_consist=False),
    "+L_ADV": dict(use_kmm=False, use_adv=True, use_consist=False),
    "+L_ADV+L_consist": dict(use_kmm=False, use_adv=True, use_consist=True),
    "full": dict(use_kmm=True, use_adv=True, use_consist=True),
}


@dataclass
class Patches:
    X1: np.ndarray
    X2: np.ndarray
    y: np.ndarray  # 0-based class indices

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Patches":
        return Patches(self.X1[idx], self.X2[idx], self.y[idx])


def labeled_patches(scene: SceneRaster, m: int) -> Patches:
    X1, X2, y, _ = extract_patches(scene, m)
    return Patches(X1, X2, y - 1)


@dataclass
class RunOutcome:
    variant: str
    seed: int
    result: TrainResult
    validation: EvalResult
    target: Optional[EvalResult]


def run_once(source: Patches, cfg: RunConfig, target: Optional[Patches] = None,
             n_classes: Optional[int] = None, variant: str = "") -> RunOutcome:
    """Train on a stratified share of ``source``; score held-out source and ``target``.

    The split is drawn from ``cfg.seed`` so every variant with the same seed
    sees the same training pixels.
    """
    tr, va = stratified_split(source.y, cfg.val_fraction, cfg.seed)
    fit, held = source.subset(tr), source.subset(va)
    result = train(fit.X1, fit.X2, fit.y, cfg, n_classes=n_classes)
    val = evaluate(result.model, result.bank, held.X1, held.X2, held.y) if len(held) else None
    tgt = evaluate(result.model, result.bank, target.X1, target.X2, target.y) if target is not None else None
    return RunOutcome(variant, cfg.seed, result, val, tgt)


def ablation(source: Patches, target: Patches, cfg: RunConfig, variants: Sequence[str] = tuple(VARIANTS),
             seeds: Sequence[int] = (0,), n_classes: Optional[int] = None) -> List[RunOutcome]:
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise KeyError(f"unknown variant(s) {unknown}")
    out = []
    for seed in seeds:
        for name in variants:
            out.append(run_once(source, cfg.replace(seed=seed, **VARIANTS[name]), target, n_classes, name))
    return out


def mean_target_oa(outcomes: Sequence[RunOutcome]) -> Dict[str, float]:
    by: Dict[str, List[float]] = {}
    for o in outcomes:
        by.setdefault(o.variant, []).append(o.target.oa)
    return {k: float(np.mean(v)) for k, v in by.items()}
