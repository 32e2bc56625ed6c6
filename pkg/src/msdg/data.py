"""Synthetic cross-scene rasters, the on-disk dataset layout, and patch extraction."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import gaussian_filter

from .tensor import load_tensor, save_tensor

PathLike = Union[str, Path]

# amplitude of the target scene's smooth, band-coloured illumination field
ILLUMINATION = 0.3


class DataError(ValueError):
    pass


@dataclass
class SceneRaster:
    """Two co-registered modalities and an integer label map (0 = unlabeled)."""

    modality1: np.ndarray
    modality2: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        H, W = self.labels.shape
        if self.modality1.shape[:2] != (H, W) or self.modality2.shape[:2] != (H, W):
            raise DataError("modalities and labels disagree on the raster size")
        if self.labels.min() < 0 or self.labels.max() > self.n_classes:
            raise DataError(f"labels must lie in 0..{self.n_classes}")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def channels(self) -> Tuple[int, int]:
        return self.modality1.shape[2], self.modality2.shape[2]

    def labeled_count(self) -> int:
        return int((self.labels > 0).sum())


def minmax_scale(x: np.ndarray) -> np.ndarray:
    """Per-channel min-max scaling of an ``(H, W, C)`` cube to ``[0, 1]``."""
    lo = x.min(axis=(0, 1), keepdims=True)
    span = x.max(axis=(0, 1), keepdims=True) - lo
    return np.divide(x - lo, span, out=np.zeros_like(x, dtype=np.float64), where=span > 0)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    n_classes: int = 5
    height: int = 64
    width: int = 64
    n1: int = 16
    n2: int = 2
    labeled: int = 2000
    cells_per_class: int = 4
    min_pixels: int = 40
    shift: float = 1.0
    seed: int = 0


def _voronoi_labels(rng, spec: SyntheticSpec) -> np.ndarray:
    H, W, C = spec.height, spec.width, spec.n_classes
    yy, xx = np.mgrid[0:H, 0:W]
    for _ in range(100):
        n_cells = C * spec.cells_per_class
        centres = rng.uniform([0, 0], [H, W], size=(n_cells, 2))
        cls = rng.permutation(np.arange(n_cells) % C) + 1
        d2 = (yy[..., None] - centres[:, 0]) ** 2 + (xx[..., None] - centres[:, 1]) ** 2
        lab = cls[np.argmin(d2, axis=-1)]
        if np.bincount(lab.ravel(), minlength=C + 1)[1:].min() >= spec.min_pixels:
            return lab
    raise DataError("could not place every class with the requested minimum area")


def _smooth_field(rng, shape, sigma: float) -> np.ndarray:
    f = gaussian_filter(rng.normal(size=shape), sigma=sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def _signatures(rng, C: int, n: int) -> np.ndarray:
    bands = np.linspace(0.0, 1.0, n)
    base = 0.45 + 0.15 * np.sin(2.5 * bands)
    sig = np.empty((C, n))
    for c in range(C):
        bump_at = rng.uniform(0, 1, size=2)
        bumps = sum(rng.uniform(-0.12, 0.12) * np.exp(-((bands - b) ** 2) / 0.02) for b in bump_at)
        sig[c] = base + bumps + rng.uniform(-0.05, 0.05)
    return sig


def _render(rng, labels: np.ndarray, sig1: np.ndarray, sig2: np.ndarray,
            texture: float, noise: float) -> Tuple[np.ndarray, np.ndarray]:
    H, W = labels.shape
    n1, n2 = sig1.shape[1], sig2.shape[1]
    idx = labels - 1
    tex = np.stack([_smooth_field(rng, (H, W), 2.0) for _ in range(3)], axis=-1)
    mixing = rng.normal(size=(3, n1)) / np.sqrt(3)
    m1 = sig1[idx] + texture * tex @ mixing + noise * rng.normal(size=(H, W, n1))
    m2 = sig2[idx] + 0.5 * noise * rng.normal(size=(H, W, n2))
    return m1, m2


def _sample_labeled(rng, labels: np.ndarray, count: int, C: int, prior: Optional[np.ndarray],
                    min_per_class: int) -> np.ndarray:
    flat = labels.ravel()
    weights = np.ones(flat.size) if prior is None else prior[flat - 1] / np.bincount(flat, minlength=C + 1)[flat]
    chosen = set()
    for c in range(1, C + 1):
        pool = np.flatnonzero(flat == c)
        take = min(min_per_class, pool.size)
        chosen.update(rng.choice(pool, size=take, replace=False).tolist())
    rest = np.setdiff1d(np.arange(flat.size), np.fromiter(chosen, dtype=np.intp))
    need = max(0, min(count, flat.size) - len(chosen))
    if need:
        p = weights[rest] / weights[rest].sum()
        chosen.update(rng.choice(rest, size=need, replace=False, p=p).tolist())
    out = np.zeros(flat.size, dtype=np.int64)
    keep = np.fromiter(sorted(chosen), dtype=np.intp)
    out[keep] = flat[keep]
    return out.reshape(labels.shape)


def gen_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> Tuple[SceneRaster, SceneRaster]:
    """Source and target scenes sharing class signatures up to a dialable shift.

    The target reuses the source signatures after a class-wise spectral drift,
    a channel-wise gain/offset, a band tilt and a smooth, band-coloured illumination
    field, all scaled by ``spec.shift``. Its spatial layout and label priors
    are drawn independently. ``shift = 0`` gives two draws of one process.
    """
    C, n1, n2, s = spec.n_classes, spec.n1, spec.n2, spec.shift
    if C < 2:
        raise DataError("need at least two classes")
    if not n1 > n2 >= 1:
        raise DataError("need n1 > n2 >= 1")
    if spec.height < 8 or spec.width < 8:
        raise DataError("scene must be at least 8x8")
    rng = np.random.default_rng(spec.seed)
    sig1 = _signatures(rng, C, n1)
    sig2 = rng.uniform(0.2, 0.8, size=(C, n2))
    # every random draw below happens regardless of s so that shift only rescales
    drift = np.stack([_smooth_field(rng, (n1,), 1.5) for _ in range(C)]) * 0.06
    gain = rng.normal(size=n1) * 0.15
    offset = rng.normal(size=n1) * 0.05
    tilt = np.linspace(-1.0, 1.0, n1) * rng.choice([-1.0, 1.0]) * 0.08
    gain2 = rng.normal(size=n2) * 0.1
    prior = rng.dirichlet(np.full(C, 2.0))
    profile = 0.5 + np.abs(_smooth_field(rng, (n1,), 3.0))

    src_rng, tgt_rng = np.random.default_rng(rng.integers(2 ** 63)), np.random.default_rng(rng.integers(2 ** 63))
    per_class = max(spec.min_pixels // 2, 1)

    lab_s = _voronoi_labels(src_rng, spec)
    m1, m2 = _render(src_rng, lab_s, sig1, sig2, texture=0.04, noise=0.03)
    source = SceneRaster(minmax_scale(m1), minmax_scale(m2),
                         _sample_labeled(src_rng, lab_s, spec.labeled, C, None, per_class), C)

    lab_t = _voronoi_labels(tgt_rng, spec)
    t_sig1 = (sig1 + s * drift) * (1.0 + s * gain) + s * (offset + tilt)
    t_sig2 = sig2 * (1.0 + s * gain2)
    m1, m2 = _render(tgt_rng, lab_t, t_sig1, t_sig2, texture=0.04, noise=0.03)
    illum = _smooth_field(tgt_rng, (spec.height, spec.width), 8.0)[..., None]
    m1 = m1 + s * ILLUMINATION * illum * profile
    t_prior = prior if s > 0 else None
    target = SceneRaster(minmax_scale(m1), minmax_scale(m2),
                         _sample_labeled(tgt_rng, lab_t, spec.labeled, C, t_prior, per_class), C)
    return source, target


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------

def save_scene(scene: SceneRaster, directory: PathLike) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n1, n2 = scene.channels
    meta = f"H={scene.height}\nW={scene.width}\nn1={n1}\nn2={n2}\nC={scene.n_classes}\n"
    (d / "meta").write_text(meta, encoding="utf-8")
    save_tensor(d / "mod1.msdg", scene.modality1)
    save_tensor(d / "mod2.msdg", scene.modality2)
    save_tensor(d / "labels.msdg", scene.labels.astype(np.float64))


def read_meta(path: PathLike) -> dict:
    meta = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        try:
            meta[k] = int(v)
        except ValueError:
            raise DataError(f"{path}:{lineno}: {k} must be an integer") from None
    for key in ("H", "W", "n1", "n2", "C"):
        if key not in meta:
            raise DataError(f"{path}: missing {key}")
    return meta


def load_scene(directory: PathLike, rescale: bool = True) -> SceneRaster:
    """Read a dataset directory; modalities are min-max scaled per channel."""
    d = Path(directory)
    if not (d / "meta").is_file():
        raise DataError(f"{d} has no meta file")
    meta = read_meta(d / "meta")
    try:
        m1 = load_tensor(d / "mod1.msdg").data
        m2 = load_tensor(d / "mod2.msdg").data
        lab = load_tensor(d / "labels.msdg").data
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    H, W = meta["H"], meta["W"]
    if m1.shape != (H, W, meta["n1"]) or m2.shape != (H, W, meta["n2"]) or lab.shape != (H, W):
        raise DataError(f"{d}: raster shapes disagree with meta")
    if not np.all(lab == np.round(lab)):
        raise DataError(f"{d}: label raster is not integral")
    if rescale:
        m1, m2 = minmax_scale(m1), minmax_scale(m2)
    return SceneRaster(m1, m2, lab.astype(np.int64), meta["C"])


def save_label_map(path: PathLike, labels: np.ndarray) -> None:
    save_tensor(path, np.asarray(labels, dtype=np.float64))


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

def _padded(scene: SceneRaster, m: int):
    r = m // 2
    pad = ((r, r), (r, r), (0, 0))
    if r >= min(scene.height, scene.width):
        raise DataError(f"patch size {m} too large for a {scene.height}x{scene.width} scene")
    return np.pad(scene.modality1, pad, mode="reflect"), np.pad(scene.modality2, pad, mode="reflect")


def iter_patches(scene: SceneRaster, m: int = 13, all_pixels: bool = False) -> Iterator[Tuple[np.ndarray, np.ndarray, int]]:
    """Yield ``(X1, X2, label)`` centred on each labeled pixel in row-major order."""
    if m % 2 == 0:
        raise DataError(f"patch size must be odd, got {m}")
    p1, p2 = _padded(scene, m)
    mask = np.ones_like(scene.labels, dtype=bool) if all_pixels else scene.labels > 0
    for i, j in zip(*np.nonzero(mask)):
        yield p1[i:i + m, j:j + m], p2[i:i + m, j:j + m], int(scene.labels[i, j])


def extract_patches(scene: SceneRaster, m: int = 13, all_pixels: bool = False):
    """Stacked patches, labels (``1..C``, 0 for unlabeled) and ``(row, col)`` centres."""
    if m % 2 == 0:
        raise DataError(f"patch size must be odd, got {m}")
    p1, p2 = _padded(scene, m)
    mask = np.ones_like(scene.labels, dtype=bool) if all_pixels else scene.labels > 0
    rows, cols = np.nonzero(mask)
    w1 = sliding_window_view(p1, (m, m), axis=(0, 1))  # (H, W, n1, m, m)
    w2 = sliding_window_view(p2, (m, m), axis=(0, 1))
    X1 = np.ascontiguousarray(w1[rows, cols].transpose(0, 2, 3, 1))
    X2 = np.ascontiguousarray(w2[rows, cols].transpose(0, 2, 3, 1))
    return X1, X2, scene.labels[rows, cols].astype(np.int64), np.stack([rows, cols], axis=1)


def stratified_split(y: np.ndarray, fraction: float, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Index arrays ``(train, held_out)`` keeping ``fraction`` of each class aside."""
    rng = np.random.default_rng(seed)
    train, held = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        k = int(round(fraction * idx.size))
        if fraction > 0 and idx.size > 1:
            k = min(max(k, 1), idx.size - 1)
        held.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(held))
