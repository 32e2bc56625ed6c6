"""Checkpoint container: a JSON manifest followed by concatenated tensor records.

Layout (all integers little-endian)::

    b"MSDGCKPT"  u32 manifest length  manifest (UTF-8 JSON)  tensor records...

The manifest lists every tensor by name with its shape, byte offset (from
the start of the tensor section) and byte length, plus the run config and
the scalar state needed to rebuild the objects.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import adversary as adv
from . import nn
from .config import ConfigError, RunConfig
from .heads import PrototypeBank
from .model import ModelParams, build_model
from .tensor import Tensor, tensor_from_bytes, tensor_to_bytes
from .training import OptimizerState, TrainResult

MAGIC = b"MSDGCKPT"
VERSION = 1
_MANIFEST_KEYS = ("config", "channels", "n_classes", "bank_momentum", "opt_model_step", "opt_adv_step", "tensors")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: ModelParams
    adversary: adv.AdversaryParams
    bank: PrototypeBank
    config: RunConfig
    opt_model: Optional[OptimizerState] = None
    opt_adv: Optional[OptimizerState] = None


def _opt_tensors(prefix: str, state: Optional[OptimizerState]) -> List[Tuple[str, np.ndarray]]:
    if state is None:
        return []
    out = [(f"{prefix}.m.{i}", a) for i, a in enumerate(state.m)]
    return out + [(f"{prefix}.v.{i}", a) for i, a in enumerate(state.v)]


def to_bytes(model: ModelParams, adversary: adv.AdversaryParams, bank: PrototypeBank,
             config: RunConfig, opt_model: Optional[OptimizerState] = None,
             opt_adv: Optional[OptimizerState] = None) -> bytes:
    entries: List[Tuple[str, np.ndarray]] = []
    entries += [(f"model.{n}", t.data) for n, t in nn.named_tensors(model)]
    entries += [(f"adversary.{n}", t.data) for n, t in nn.named_tensors(adversary)]
    entries += [("bank.protos", bank.protos.data), ("bank.initialized", bank.initialized.astype(np.float64))]
    entries += _opt_tensors("opt_model", opt_model)
    entries += _opt_tensors("opt_adv", opt_adv)

    blobs, records, offset = [], [], 0
    for name, arr in entries:
        blob = tensor_to_bytes(arr)
        records.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "length": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "version": VERSION,
        "config": config.to_dict(),
        "channels": list(model.channels),
        "n_classes": model.n_classes,
        "bank_momentum": bank.momentum,
        "opt_model_step": None if opt_model is None else opt_model.step,
        "opt_adv_step": None if opt_adv is None else opt_adv.step,
        "tensors": records,
    }
    text = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(text)) + text + b"".join(blobs)


def save_checkpoint(path, model, adversary, bank, config, opt_model=None, opt_adv=None) -> None:
    data = to_bytes(model, adversary, bank, config, opt_model, opt_adv)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_result(path, result: TrainResult) -> None:
    save_checkpoint(path, result.model, result.adversary, result.bank, result.config,
                    result.opt_model, result.opt_adv)


def _assign(target: Dict[str, Tensor], tensors: Dict[str, np.ndarray], prefix: str) -> None:
    for name, t in target.items():
        key = f"{prefix}.{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {key!r}")
        arr = tensors[key]
        if arr.shape != t.shape:
            raise CheckpointError(f"{key}: stored shape {arr.shape} disagrees with config shape {t.shape}")
        t.data = arr


def _load_opt(prefix: str, step, params: Dict[str, Tensor], tensors) -> Optional[OptimizerState]:
    if step is None:
        return None
    shapes = [t.shape for t in params.values()]
    bufs = []
    for kind in ("m", "v"):
        got = []
        for i, shape in enumerate(shapes):
            key = f"{prefix}.{kind}.{i}"
            if key not in tensors:
                raise CheckpointError(f"checkpoint lacks tensor {key!r}")
            if tensors[key].shape != shape:
                raise CheckpointError(f"{key}: stored shape {tensors[key].shape} disagrees with {shape}")
            got.append(tensors[key])
        bufs.append(got)
    return OptimizerState(bufs[0], bufs[1], int(step))


def from_bytes(buf: bytes) -> Checkpoint:
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint: magic mismatch")
    pos = len(MAGIC)
    if len(buf) < pos + 4:
        raise CheckpointError("truncated checkpoint header")
    (size,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + size:
        raise CheckpointError("truncated checkpoint manifest")
    try:
        manifest = json.loads(buf[pos:pos + size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from None
    if not isinstance(manifest, dict) or manifest.get("version") != VERSION:
        raise CheckpointError("unsupported checkpoint version")
    missing = [k for k in _MANIFEST_KEYS if k not in manifest]
    if missing:
        raise CheckpointError(f"manifest lacks {', '.join(missing)}")
    base = pos + size

    tensors: Dict[str, np.ndarray] = {}
    expected_end = base
    for rec in manifest["tensors"]:
        start = base + rec["offset"]
        try:
            t, end = tensor_from_bytes(buf, start)
        except ValueError as exc:
            raise CheckpointError(f"{rec['name']}: {exc}") from None
        if end - start != rec["length"] or list(t.shape) != rec["shape"]:
            raise CheckpointError(f"{rec['name']}: record disagrees with manifest")
        tensors[rec["name"]] = t.data
        expected_end = max(expected_end, end)
    if len(buf) != expected_end:
        raise CheckpointError(f"{len(buf) - expected_end} unexpected bytes after last tensor")

    try:
        cfg = RunConfig(**manifest["config"])
    except (TypeError, ConfigError) as exc:
        raise CheckpointError(f"bad config in checkpoint: {exc}") from None
    n1, n2 = manifest["channels"]
    C = manifest["n_classes"]
    model = build_model(cfg, n1, n2, C, np.random.default_rng(0))
    g = adv.build_adversary(cfg.adv_layers, n1, n2, cfg.adv_width, 0)
    m_named = dict(nn.named_tensors(model))
    g_named = dict(nn.named_tensors(g))
    _assign(m_named, tensors, "model")
    _assign(g_named, tensors, "adversary")

    bank = PrototypeBank(C, cfg.d_c, manifest["bank_momentum"])
    _assign({"protos": bank.protos}, tensors, "bank")
    init = tensors.get("bank.initialized")
    if init is None or init.shape != bank.initialized.shape:
        raise CheckpointError("bank.initialized missing or misshapen")
    bank.initialized = init.astype(bool)

    return Checkpoint(model, g, bank, cfg,
                      _load_opt("opt_model", manifest["opt_model_step"], m_named, tensors),
                      _load_opt("opt_adv", manifest["opt_adv_step"], g_named, tensors))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
