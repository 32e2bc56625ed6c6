"""Command-line entry point: ``msdg {gen-data,train,eval,gradcheck,ablate}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import checkpoint as ckpt
from . import experiment, gradcheck
from .config import ConfigError, RunConfig
from .data import DataError, SyntheticSpec, extract_patches, gen_synthetic, load_scene, save_label_map, save_scene
from .tensor import save_tensor
from .training import NumericalError, evaluate, format_history, predict

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _scene_dir(root: Path, role: str) -> Path:
    """``root`` itself when it holds a scene, else its ``role`` subdirectory."""
    if (root / "meta").is_file():
        return root
    sub = root / role
    if (sub / "meta").is_file():
        return sub
    raise DataError(f"no dataset found at {root} or {sub}")


def _load_config(path: Optional[str]) -> RunConfig:
    return RunConfig.from_file(path) if path else RunConfig()


def _print_scores(label: str, ev) -> None:
    print(f"{label}: OA {ev.oa:.4f} AA {ev.aa:.4f} Kappa {ev.kappa:.4f}")


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    spec = SyntheticSpec(n_classes=args.classes, shift=args.shift, seed=args.seed)
    source, target = gen_synthetic(spec)
    save_scene(source, out / "source")
    save_scene(target, out / "target")
    print(f"wrote {out / 'source'} ({source.labeled_count()} labeled) and "
          f"{out / 'target'} ({target.labeled_count()} labeled)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    scene = load_scene(_scene_dir(Path(args.data), "source"))
    patches = experiment.labeled_patches(scene, cfg.patch)
    run = experiment.run_once(patches, cfg, n_classes=scene.n_classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt.save_result(out / "checkpoint.msdg", run.result)
    (out / "history.log").write_text(format_history(run.result.history), encoding="utf-8")
    if run.validation is not None:
        _print_scores("validation", run.validation)
    print(f"wrote {out / 'checkpoint.msdg'} and {out / 'history.log'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    state = ckpt.load_checkpoint(args.checkpoint)
    scene = load_scene(_scene_dir(Path(args.data), "target"))
    if scene.channels != state.model.channels:
        raise DataError(f"scene channels {scene.channels} do not match the model's {state.model.channels}")
    m = state.config.patch
    patches = experiment.labeled_patches(scene, m)
    if len(patches):
        ev = evaluate(state.model, state.bank, patches.X1, patches.X2, patches.y)
        _print_scores("eval", ev)
        print("per-class recall: " + " ".join(f"{v:.4f}" for v in ev.per_class))
        if args.emit_embeddings:
            save_tensor(args.emit_embeddings, ev.embeddings)
    elif args.emit_embeddings:
        raise DataError("scene has no labeled pixels to embed")
    if args.emit_map:
        X1, X2, _, coords = extract_patches(scene, m, all_pixels=True)
        cls, _, _ = predict(state.model, state.bank, X1, X2)
        raster = np.zeros((scene.height, scene.width))
        raster[coords[:, 0], coords[:, 1]] = cls + 1
        save_label_map(args.emit_map, raster)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    modules = [args.module] if args.module else []
    if args.module and args.module not in gradcheck.CHECKS:
        raise UsageError(f"unknown module {args.module!r}; choose from {', '.join(gradcheck.CHECKS)}")
    results = gradcheck.run(modules, seeds=range(args.seeds))
    worst = gradcheck.worst_by_module(results)
    for mod, err in worst.items():
        print(f"{mod:10s} max relative error {err:.3e} {'ok' if err < gradcheck.TOLERANCE else 'FAIL'}")
    return EXIT_OK if all(e < gradcheck.TOLERANCE for e in worst.values()) else EXIT_NUMERIC


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    root = Path(args.data)
    source = load_scene(_scene_dir(root, "source"))
    target = load_scene(root / "target") if (root / "target" / "meta").is_file() else source
    src = experiment.labeled_patches(source, cfg.patch)
    tgt = experiment.labeled_patches(target, cfg.patch)
    print(f"{'variant':18s} {'OA':>7s} {'AA':>7s} {'Kappa':>7s} {'val_OA':>7s}")
    for name in experiment.VARIANTS:
        o = experiment.run_once(src, cfg.replace(**experiment.VARIANTS[name]), tgt, source.n_classes, name)
        print(f"{name:18s} {o.target.oa:7.4f} {o.target.aa:7.4f} {o.target.kappa:7.4f} {o.validation.oa:7.4f}",
              flush=True)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="msdg", description="Multi-source cross-scene domain generalization on raster patches.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic source/target scene pair")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--shift", type=float, default=1.0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a source scene")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a scene")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--emit-map")
    e.add_argument("--emit-embeddings")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--module")
    c.add_argument("--seeds", type=int, default=4, help="random instances per check")
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train every ablation variant and score the target")
    a.add_argument("--data", required=True)
    a.add_argument("--config")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"msdg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"msdg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"msdg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ckpt.CheckpointError, OSError, ValueError) as exc:
        print(f"msdg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
