"""Command-line entry point: ``mung <command> --config run.json --out DIR``.

Exit codes: 0 success, 1 usage/config/compatibility error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import config as config_mod
from .backbone import Backbone, IncompatibleError, LengthError
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .generator import NoiseGenerator, UnsupportedVariantError
from .optim import TrainingError
from .tensor import DimensionError, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("MUNG_OUT_DIR")
    if not out:
        raise UsageError("no output directory: pass --out or set MUNG_OUT_DIR")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config(args) -> RunConfig:
    return config_mod.load(args.config) if args.config else RunConfig()


def _backbone(args, cfg: RunConfig) -> Backbone:
    if not args.backbone:
        raise UsageError("--backbone is required")
    try:
        return Backbone.load(args.backbone, cfg.backbone).freeze()
    except FileNotFoundError as exc:
        raise UsageError(f"backbone checkpoint not found: {args.backbone}") from exc


def _generator(path, bb: Backbone) -> NoiseGenerator:
    try:
        return NoiseGenerator.load(path, bb.config.d_model)
    except FileNotFoundError as exc:
        raise UsageError(f"generator checkpoint not found: {path}") from exc


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------- commands


def cmd_pretrain(args) -> int:
    from .pipeline import run_pretrain

    cfg, out = _config(args), _out_dir(args)
    _, summary = run_pretrain(cfg, out, log=lambda r: _log(f"step {r['step']:5d}  loss {r['loss']:.4f}"))
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import run_train

    cfg, out = _config(args), _out_dir(args)
    bb = _backbone(args, cfg)
    _, summary = run_train(cfg, bb, out)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pipeline import run_eval, write_json, write_manifest
    from .checkpoint import file_digest

    cfg, out = _config(args), _out_dir(args)
    bb = _backbone(args, cfg)
    gen = _generator(args.mung, bb) if args.mung else None
    report = run_eval(cfg, bb, gen)
    write_json(out / "eval_report.json", report)
    ckpts = {"backbone": file_digest(args.backbone)}
    if args.mung:
        ckpts["generator"] = file_digest(args.mung)
    write_manifest(out, "eval", cfg, ckpts)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .pipeline import run_ablation, write_json, write_manifest
    from .checkpoint import file_digest

    cfg, out = _config(args), _out_dir(args)
    bb = _backbone(args, cfg)
    report = run_ablation(cfg, bb, workers=args.workers)
    table = report.pop("table")
    write_json(out / "ablation.json", report)
    (out / "ablation.txt").write_text(table)
    write_manifest(out, "ablate", cfg, {"backbone": file_digest(args.backbone)})
    print(table, end="")
    return EXIT_OK


def cmd_viz(args) -> int:
    from .pipeline import run_viz, write_json, write_manifest
    from .checkpoint import file_digest

    cfg, out = _config(args), _out_dir(args)
    bb = _backbone(args, cfg)
    if not args.mung:
        raise UsageError("--mung is required for viz")
    gen = _generator(args.mung, bb)
    if args.index < 0:
        raise UsageError("--index must be non-negative")
    report = run_viz(cfg, bb, gen, args.index, out)
    write_json(out / f"viz_{args.index}.json", report)
    write_manifest(out, "viz", cfg, {"backbone": file_digest(args.backbone), "generator": file_digest(args.mung)})
    print(json.dumps({k: report[k] for k in ("index", "question", "answer", "files")}, indent=2))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .pipeline import run_gradcheck, write_json

    cfg = _config(args)
    report = run_gradcheck(cfg, tol=args.tol)
    if args.out or os.environ.get("MUNG_OUT_DIR"):
        write_json(_out_dir(args) / "gradcheck.json", report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK if report["passed"] else EXIT_NUMERIC


def cmd_dump(args) -> int:
    from .synth import dataset, dump_jsonl

    cfg, out = _config(args), _out_dir(args)
    scene = cfg.pretrain_scene if args.split == "pretrain" else cfg.task_scene
    n = dump_jsonl(dataset(cfg.seed, args.n, args.split, scene), out / f"{args.split}.jsonl")
    print(f"wrote {n} triplets to {out / (args.split + '.jsonl')}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mung", description="Noise-generator fine-tuning on a toy frozen multimodal model.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help, backbone=False, mung=False, out=True):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="JSON run config (defaults for every missing field)")
        if out:
            sp.add_argument("--out", help="output directory (default: $MUNG_OUT_DIR)")
        if backbone:
            sp.add_argument("--backbone", help="backbone checkpoint (.mung)")
        if mung:
            sp.add_argument("--mung", help="generator checkpoint (.mung)")
        sp.set_defaults(fn=fn)
        return sp

    add("pretrain", cmd_pretrain, "train the backbone on clean scenes")
    add("train", cmd_train, "train the noise generator against a frozen backbone", backbone=True)
    add("eval", cmd_eval, "entropy, accuracy and relevance report", backbone=True, mung=True)
    add("ablate", cmd_ablate, "six-cell injection/structure grid", backbone=True).add_argument(
        "--workers", type=int, default=1, help="parallel worker processes")
    viz = add("viz", cmd_viz, "export per-slot maps for one test triplet", backbone=True, mung=True)
    viz.add_argument("--index", type=int, default=0)
    gc = add("gradcheck", cmd_gradcheck, "finite-difference check of the full objective")
    gc.add_argument("--tol", type=float, default=1e-3)
    dump = add("dump", cmd_dump, "write a dataset split as JSONL")
    dump.add_argument("--split", choices=("train", "val", "test", "pretrain"), default="test")
    dump.add_argument("--n", type=int, default=100)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.fn(args)
    except (UsageError, ConfigError, IncompatibleError, CheckpointError, UnsupportedVariantError,
            LengthError, DimensionError) as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    except (NumericalError, TrainingError, FloatingPointError) as exc:
        _log(f"numerical failure: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
