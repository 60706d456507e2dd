"""Command-line entry point: ``affordground <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from .checkpoint import Checkpoint
from .config import ABLATION_COMPONENTS, RunConfig, desk_config, tiny_config
from .data import CORRUPTION_MODES
from .metrics import format_table
from .train import (EVAL_SPLITS, CORRUPTION_RATES, TrainingDiverged, VocabularyMismatch, ablate,
                    corruption_experiment, evaluate, generate_data, load_splits, train)

log = logging.getLogger("affordground")

PRESETS = {"default": RunConfig, "desk": desk_config, "tiny": tiny_config}


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else PRESETS[args.preset]()
    overrides = {}
    for item in args.set or []:
        key, _, value = item.partition("=")
        overrides[key.strip()] = value
    if overrides:
        cfg = RunConfig.from_dict({**cfg.to_dict(), **overrides})
    return cfg


def _emit(text: str, out: str | None) -> None:
    print(text)
    if out:
        Path(out).write_text(text + "\n")


def cmd_gen_data(args) -> int:
    cfg = _config(args).replace(samples_per_pair=args.samples_per_pair, n_classes=args.classes)
    if args.points:
        cfg = cfg.replace(n_points=args.points)
    splits = generate_data(cfg, seed=args.seed, out_dir=args.out)
    for name, samples in splits.items():
        print(f"{name}: {len(samples)} samples")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    splits = load_splits(cfg, ("train", "val"))
    resume = Checkpoint.load(args.resume) if args.resume else None
    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.txt")
    t0 = time.perf_counter()
    result = train(cfg, splits, resume=resume, out_dir=out_dir, log_path=out_dir / "log.jsonl")
    print(f"trained {cfg.epochs} epochs in {time.perf_counter() - t0:.1f}s; best epoch {result.best.best_epoch} "
          f"(val aIoU {result.best.best_val_aiou:.4f}); checkpoints in {out_dir}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    cfg = ckpt.config.replace(data_dir=args.data) if args.data else ckpt.config
    names = EVAL_SPLITS if args.split == "all" else (args.split,)
    splits = load_splits(cfg, names)
    rows = [evaluate(ckpt, splits[n], n) for n in names]
    _emit(format_table(rows), args.out)
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    _, rows = ablate(cfg, args.component)
    _emit(format_table(rows), args.out)
    return 0


def cmd_corrupt(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    cfg = ckpt.config.replace(data_dir=args.data) if args.data else ckpt.config
    samples = load_splits(cfg, (args.split,))[args.split]
    rows = corruption_experiment(ckpt, samples, args.rates, args.mode, args.seed)
    _emit(format_table(rows), args.out)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck_all

    t0 = time.perf_counter()
    report = gradcheck_all(tiny_config(), h=args.h, tol=args.tol, seed=args.seed, max_entries=args.max_entries)
    print(report.format())
    print(f"runtime {time.perf_counter() - t0:.1f}s")
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="affordground", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
        return p

    p = with_config(sub.add_parser("gen-data", help="generate the synthetic splits"))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--classes", type=int, default=14)
    p.add_argument("--samples-per-pair", type=int, default=6)
    p.add_argument("--points", type=int, help="points per cloud (defaults to the config's)")
    p.set_defaults(func=cmd_gen_data)

    p = with_config(sub.add_parser("train", help="train and keep the best-validation checkpoint"))
    p.add_argument("--out", help="run directory (defaults to out_dir)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics of a checkpoint on one split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="all", choices=EVAL_SPLITS + ("val", "all"))
    p.add_argument("--data", help="dataset directory (defaults to the checkpoint's)")
    p.add_argument("--out", help="also write the CSV table here")
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("ablate", help="train with one component removed and evaluate"))
    p.add_argument("--component", required=True, type=str.upper, choices=ABLATION_COMPONENTS)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("corrupt", help="evaluate under corrupted instructions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", default="affordance", choices=CORRUPTION_MODES)
    p.add_argument("--rates", type=float, nargs="+", default=list(CORRUPTION_RATES))
    p.add_argument("--split", default="open", choices=EVAL_SPLITS)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and module at tiny dims")
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-entries", type=int, default=6)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, FileNotFoundError, VocabularyMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
