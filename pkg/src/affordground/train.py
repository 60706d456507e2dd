"""Training loop, evaluation, ablations and corruption sweeps."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, capture, restore
from .config import RunConfig, ablated
from .data import AffordanceSample, DataConfig, corrupt_instructions, load_split, make_splits
from .metrics import SplitResult, evaluate_split
from .model import AffordanceModel
from .optim import Adam, cosine_lr
from .text import build_vocab

log = logging.getLogger(__name__)

EVAL_SPLITS = ("seen", "unseen", "open", "partial")


class TrainingDiverged(RuntimeError):
    pass


class VocabularyMismatch(ValueError):
    pass


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    history: list[dict] = field(default_factory=list)


def data_config(config: RunConfig) -> DataConfig:
    return DataConfig(n_points=config.n_points, samples_per_pair=config.samples_per_pair,
                      test_per_pair=config.test_per_pair, n_classes=config.n_classes)


def load_splits(config: RunConfig, names=("train", "val") + EVAL_SPLITS) -> dict[str, list[AffordanceSample]]:
    root = Path(config.data_dir)
    missing = [n for n in names if not (root / f"{n}.jsonl").exists()]
    if missing:
        raise FileNotFoundError(f"missing manifests in {root}: {missing} (run gen-data first)")
    return {n: load_split(root / f"{n}.jsonl") for n in names}


def training_vocab(train: list[AffordanceSample]):
    texts = [s.instruction.structured for s in train] + [s.instruction.raw for s in train]
    return build_vocab(texts)


def validation_aiou(model: AffordanceModel, samples) -> float:
    if not samples:
        return float("nan")
    # model-selection signal only; skip warnings would repeat every epoch
    return evaluate_split(samples, model.predict, "val", warn=False).means["aIoU"]


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(config: RunConfig, splits: dict | None = None, resume: Checkpoint | None = None,
          out_dir: str | Path | None = None, log_path: str | Path | None = None) -> TrainResult:
    """Adam + cosine schedule over ``config.epochs``; keeps the best-validation-aIoU state.

    ``resume`` continues from a saved state (parameters, moments, schedule
    position); the remaining trajectory matches an uninterrupted run.
    """
    splits = splits if splits is not None else load_splits(config, ("train", "val"))
    train_set, val_set = splits["train"], splits.get("val", [])
    if not train_set:
        raise ValueError("empty training split")
    max_len = (resume.config if resume is not None else config).max_len
    too_long = [s.sample_id for s in train_set if s.instruction.part_index >= max_len]
    if too_long:
        raise ValueError(f"max_len {max_len} truncates the focus slot of {len(too_long)} training "
                         f"instruction(s), e.g. {too_long[0]}")
    if resume is not None:
        model, opt = restore(resume)
        start, best_aiou, best_epoch = resume.epoch, resume.best_val_aiou, resume.best_epoch
        best = resume if resume.best_epoch == resume.epoch else None
        if best is None and out_dir and (Path(out_dir) / "best.ckpt").exists():
            best = Checkpoint.load(Path(out_dir) / "best.ckpt")
    else:
        model = AffordanceModel(config, training_vocab(train_set))
        opt = Adam(config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay)
        start, best_aiou, best_epoch, best = 0, float("-inf"), -1, None
    cfg = model.config
    n_batches = math.ceil(len(train_set) / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    history: list[dict] = []
    log_fh = open(log_path, "a") if log_path else None

    try:
        for epoch in range(start, cfg.epochs):
            order = epoch_order(cfg.seed, epoch, len(train_set))
            sums: dict[str, float] = {}
            for b in range(n_batches):
                batch = [train_set[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
                model.zero_grad()
                if model.prototypes is not None:
                    for s in batch:
                        model.prototypes.ensure(s.instruction.affordance_id, training=True)
                for s in batch:
                    sl = model.sample_loss(s)
                    comps = sl.components()
                    if not all(math.isfinite(v) for v in comps.values()):
                        raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}: "
                                               f"samples {[x.sample_id for x in batch]}, components {comps}")
                    T.backward(T.scale(sl.total, 1.0 / len(batch)))
                    for k, v in comps.items():
                        sums[k] = sums.get(k, 0.0) + v
                params = model.named_parameters()
                for name, p in params.items():
                    if p.grad is not None and not np.isfinite(p.grad).all():
                        raise TrainingDiverged(f"non-finite gradient in {name} at epoch {epoch}, batch {b}: "
                                               f"samples {[x.sample_id for x in batch]}")
                opt.step(params, cosine_lr(cfg.lr, opt.step_count, total_steps))
            record = {"epoch": epoch, **{k: v / len(train_set) for k, v in sums.items()}}
            record["val_aIoU"] = validation_aiou(model, val_set)
            record["lr"] = cosine_lr(cfg.lr, opt.step_count, total_steps)
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            log.info("epoch %d total %.4f val aIoU %.4f", epoch, record.get("L_total", float("nan")),
                     record["val_aIoU"])
            improved = not val_set or record["val_aIoU"] > best_aiou
            if improved:
                best_aiou, best_epoch = record["val_aIoU"], epoch + 1
            ckpt = capture(model, opt, epoch + 1, best_aiou, best_epoch)
            if improved:
                best = ckpt
            if out_dir:
                ckpt.save(Path(out_dir) / "last.ckpt")
                if improved:
                    ckpt.save(Path(out_dir) / "best.ckpt")
    finally:
        if log_fh:
            log_fh.close()

    final = capture(model, opt, max(start, cfg.epochs), best_aiou, best_epoch)
    if best is None:
        best = final
    if out_dir:
        final.save(Path(out_dir) / "last.ckpt")
        best.save(Path(out_dir) / "best.ckpt")
    return TrainResult(final, best, history)


def check_vocab(model: AffordanceModel, samples) -> None:
    for s in samples:
        if not 0 <= s.instruction.affordance_id < 17 or s.coords.shape[0] != model.config.n_points:
            raise VocabularyMismatch(f"sample {s.sample_id} does not match the checkpoint")


def evaluate(ckpt: Checkpoint | AffordanceModel, samples, split: str = "") -> SplitResult:
    """Inference-only metrics on one split; never touches parameters or prototypes."""
    model = ckpt if isinstance(ckpt, AffordanceModel) else restore(ckpt)[0]
    check_vocab(model, samples)
    return evaluate_split(samples, model.predict, split)


def evaluate_all(ckpt, splits: dict, names=EVAL_SPLITS) -> list[SplitResult]:
    model = ckpt if isinstance(ckpt, AffordanceModel) else restore(ckpt)[0]
    return [evaluate(model, splits[n], n) for n in names if n in splits]


def ablate(config: RunConfig, component: str, splits: dict | None = None,
           names=EVAL_SPLITS) -> tuple[TrainResult, list[SplitResult]]:
    cfg = ablated(config, component)
    splits = splits if splits is not None else load_splits(cfg)
    result = train(cfg, splits)
    return result, evaluate_all(result.best, splits, names)


CORRUPTION_RATES = (0.0, 0.1, 0.2)


def corruption_experiment(ckpt, samples, rates=CORRUPTION_RATES, mode: str = "affordance",
                          seed: int = 42) -> list[SplitResult]:
    model = ckpt if isinstance(ckpt, AffordanceModel) else restore(ckpt)[0]
    out = []
    for rate in rates:
        corrupted = corrupt_instructions(samples, rate, mode, seed)
        out.append(evaluate(model, corrupted, f"{mode}@{rate:g}"))
    return out


def untrained_baseline(config: RunConfig, splits: dict, split: str, n_models: int = 20,
                       seed0: int = 1000) -> np.ndarray:
    """aIoU of ``n_models`` randomly initialized models on ``split``."""
    vocab = training_vocab(splits["train"])
    vals = []
    for i in range(n_models):
        model = AffordanceModel(config.replace(seed=seed0 + i), vocab)
        vals.append(evaluate(model, splits[split], split).means["aIoU"])
    return np.array(vals)


def generate_data(config: RunConfig, seed: int | None = None, out_dir: str | Path | None = None) -> dict:
    from .data import save_splits

    splits = make_splits(data_config(config), seed=config.seed if seed is None else seed)
    if out_dir is not None:
        save_splits(splits, out_dir)
    return splits
