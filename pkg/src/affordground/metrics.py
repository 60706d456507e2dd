"""Evaluation measures for per-point saliency masks: aIoU, AUC, SIM and MAE."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = np.round(np.arange(1, 100) * 0.01, 2)


class UndefinedMetric(ValueError):
    """The metric is undefined for this sample (e.g. ground truth has one class)."""


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"pred and gt lengths differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def iou_at(pred, gt, threshold: float) -> float:
    pred, gt = _pair(pred, gt)
    g = gt > 0
    if not g.any():
        raise UndefinedMetric("IoU undefined: no ground-truth positives")
    p = pred > threshold
    tp = np.count_nonzero(p & g)
    fp = np.count_nonzero(p & ~g)
    fn = np.count_nonzero(~p & g)
    return tp / (tp + fp + fn)


def aiou(pred, gt, thresholds=DEFAULT_THRESHOLDS) -> float:
    """Mean IoU over binarization thresholds of the prediction (GT binarized at > 0)."""
    pred, gt = _pair(pred, gt)
    g = gt > 0
    if not g.any():
        raise UndefinedMetric("aIoU undefined: no ground-truth positives")
    t = np.atleast_1d(np.asarray(thresholds, dtype=np.float64))
    p = pred[None, :] > t[:, None]
    tp = (p & g).sum(axis=1)
    union = (p | g).sum(axis=1)
    return float(np.mean(tp / union))


def auc(pred, gt) -> float:
    """Mann-Whitney AUC with ties credited one half (GT binarized at > 0)."""
    pred, gt = _pair(pred, gt)
    g = gt > 0
    n_pos, n_neg = int(g.sum()), int((~g).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC undefined: ground truth has a single class")
    ranks = rankdata(pred)
    return float((ranks[g].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def sim(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    sp, sg = pred.sum(), gt.sum()
    if sp <= 0 or sg <= 0:
        raise UndefinedMetric("SIM undefined: a map sums to zero")
    return float(np.minimum(pred / sp, gt / sg).sum())


def mae(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


METRICS: dict[str, Callable] = {"aIoU": aiou, "AUC": auc, "SIM": sim, "MAE": mae}
COLUMNS = ("aIoU", "AUC", "SIM", "MAE")


@dataclass
class SplitResult:
    split: str
    n: int
    means: dict[str, float]
    skipped: dict[str, int] = field(default_factory=dict)    # per metric
    skipped_samples: int = 0                                   # samples missing at least one metric

    def row(self) -> list:
        return [self.split, self.n] + [self.means[c] for c in COLUMNS] + [self.skipped_samples]


def aggregate(pairs: Iterable[tuple[np.ndarray, np.ndarray]], split: str = "", warn: bool = True) -> SplitResult:
    """Average each metric over the samples where it is defined."""
    values: dict[str, list[float]] = {c: [] for c in COLUMNS}
    skipped = {c: 0 for c in COLUMNS}
    reasons: dict[int, list[str]] = {}
    n = 0
    for pred, gt in pairs:
        n += 1
        for name in COLUMNS:
            try:
                values[name].append(METRICS[name](pred, gt))
            except UndefinedMetric:
                skipped[name] += 1
                reasons.setdefault(n - 1, []).append(name)
    if n == 0:
        raise ValueError("cannot evaluate an empty split")
    if reasons and warn:
        detail = ", ".join(f"{i} ({'/'.join(r)})" for i, r in reasons.items())
        log.warning("%s: %d sample(s) skipped for undefined metrics: %s", split or "split", len(reasons), detail)
    means = {c: float(np.mean(v)) if v else float("nan") for c, v in values.items()}
    return SplitResult(split, n, means, skipped, len(reasons))


def evaluate_split(samples, predict: Callable, split: str = "", warn: bool = True) -> SplitResult:
    """``predict(sample) -> mask``; ``sample.gt_mask`` holds the probabilistic ground truth."""
    samples = list(samples)
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    return aggregate(((predict(s), s.gt_mask) for s in samples), split, warn)


HEADER = "split,n,aIoU,AUC,SIM,MAE,skipped"


def format_table(results: Iterable[SplitResult]) -> str:
    lines = [HEADER]
    for r in results:
        m = r.means
        lines.append(f"{r.split},{r.n},{m['aIoU'] * 100:.2f},{m['AUC'] * 100:.2f},"
                     f"{m['SIM']:.3f},{m['MAE']:.3f},{r.skipped_samples}")
    return "\n".join(lines) + "\n"
