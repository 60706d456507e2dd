"""Training objectives: focal + symmetric Dice mask loss, part alignment,
prototype association and their weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DomainError, Tensor


@dataclass
class LossConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    eps: float = 1e-6
    tau: float = 0.07
    beta_align: float = 0.2
    beta_proto: float = 0.6

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("focal alpha must lie in (0, 1)")
        if self.gamma < 0 or self.tau <= 0 or self.beta_align < 0 or self.beta_proto < 0:
            raise ValueError("gamma, beta must be >= 0 and tau > 0")


def binarize(mask, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(mask, dtype=np.float64) > threshold).astype(np.float64)


def _as_row(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    return t if t.data.ndim == 2 else T.reshape(t, (1, t.data.size))


def focal_loss(p, y, cfg: LossConfig = LossConfig(), margin: float = 1e-12) -> Tensor:
    """Summed binary focal loss over points; ``y`` is a 0/1 array."""
    p = _as_row(p)
    y = np.asarray(y, dtype=np.float64).reshape(p.shape)
    if np.any(p.data < -margin) or np.any(p.data > 1 + margin):
        raise DomainError("focal_loss: probabilities outside [0, 1]")
    one_minus = T.sub(1.0, p)
    pos = T.mul(T.power(T.maximum(one_minus, 0.0), cfg.gamma), T.log(T.add(p, cfg.eps)))
    neg = T.mul(T.power(T.maximum(p, 0.0), cfg.gamma), T.log(T.add(one_minus, cfg.eps)))
    total = T.add(T.scale(T.sum(T.mul(pos, y)), -cfg.alpha),
                  T.scale(T.sum(T.mul(neg, 1.0 - y)), -(1.0 - cfg.alpha)))
    return T.reshape(total, ())


def dice_terms(p, y, eps: float = 1e-6) -> tuple[Tensor, Tensor]:
    p = _as_row(p)
    y = np.asarray(y, dtype=np.float64).reshape(p.shape)
    pos = T.div(T.add(T.sum(T.mul(p, y)), eps), T.add(T.sum(T.add(T.abs(p), np.abs(y))), eps))
    q = T.sub(1.0, p)
    neg = T.div(T.add(T.sum(T.mul(q, 1.0 - y)), eps),
                T.add(T.sum(T.sub(T.sub(2.0, T.abs(p)), np.abs(y))), eps))
    return T.reshape(pos, ()), T.reshape(neg, ())


def symmetric_dice_loss(p, y, eps: float = 1e-6) -> Tensor:
    """1.5 - Dice_pos - Dice_neg for a single mask channel; floor 0.5 when both classes occur."""
    pos, neg = dice_terms(p, y, eps)
    return T.sub(T.sub(1.5, pos), neg)


@dataclass
class MaskLoss:
    focal: Tensor
    dice: Tensor

    @property
    def total(self) -> Tensor:
        return T.add(self.focal, self.dice)


def mask_loss(p, y, cfg: LossConfig = LossConfig()) -> MaskLoss:
    return MaskLoss(focal_loss(p, y, cfg), symmetric_dice_loss(p, y, cfg.eps))


def align_loss(part_embedding: Tensor, region_embedding: Tensor) -> Tensor:
    """1 - cosine(T_i, G_gt), in [0, 2]."""
    return T.reshape(T.sub(1.0, T.cosine(part_embedding, region_embedding)), ())


def proto_loss(similarities: Tensor, target_row: int, tau: float) -> Tensor:
    """Cross-entropy of softmax(s / tau) against ``target_row``."""
    K = similarities.data.size
    if not 0 <= target_row < K:
        raise IndexError(f"target row {target_row} outside {K} prototypes")
    if tau <= 0:
        raise ValueError("tau must be positive")
    s = T.reshape(similarities, (K,))
    probs = T.softmax(T.scale(s, 1.0 / tau), axis=0)
    picked = T.reshape(T.take_rows(probs, [target_row]), ())
    return T.scale(T.log(picked), -1.0)


def total_loss(mask: Tensor, align: Tensor | None, proto: Tensor | None, cfg: LossConfig = LossConfig()) -> Tensor:
    out = mask
    if align is not None and cfg.beta_align:
        out = T.add(out, T.scale(align, cfg.beta_align))
    if proto is not None and cfg.beta_proto:
        out = T.add(out, T.scale(proto, cfg.beta_proto))
    return out
