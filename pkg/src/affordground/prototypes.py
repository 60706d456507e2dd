"""Masked region pooling and the growing affordance prototype set."""

from __future__ import annotations

import logging

import numpy as np

from . import tensor as T
from .tensor import DomainError, Tensor

log = logging.getLogger(__name__)

POOL_EPS = 1e-6


def region_embed(fused: Tensor, weights, eps: float = POOL_EPS) -> Tensor:
    """Weighted mean of the point features: (F w) / (sum w + eps), as C x 1.

    ``weights`` may be a 1 x N tensor (gradient attached) or a plain array.
    """
    w = weights if isinstance(weights, Tensor) else Tensor(np.asarray(weights, dtype=np.float64).reshape(1, -1))
    if w.shape != (1, fused.shape[1]):
        w = T.reshape(w, (1, fused.shape[1]))
    total = T.sum(w)
    if total.item() < 1e-4:
        log.warning("region_embed: total mask weight %.3g is near zero", total.item())
    num = T.matmul(fused, T.transpose(w))
    return T.div(num, T.add(total, eps))


class PrototypeSet:
    """K x C learnable prototypes plus an injective affordance-id -> row map."""

    def __init__(self, channels: int, seed: int = 0, initial_ids=()):
        self.channels = channels
        self.seed = seed
        self.rows: dict[int, int] = {}
        self.weight = Tensor(np.zeros((0, channels)), requires_grad=True)
        for aff in initial_ids:
            self.ensure(aff, training=True)

    @property
    def K(self) -> int:
        return self.weight.shape[0]

    def ensure(self, affordance_id: int, training: bool = True) -> int:
        """Row of ``affordance_id``, appending a fresh N(0, 1/sqrt(C)) row on first sight."""
        affordance_id = int(affordance_id)
        if affordance_id in self.rows:
            return self.rows[affordance_id]
        if not training:
            raise KeyError(f"affordance id {affordance_id} has no prototype and inference never extends the set")
        # per-id generator: a resumed run draws the same row as an uninterrupted one
        rng = np.random.default_rng([self.seed, affordance_id])
        row = rng.normal(0.0, 1.0 / np.sqrt(self.channels), size=(1, self.channels))
        self.weight.data = np.vstack([self.weight.data, row])
        self.rows[affordance_id] = self.K - 1
        return self.K - 1

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}weight": self.weight}


def ensure_prototype(protos: PrototypeSet, affordance_id: int, training: bool = True) -> int:
    return protos.ensure(affordance_id, training=training)


def prototype_similarity(z: Tensor, protos: PrototypeSet | Tensor) -> Tensor:
    """Cosine similarity of ``z`` (C x 1) to every prototype row: K x 1, clamped to [-1, 1]."""
    P = protos.weight if isinstance(protos, PrototypeSet) else protos
    z_norm = T.norm(z)
    if z_norm.item() == 0:
        raise DomainError("prototype_similarity: zero-norm region embedding")
    p_norms = T.sqrt(T.sum(T.mul(P, P), axis=1))
    dots = T.matmul(P, z)
    s = T.div(dots, T.mul(p_norms, z_norm))
    return T.minimum(T.maximum(s, -1.0), 1.0)
