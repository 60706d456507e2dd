"""Semantic modulation, gated two-scale fusion and the per-point mask head."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import DomainError, ShapeError, Tensor


def patch_modulate(enhanced: Tensor, m_p: Tensor) -> Tensor:
    """Region-wise gate: enhanced * sigmoid(M_P)."""
    if enhanced.shape != m_p.shape:
        raise ShapeError(f"patch_modulate: {enhanced.shape} vs {m_p.shape}")
    return T.mul(enhanced, T.sigmoid(m_p))


def channel_gate(m_t: Tensor, pad_mask) -> Tensor:
    """sigmoid of the mean over non-PAD token columns, as a C x 1 tensor."""
    valid = np.flatnonzero(~np.asarray(pad_mask, dtype=bool))
    if valid.size == 0:
        raise DomainError("channel_modulate: every token is PAD")
    cols = m_t if valid.size == m_t.shape[1] else T.take_cols(m_t, valid)
    return T.sigmoid(T.mean(cols, axis=1))


def channel_modulate(g: Tensor, m_t: Tensor, pad_mask) -> Tensor:
    if g.shape[0] != m_t.shape[0]:
        raise ShapeError(f"channel_modulate: {g.shape[0]} vs {m_t.shape[0]} channels")
    return T.mul(g, channel_gate(m_t, pad_mask))


class MssmParams(Module):
    """Gating MLP: pooled (2C) -> C -> 2 logits."""

    def __init__(self, rng: np.random.Generator, channels: int):
        self.hidden = Linear(rng, 2 * channels, channels, std=np.sqrt(2.0 / (2 * channels)))
        self.out = Linear(rng, channels, 2, std=1.0 / np.sqrt(channels))


def scale_weights(g_large: Tensor, g_small: Tensor, params: MssmParams) -> Tensor:
    """Softmax-normalized (alpha_large, alpha_small) as a 2 x 1 tensor."""
    pooled = T.concat([T.mean(g_large, axis=1), T.mean(g_small, axis=1)], axis=0)
    logits = params.out(T.relu(params.hidden(pooled)))
    return T.softmax(logits, axis=0)


def mssm_select(g_large: Tensor, g_small: Tensor, params: MssmParams, return_alpha: bool = False):
    if g_large.shape != g_small.shape:
        raise ShapeError(f"mssm: {g_large.shape} vs {g_small.shape}")
    alpha = scale_weights(g_large, g_small, params)
    a_l = T.slice_rows(alpha, 0, 1)
    a_s = T.slice_rows(alpha, 1, 2)
    fused = T.add(T.mul(g_large, a_l), T.mul(g_small, a_s))
    return (fused, alpha) if return_alpha else fused


class MaskHead(Module):
    """Per-point two-layer perceptron C -> C/2 -> 1; the last layer starts small."""

    def __init__(self, rng: np.random.Generator, channels: int, out_std: float = 1e-2):
        hidden = max(1, channels // 2)
        self.hidden = Linear(rng, channels, hidden, std=np.sqrt(2.0 / channels))
        self.out = Linear(rng, hidden, 1, std=out_std)


def mask_logits(fused: Tensor, head: MaskHead) -> Tensor:
    return head.out(T.relu(head.hidden(fused)))


def predict_mask(fused: Tensor, head: MaskHead) -> Tensor:
    """Per-point probabilities as a 1 x N tensor."""
    return T.sigmoid(mask_logits(fused, head))
