"""Region-to-region relational attention (top-k) and cross-modal attention."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Module, param
from .tensor import DomainError, ShapeError, Tensor


class IormParams(Module):
    """Query/key/value projections for top-k intra-object attention."""

    def __init__(self, rng: np.random.Generator, channels: int, k: int):
        std = 1.0 / np.sqrt(channels)
        self.w_q = param(rng, (channels, channels), std)
        self.w_k = param(rng, (channels, channels), std)
        self.w_v = param(rng, (channels, channels), std)
        self.k = k


def topk_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask selecting the k largest entries per row; ties go to the lowest column."""
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    mask = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    T.record_branch(mask)
    return mask


def iorm_enhance(feats: Tensor, params: IormParams) -> Tensor:
    """Each region aggregates values of its k most similar regions (self included).

    The selection is computed from the forward scores and held constant
    during backward; gradients flow only through the selected entries.
    """
    C, M = feats.shape
    if params.k > M or params.k < 1:
        raise ValueError(f"iorm: k={params.k} not in [1, {M}]")
    q = T.matmul(params.w_q, feats)
    k = T.matmul(params.w_k, feats)
    v = T.matmul(params.w_v, feats)
    scores = T.scale(T.matmul(T.transpose(q), k), 1.0 / np.sqrt(C))   # M x M, row i = query i
    keep = topk_mask(scores.data, params.k)
    attn = T.softmax(scores, axis=1, mask=keep)
    return T.matmul(v, T.transpose(attn))


class AttentionParams(Module):
    """Multi-head attention projections; head h owns rows h*d:(h+1)*d."""

    def __init__(self, rng: np.random.Generator, channels: int, heads: int):
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        std = 1.0 / np.sqrt(channels)
        self.w_q = param(rng, (channels, channels), std)
        self.w_k = param(rng, (channels, channels), std)
        self.w_v = param(rng, (channels, channels), std)
        self.w_o = param(rng, (channels, channels), std)
        self.heads = heads


def attention_weights(q: Tensor, k: Tensor, key_mask=None) -> Tensor:
    """Softmax over keys of q^T k / sqrt(d): returns [n_q x n_k]."""
    d = q.shape[0]
    logits = T.scale(T.matmul(T.transpose(q), k), 1.0 / np.sqrt(d))
    mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[None, :]
    return T.softmax(logits, axis=1, mask=mask)


def multi_head_cross_attn(query: Tensor, key: Tensor, value: Tensor, params: AttentionParams,
                          key_mask=None) -> Tensor:
    """Scaled dot-product multi-head attention over channel-first inputs.

    ``key_mask`` marks usable key columns (True); masked keys get zero weight.
    """
    C = query.shape[0]
    if key.shape[0] != C or value.shape[0] != C or key.shape[1] != value.shape[1]:
        raise ShapeError(f"attention: query {query.shape}, key {key.shape}, value {value.shape}")
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (key.shape[1],):
            raise ShapeError(f"attention: key mask length {key_mask.shape} for {key.shape[1]} keys")
        if not key_mask.any():
            raise DomainError("attention: every key is masked")
    q = T.matmul(params.w_q, query)
    k = T.matmul(params.w_k, key)
    v = T.matmul(params.w_v, value)
    d = C // params.heads
    outs = []
    for h in range(params.heads):
        lo, hi = h * d, (h + 1) * d
        qh, kh, vh = (T.slice_rows(t, lo, hi) if params.heads > 1 else t for t in (q, k, v))
        attn = attention_weights(qh, kh, key_mask)
        outs.append(T.matmul(vh, T.transpose(attn)))
    merged = outs[0] if len(outs) == 1 else T.concat(outs, axis=0)
    return T.matmul(params.w_o, merged)


class CmfmParams(Module):
    """Two cascaded attention blocks for one scale."""

    def __init__(self, rng: np.random.Generator, channels: int, heads: int):
        self.text_to_point = AttentionParams(rng, channels, heads)
        self.point_to_text = AttentionParams(rng, channels, heads)


def cmfm_fuse(point_feats: Tensor, text_feats: Tensor, pad_mask, params: CmfmParams) -> tuple[Tensor, Tensor]:
    """Stage 1: regions attend to tokens. Stage 2: tokens attend to the stage-1 output.

    ``pad_mask`` is True at PAD positions. Returns ``(M_P [C x M], M_T [C x L])``.
    """
    valid = ~np.asarray(pad_mask, dtype=bool)
    m_p = multi_head_cross_attn(point_feats, text_feats, text_feats, params.text_to_point, key_mask=valid)
    m_t = multi_head_cross_attn(text_feats, m_p, m_p, params.point_to_text)
    return m_p, m_t
