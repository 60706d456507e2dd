"""End-to-end forward pass wiring text encoder, backbone, relational and
cross-modal attention, decoding, scale selection and the mask head."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import FeaturePropagation, PointBackbone, feature_propagation
from .config import RunConfig
from .data import SEEN_AFFORDANCES, AffordanceSample
from .decoder import MaskHead, MssmParams, channel_modulate, mssm_select, patch_modulate, predict_mask
from .fusion import CmfmParams, IormParams, cmfm_fuse, iorm_enhance
from .losses import LossConfig, MaskLoss, align_loss, binarize, mask_loss, proto_loss, total_loss
from .nn import Module
from .prototypes import PrototypeSet, prototype_similarity, region_embed
from .tensor import ShapeError, Tensor
from .text import TextEncoder, Vocabulary, extract_part_embedding, tokenize


@dataclass
class ForwardOutput:
    mask: Tensor                       # 1 x N
    fused: Tensor | None = None        # C x N
    part_embedding: Tensor | None = None
    region_embedding: Tensor | None = None
    shapes: dict[str, tuple] = field(default_factory=dict)


@dataclass
class SampleLoss:
    total: Tensor
    mask: MaskLoss
    align: Tensor | None
    proto: Tensor | None

    def components(self) -> dict[str, float]:
        return {
            "L_mask": self.mask.total.item(), "L_focal": self.mask.focal.item(), "L_dice": self.mask.dice.item(),
            "L_align": self.align.item() if self.align is not None else 0.0,
            "L_proto": self.proto.item() if self.proto is not None else 0.0,
            "L_total": self.total.item(),
        }


class AffordanceModel(Module):
    def __init__(self, config: RunConfig, vocab: Vocabulary, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        C = config.channels
        self.config = config
        self.vocab = vocab
        self.text = TextEncoder(rng, len(vocab), C, config.max_len, config.heads)
        self.backbone = PointBackbone(rng, C, config.n_small, config.n_large, config.k_group)
        self.iorm_large = IormParams(rng, C, config.k_large)
        self.iorm_small = IormParams(rng, C, config.k_small)
        self.cmfm_large = CmfmParams(rng, C, config.heads)
        self.cmfm_small = CmfmParams(rng, C, config.heads)
        self.fp_large = FeaturePropagation(rng, C, 3, C)
        self.fp_small = FeaturePropagation(rng, C, 3, C)
        self.mssm = MssmParams(rng, C)
        self.head = MaskHead(rng, C)
        self.prototypes = PrototypeSet(C, config.seed, range(len(SEEN_AFFORDANCES))) if config.apa else None

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for key in ("text", "backbone", "iorm_large", "iorm_small", "cmfm_large", "cmfm_small",
                    "fp_large", "fp_small", "mssm", "head"):
            if key.startswith("iorm") and not self.config.iorm:
                continue
            out.update(getattr(self, key).named_parameters(f"{prefix}{key}."))
        if self.prototypes is not None:
            out.update(self.prototypes.named_parameters(f"{prefix}prototypes."))
        return out

    # ------------------------------------------------------------------

    def token_ids(self, sample: AffordanceSample) -> np.ndarray:
        text = sample.instruction.structured if self.config.pig else sample.instruction.raw
        ids, _ = tokenize(text, self.vocab, self.config.max_len)
        return ids

    def _decode_scale(self, region, text_feats, coords, iorm, cmfm, fp, shapes, tag):
        feats = region.features
        enhanced = iorm_enhance(feats, iorm) if self.config.iorm else feats
        query = enhanced if self.config.cmfm_on_enhanced else feats
        m_p, m_t = cmfm_fuse(query, text_feats.feats, text_feats.pad_mask, cmfm)
        g = patch_modulate(enhanced, m_p)
        g = feature_propagation((region.centers, g), coords, Tensor(coords.T), fp)
        g = channel_modulate(g, m_t, text_feats.pad_mask)
        shapes.update({f"F_P_{tag}": feats.shape, f"F_P_tilde_{tag}": enhanced.shape,
                       f"M_P_{tag}": m_p.shape, f"M_T_{tag}": m_t.shape, f"G_hat_{tag}": g.shape})
        return g

    def forward(self, sample: AffordanceSample, mode: str = "infer") -> ForwardOutput:
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        cfg = self.config
        coords = np.asarray(sample.coords, dtype=np.float64)
        if coords.shape != (cfg.n_points, 3):
            raise ShapeError(f"input: cloud shape {coords.shape}, expected ({cfg.n_points}, 3)")
        shapes = {"P": coords.shape}
        text_feats = self.text(self.token_ids(sample))
        shapes["F_T"] = text_feats.feats.shape
        large, small = self.backbone(coords)
        g_l = self._decode_scale(large, text_feats, coords, self.iorm_large, self.cmfm_large, self.fp_large,
                                 shapes, "l")
        g_s = self._decode_scale(small, text_feats, coords, self.iorm_small, self.cmfm_small, self.fp_small,
                                 shapes, "s")
        fused = mssm_select(g_l, g_s, self.mssm)
        mask = predict_mask(fused, self.head)
        shapes.update(F_fuse=fused.shape, mask=mask.shape)
        if mode == "infer":
            return ForwardOutput(mask, shapes=shapes)
        part = None
        if cfg.pig:
            part = extract_part_embedding(text_feats, sample.instruction.part_index)
            shapes["T_i"] = (part.shape[0],)
        z = region_embed(fused, mask) if self.prototypes is not None else None
        return ForwardOutput(mask, fused, part, z, shapes)

    def predict(self, sample: AffordanceSample) -> np.ndarray:
        with T.no_grad():
            return self.forward(sample, "infer").mask.data.reshape(-1).copy()

    # ------------------------------------------------------------------

    def sample_loss(self, sample: AffordanceSample, loss_cfg: LossConfig | None = None) -> SampleLoss:
        cfg = loss_cfg or self.config.loss_config()
        out = self.forward(sample, "train")
        y = binarize(sample.gt_mask)
        m = mask_loss(out.mask, y, cfg)
        align = proto = None
        if self.config.psga and out.part_embedding is not None:
            g_gt = region_embed(out.fused, sample.gt_mask)
            align = align_loss(out.part_embedding, g_gt)
        if self.prototypes is not None:
            row = self.prototypes.ensure(sample.instruction.affordance_id, training=True)
            sims = prototype_similarity(out.region_embedding, self.prototypes)
            proto = proto_loss(sims, row, cfg.tau)
        return SampleLoss(total_loss(m.total, align, proto, cfg), m, align, proto)

    def batch_loss(self, samples) -> Tensor:
        losses = [self.sample_loss(s).total for s in samples]
        out = losses[0]
        for l in losses[1:]:
            out = T.add(out, l)
        return T.scale(out, 1.0 / len(losses))

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))
