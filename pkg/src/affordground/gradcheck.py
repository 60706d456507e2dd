"""Finite-difference verification of every differentiable op, each pipeline
module, and the end-to-end training loss at tiny dimensions."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import FeaturePropagation, PointBackbone, feature_propagation
from .config import RunConfig, tiny_config
from .data import AffordanceVocab, make_sample
from .decoder import MaskHead, MssmParams, channel_modulate, mssm_select, patch_modulate, predict_mask
from .fusion import CmfmParams, IormParams, cmfm_fuse, iorm_enhance
from .losses import LossConfig, align_loss, binarize, mask_loss, proto_loss, total_loss
from .prototypes import PrototypeSet, prototype_similarity, region_embed
from .tensor import Tensor
from .text import TextEncoder, build_vocab, extract_part_embedding

H = 1e-4
TOL = 1e-3


@dataclass
class CheckEntry:
    name: str
    kind: str                      # "op", "module" or "end-to-end"
    max_rel_err: dict[str, float]
    passed: bool
    seconds: float
    failed: list = field(default_factory=list, repr=False)
    one_sided: int = 0
    unresolved: list = field(default_factory=list, repr=False)

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)


@dataclass
class GradcheckReport:
    entries: list[CheckEntry]

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def failing(self) -> list[str]:
        return [e.name for e in self.entries if not e.passed]

    def format(self) -> str:
        lines = [f"{'check':<28} {'kind':<10} {'max_rel_err':>12} {'one-sided':>9}  result"]
        for e in self.entries:
            lines.append(f"{e.name:<28} {e.kind:<10} {e.worst:>12.3e} {e.one_sided:>9d}  "
                         f"{'pass' if e.passed else 'FAIL'}")
        lines.append(f"overall: {'pass' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def _leaf(rng, shape, low=None, high=None):
    data = rng.normal(size=shape) if low is None else rng.uniform(low, high, size=shape)
    return Tensor(data, requires_grad=True)


def _away_from_zero(rng, shape, gap=0.2):
    x = rng.uniform(gap, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(x, requires_grad=True)


# ---------------------------------------------------------------------------
# per-op cases: name -> builder(rng) -> (loss fn, params)
# ---------------------------------------------------------------------------

def _op_cases() -> dict[str, Callable]:
    cases = {}

    def case(name):
        def deco(fn):
            cases[name] = fn
            return fn
        return deco

    def unary(op, make_input):
        def build(rng):
            x = make_input(rng)
            with T.no_grad():
                w = Tensor(rng.normal(size=op(x).shape))
            return (lambda: T.sum(T.mul(op(x), w))), {"x": x}
        return build

    def binary(op, shape_b=(3, 4), make=None):
        def build(rng):
            a = (make or _leaf)(rng, (3, 4))
            b = (make or _leaf)(rng, shape_b)
            w = Tensor(rng.normal(size=(3, 4)))
            return (lambda: T.sum(T.mul(op(a, b), w))), {"a": a, "b": b}
        return build

    @case("matmul")
    def _(rng):
        a, b = _leaf(rng, (3, 5)), _leaf(rng, (5, 2))
        w = Tensor(rng.normal(size=(3, 2)))
        return (lambda: T.sum(T.mul(T.matmul(a, b), w))), {"a": a, "b": b}

    cases["transpose"] = unary(T.transpose, lambda r: _leaf(r, (3, 4)))
    cases["reshape"] = unary(lambda x: T.reshape(x, (2, 6)), lambda r: _leaf(r, (3, 4)))
    cases["take_cols"] = unary(lambda x: T.take_cols(x, [2, 0, 2]), lambda r: _leaf(r, (3, 4)))
    cases["take_rows"] = unary(lambda x: T.take_rows(x, [1, 1, 0]), lambda r: _leaf(r, (3, 4)))
    cases["slice_rows"] = unary(lambda x: T.slice_rows(x, 1, 3), lambda r: _leaf(r, (3, 4)))

    @case("concat")
    def _(rng):
        a, b = _leaf(rng, (2, 4)), _leaf(rng, (3, 4))
        w = Tensor(rng.normal(size=(5, 4)))
        return (lambda: T.sum(T.mul(T.concat([a, b], axis=0), w))), {"a": a, "b": b}

    cases["group_max"] = unary(lambda x: T.group_max(x, 3),
                               lambda r: Tensor(r.permutation(24).reshape(4, 6) * 0.1, requires_grad=True))
    cases["sum"] = unary(lambda x: T.sum(x, axis=1), lambda r: _leaf(r, (3, 4)))
    cases["mean"] = unary(lambda x: T.mean(x, axis=0), lambda r: _leaf(r, (3, 4)))
    cases["softmax"] = unary(lambda x: T.softmax(x, axis=1), lambda r: _leaf(r, (3, 4)))
    cases["softmax_masked"] = unary(
        lambda x: T.softmax(x, axis=1, mask=np.array([[True, False, True, True]] * 3)), lambda r: _leaf(r, (3, 4)))
    cases["add"] = binary(T.add)
    cases["add_row_broadcast"] = binary(T.add, (3, 1))
    cases["add_col_broadcast"] = binary(T.add, (1, 4))
    cases["sub"] = binary(T.sub)
    cases["mul"] = binary(T.mul)
    cases["mul_row_broadcast"] = binary(T.mul, (3, 1))
    cases["div"] = binary(T.div, make=lambda r, s: _leaf(r, s, 0.5, 2.0))

    # min/max operands stay at least 0.2 apart so no tie sits inside the stencil
    @case("min")
    def _(rng):
        a = _leaf(rng, (3, 4))
        b = Tensor(a.data + _away_from_zero(rng, (3, 4)).data, requires_grad=True)
        w = Tensor(rng.normal(size=(3, 4)))
        return (lambda: T.sum(T.mul(T.minimum(a, b), w))), {"a": a, "b": b}

    @case("max")
    def _(rng):
        a = _leaf(rng, (3, 4))
        b = Tensor(a.data + _away_from_zero(rng, (3, 4)).data, requires_grad=True)
        w = Tensor(rng.normal(size=(3, 4)))
        return (lambda: T.sum(T.mul(T.maximum(a, b), w))), {"a": a, "b": b}

    cases["scale"] = unary(lambda x: T.scale(x, -2.5), lambda r: _leaf(r, (3, 4)))
    cases["sigmoid"] = unary(T.sigmoid, lambda r: _leaf(r, (3, 4)))
    cases["relu"] = unary(T.relu, lambda r: _away_from_zero(r, (3, 4)))
    cases["log"] = unary(T.log, lambda r: _leaf(r, (3, 4), 0.3, 3.0))
    cases["exp"] = unary(T.exp, lambda r: _leaf(r, (3, 4)))
    cases["abs"] = unary(T.abs, lambda r: _away_from_zero(r, (3, 4)))
    cases["sqrt"] = unary(T.sqrt, lambda r: _leaf(r, (3, 4), 0.3, 3.0))
    cases["power"] = unary(lambda x: T.power(x, 2.5), lambda r: _leaf(r, (3, 4), 0.3, 3.0))
    cases["norm"] = unary(T.norm, lambda r: _leaf(r, (3, 4)))

    @case("cosine")
    def _(rng):
        a, b = _leaf(rng, (5, 1)), _leaf(rng, (5, 1))
        return (lambda: T.cosine(a, b)), {"a": a, "b": b}

    return cases


# ---------------------------------------------------------------------------
# per-module cases at tiny dims
# ---------------------------------------------------------------------------

def _tiny_sample(cfg: RunConfig, seed: int, obj: str = "mug", aff: str = "grasp"):
    sample = make_sample(AffordanceVocab(), obj, aff, seed, cfg.n_points, 0.15, sample_id=f"gc-{seed}")
    # the full template overruns L = 8; keep the focus word inside the window
    ins = sample.instruction
    short = f"{obj} for {aff} focus {ins.part_word}."
    sample.instruction = replace(ins, structured=short, part_index=4)
    return sample


def _vocab_for(samples):
    return build_vocab([s.instruction.structured for s in samples] + [s.instruction.raw for s in samples])


def _module_cases(cfg: RunConfig) -> dict[str, Callable]:
    C, heads = cfg.channels, cfg.heads

    def text_encoder(rng):
        sample = _tiny_sample(cfg, 1)
        vocab = _vocab_for([sample])
        enc = TextEncoder(rng, len(vocab), C, cfg.max_len, heads)
        ids = np.zeros(cfg.max_len, dtype=np.int64)
        words = [vocab.lookup(w) for w in ("a", "mug", "grasp", "handle")]
        ids[: len(words)] = words
        w = Tensor(rng.normal(size=(C, cfg.max_len)))

        def loss():
            tf = enc(ids)
            part = extract_part_embedding(tf, 3)
            return T.add(T.sum(T.mul(tf.feats, w)), T.sum(part))

        return loss, enc.named_parameters("text.")

    def point_backbone(rng):
        coords = _tiny_sample(cfg, 2).coords
        bb = PointBackbone(rng, C, cfg.n_small, cfg.n_large, cfg.k_group)
        fp = FeaturePropagation(rng, C, 3, C)
        w_l, w_s = Tensor(rng.normal(size=(C, cfg.n_large))), Tensor(rng.normal(size=(C, cfg.n_small)))
        w_f = Tensor(rng.normal(size=(C, cfg.n_points)))

        def loss():
            large, small = bb(coords)
            up = feature_propagation(large, coords, Tensor(coords.T), fp)
            return T.add(T.add(T.sum(T.mul(large.features, w_l)), T.sum(T.mul(small.features, w_s))),
                         T.sum(T.mul(up, w_f)))

        params = bb.named_parameters("backbone.")
        params.update(fp.named_parameters("fp."))
        return loss, params

    def relational_fusion(rng):
        m = cfg.n_small
        feats = _leaf(rng, (C, m))
        text = _leaf(rng, (C, cfg.max_len))
        pad = np.zeros(cfg.max_len, dtype=bool)
        pad[cfg.max_len // 2:] = True
        iorm = IormParams(rng, C, cfg.k_small)
        cmfm = CmfmParams(rng, C, heads)
        w_p, w_t = Tensor(rng.normal(size=(C, m))), Tensor(rng.normal(size=(C, cfg.max_len)))

        def loss():
            enhanced = iorm_enhance(feats, iorm)
            m_p, m_t = cmfm_fuse(enhanced, text, pad, cmfm)
            return T.add(T.sum(T.mul(m_p, w_p)), T.sum(T.mul(m_t, w_t)))

        params = {"feats": feats, "text": text}
        params.update(iorm.named_parameters("iorm."))
        params.update(cmfm.named_parameters("cmfm."))
        return loss, params

    def decoder_mssm(rng):
        coords = _tiny_sample(cfg, 3).coords
        centers = coords[: cfg.n_large]
        enhanced_l, enhanced_s = _leaf(rng, (C, cfg.n_large)), _leaf(rng, (C, cfg.n_small))
        m_p_l, m_p_s = _leaf(rng, (C, cfg.n_large)), _leaf(rng, (C, cfg.n_small))
        m_t = _leaf(rng, (C, cfg.max_len))
        pad = np.zeros(cfg.max_len, dtype=bool)
        pad[-2:] = True
        fp_l, fp_s = FeaturePropagation(rng, C, 3, C), FeaturePropagation(rng, C, 3, C)
        mssm, head = MssmParams(rng, C), MaskHead(rng, C, out_std=0.5)
        skip = Tensor(coords.T)
        w = Tensor(rng.normal(size=(1, cfg.n_points)))

        def decode(enh, m_p, centres, fp):
            g = patch_modulate(enh, m_p)
            g = feature_propagation((centres, g), coords, skip, fp)
            return channel_modulate(g, m_t, pad)

        def loss():
            g_l = decode(enhanced_l, m_p_l, centers, fp_l)
            g_s = decode(enhanced_s, m_p_s, coords[: cfg.n_small], fp_s)
            return T.sum(T.mul(predict_mask(mssm_select(g_l, g_s, mssm), head), w))

        params = {"enh_l": enhanced_l, "enh_s": enhanced_s, "m_p_l": m_p_l, "m_p_s": m_p_s, "m_t": m_t}
        for tag, mod in (("fp_l.", fp_l), ("fp_s.", fp_s), ("mssm.", mssm), ("head.", head)):
            params.update(mod.named_parameters(tag))
        return loss, params

    def apa_prototypes(rng):
        fused = _leaf(rng, (C, cfg.n_points))
        logits = _leaf(rng, (1, cfg.n_points))
        protos = PrototypeSet(C, seed=int(rng.integers(1 << 30)), initial_ids=range(5))
        w = Tensor(rng.normal(size=(protos.K, 1)))

        def loss():
            z = region_embed(fused, T.sigmoid(logits))
            return T.sum(T.mul(prototype_similarity(z, protos), w))

        return loss, {"fused": fused, "mask_logits": logits, "prototypes": protos.weight}

    def objectives(rng):
        n = cfg.n_points
        logits = _leaf(rng, (1, n))
        y = binarize(rng.uniform(size=n))
        part, region = _leaf(rng, (C, 1)), _leaf(rng, (C, 1))
        sims_in = _leaf(rng, (6, 1))
        lcfg = LossConfig()

        def loss():
            m = mask_loss(T.sigmoid(logits), y, lcfg)
            align = align_loss(part, region)
            proto = proto_loss(T.scale(T.sigmoid(sims_in), 2.0), 2, lcfg.tau)
            return total_loss(m.total, align, proto, lcfg)

        return loss, {"logits": logits, "part": part, "region": region, "sims": sims_in}

    return {
        "text-encoder": text_encoder,
        "point-backbone": point_backbone,
        "relational-fusion": relational_fusion,
        "decoder-mssm": decoder_mssm,
        "apa-prototypes": apa_prototypes,
        "objectives": objectives,
    }


def _end_to_end(cfg: RunConfig):
    from .model import AffordanceModel

    samples = [_tiny_sample(cfg, 11, "mug", "grasp"), _tiny_sample(cfg, 12, "bag", "open")]
    model = AffordanceModel(cfg, _vocab_for(samples))
    # the stock head init is near zero; widen it so the mask path is exercised away from p = 0.5
    model.head.out.weight.data *= 30.0
    for s in samples:
        model.prototypes.ensure(s.instruction.affordance_id)
    return (lambda: model.batch_loss(samples)), model.named_parameters()


# ---------------------------------------------------------------------------

def _move_off_kinks(params: dict, rng, std: float = 0.05) -> None:
    # zero biases put every region centre exactly on a ReLU kink; checks run at a generic point
    for p in params.values():
        p.data = p.data + rng.normal(0.0, std, size=p.data.shape)


def _run(name, kind, build, rng, max_entries, h, tol) -> CheckEntry:
    t0 = time.perf_counter()
    fn, params = build(rng)
    if kind != "op":
        _move_off_kinks(params, rng)
    rep = T.grad_check(fn, params, h=h, tol=tol, max_entries=max_entries, seed=int(rng.integers(1 << 30)))
    return CheckEntry(name, kind, rep["max_rel_err"], rep["passed"], time.perf_counter() - t0, rep["failed"],
                      rep["one_sided"], rep["unresolved"])


def gradcheck_all(config: RunConfig | None = None, h: float = H, tol: float = TOL, seed: int = 0,
                  max_entries: int = 6, ops: bool = True, modules: bool = True,
                  end_to_end: bool = True) -> GradcheckReport:
    """Run every check; ``max_entries`` bounds the sampled entries per parameter tensor."""
    cfg = config or tiny_config()
    rng = np.random.default_rng(seed)
    entries = []
    if ops:
        for name, build in _op_cases().items():
            entries.append(_run(f"op:{name}", "op", build, rng, None, h, tol))
    if modules:
        for name, build in _module_cases(cfg).items():
            entries.append(_run(f"module:{name}", "module", build, rng, max_entries, h, tol))
    if end_to_end:
        entries.append(_run("end-to-end", "end-to-end", lambda r: _end_to_end(cfg), rng, max_entries, h, tol))
    return GradcheckReport(entries)
