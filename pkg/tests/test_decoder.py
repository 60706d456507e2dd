import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from affordground import tensor as T
from affordground.decoder import (MaskHead, MssmParams, channel_gate, channel_modulate, mssm_select,
                                  patch_modulate, predict_mask)
from affordground.tensor import Tensor


def test_patch_gate_values(rng):
    F = rng.normal(size=(3, 4))
    np.testing.assert_allclose(patch_modulate(Tensor(F), Tensor(np.zeros((3, 4)))).data, 0.5 * F)
    np.testing.assert_allclose(patch_modulate(Tensor(F), Tensor(np.full((3, 4), 50.0))).data, F, atol=1e-20)
    assert patch_modulate(Tensor([[2.0]]), Tensor([[np.log(3.0)]])).data[0, 0] == pytest.approx(1.5, abs=1e-15)


def test_channel_gate_values(rng):
    G = rng.normal(size=(2, 5))
    np.testing.assert_allclose(channel_modulate(Tensor(G), Tensor(np.zeros((2, 3))), np.zeros(3, bool)).data, 0.5 * G)
    m_t = rng.normal(size=(2, 3))
    gate = channel_gate(Tensor(m_t), np.array([False, True, True])).data
    np.testing.assert_allclose(gate[:, 0], 1 / (1 + np.exp(-m_t[:, 0])))
    G1 = np.array([[2.0, -4.0]])
    out = channel_modulate(Tensor(G1), Tensor([[np.log(3.0), np.log(3.0)]]), np.zeros(2, bool)).data
    np.testing.assert_allclose(out, 0.75 * G1, atol=1e-15)


def test_channel_gate_ignores_pad_columns(rng):
    m_t = rng.normal(size=(3, 4))
    pad = np.array([False, False, True, True])
    altered = m_t.copy()
    altered[:, 2:] = 99.0
    assert np.array_equal(channel_gate(Tensor(m_t), pad).data, channel_gate(Tensor(altered), pad).data)


def test_mssm_identical_branches(rng):
    G = Tensor(rng.normal(size=(4, 6)))
    np.testing.assert_allclose(mssm_select(G, G, MssmParams(rng, 4)).data, G.data, atol=1e-14)


def test_mssm_saturated_gate_selects_large_scale(rng):
    p = MssmParams(rng, 2)
    p.out.weight.data[:] = 0.0
    p.out.bias.data = np.array([[500.0], [-500.0]])
    g_l, g_s = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 3)))
    np.testing.assert_allclose(mssm_select(g_l, g_s, p).data, g_l.data, atol=1e-300)


def test_mssm_convex_combination_value(rng):
    p = MssmParams(rng, 2)
    p.out.weight.data[:] = 0.0
    p.out.bias.data = np.log(np.array([[0.25], [0.75]]))
    out, alpha = mssm_select(Tensor(np.ones((2, 3))), Tensor(np.full((2, 3), 5.0)), p, return_alpha=True)
    np.testing.assert_allclose(alpha.data.ravel(), [0.25, 0.75], atol=1e-15)
    np.testing.assert_allclose(out.data, 4.0, atol=1e-14)


@given(st.integers(0, 2 ** 31))
def test_mssm_weights_sum_to_one_and_bound_output(seed):
    r = np.random.default_rng(seed)
    p = MssmParams(r, 3)
    g_l, g_s = r.normal(size=(3, 7)), r.normal(size=(3, 7)) * 3
    out, alpha = mssm_select(Tensor(g_l), Tensor(g_s), p, return_alpha=True)
    assert abs(alpha.data.sum() - 1.0) < 1e-12
    lo, hi = np.minimum(g_l, g_s), np.maximum(g_l, g_s)
    assert (out.data >= lo - 1e-12).all() and (out.data <= hi + 1e-12).all()


def test_mask_head_zero_weights_give_half(rng):
    head = MaskHead(rng, 4)
    for lin in (head.hidden, head.out):
        lin.weight.data[:] = 0.0
        lin.bias.data[:] = 0.0
    np.testing.assert_array_equal(predict_mask(Tensor(rng.normal(size=(4, 9))), head).data, 0.5)


def test_mask_head_hand_logit(rng):
    head = MaskHead(rng, 2)
    head.hidden.weight.data = np.array([[1.0, 0.0]])
    head.hidden.bias.data = np.zeros((1, 1))
    head.out.weight.data = np.array([[np.log(3.0)]])
    head.out.bias.data = np.zeros((1, 1))
    out = predict_mask(Tensor([[1.0], [7.0]]), head)
    assert out.shape == (1, 1) and out.data[0, 0] == pytest.approx(0.75, abs=1e-15)


def test_decode_path_gradients(rng):
    C, N, L = 4, 10, 3
    e, mp = Tensor(rng.normal(size=(C, N)), requires_grad=True), Tensor(rng.normal(size=(C, N)), requires_grad=True)
    mt = Tensor(rng.normal(size=(C, L)), requires_grad=True)
    mssm, head = MssmParams(rng, C), MaskHead(rng, C, out_std=0.5)
    params = {"e": e, "mp": mp, "mt": mt, **mssm.named_parameters("mssm."), **head.named_parameters("head.")}
    for p in params.values():
        p.data = p.data + rng.normal(0, 0.05, size=p.shape)
    pad = np.array([False, False, True])

    def loss():
        g = channel_modulate(patch_modulate(e, mp), mt, pad)
        return T.sum(predict_mask(mssm_select(g, T.scale(g, 0.5), mssm), head))

    rep = T.grad_check(loss, params, max_entries=8)
    assert rep["passed"], rep["failed"]
