import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from affordground import tensor as T
from affordground.losses import (LossConfig, align_loss, binarize, dice_terms, focal_loss, mask_loss, proto_loss,
                                 symmetric_dice_loss, total_loss)
from affordground.tensor import DomainError, Tensor

probs = hnp.arrays(np.float64, 12, elements=st.floats(0.01, 0.99))
labels = hnp.arrays(np.float64, 12, elements=st.sampled_from([0.0, 1.0]))


def bce_sum(p, y):
    return -np.sum(y * np.log(p) + (1 - y) * np.log(1 - p))


def test_focal_perfect_prediction():
    y = np.array([1.0, 0.0, 1.0, 0.0])
    p = np.where(y == 1, 1 - 1e-9, 1e-9)
    assert focal_loss(p, y).item() < 1e-6
    assert focal_loss(y, y).item() < 1e-6


@given(probs, labels)
def test_focal_gamma0_alpha_half_is_half_bce(p, y):
    cfg = LossConfig(alpha=0.5, gamma=0.0, eps=0.0)
    assert focal_loss(p, y, cfg).item() == pytest.approx(0.5 * bce_sum(p, y), abs=1e-9)


def test_focal_single_point_value():
    assert focal_loss([0.5], [1.0]).item() == pytest.approx(0.25 * 0.25 * -np.log(0.5 + 1e-6), abs=1e-12)
    assert focal_loss([0.5], [1.0]).item() == pytest.approx(0.04332, abs=1e-5)


def test_focal_rejects_out_of_range():
    with pytest.raises(DomainError):
        focal_loss([1.2], [1.0])


@given(probs, labels, st.integers(0, 11))
def test_focal_monotone_in_p(p, y, i):
    up = p.copy()
    up[i] = min(p[i] + 0.005, 0.999)
    base, moved = focal_loss(p, y).item(), focal_loss(up, y).item()
    assert base >= 0
    if y[i] == 1:
        assert moved <= base + 1e-15
    else:
        assert moved >= base - 1e-15


def test_dice_floor_at_perfect_two_class_prediction():
    y = np.array([1.0, 1.0, 0.0, 0.0, 0.0])
    assert symmetric_dice_loss(y, y).item() == pytest.approx(0.5, abs=1e-6)


def test_dice_inversion_and_single_class():
    y = np.array([1.0, 0.0, 1.0, 0.0])
    assert symmetric_dice_loss(1 - y, y).item() == pytest.approx(1.5, abs=1e-6)
    ones = np.ones(4)
    pos, neg = dice_terms(ones, ones)
    assert pos.item() == pytest.approx((4 + 1e-6) / (8 + 1e-6), abs=1e-15)
    assert neg.item() == pytest.approx(1.0, abs=1e-15)
    assert symmetric_dice_loss(ones, ones).item() == pytest.approx(0.0, abs=1e-6)


@given(probs, labels)
def test_dice_range(p, y):
    assert -1e-9 <= symmetric_dice_loss(p, y).item() <= 1.5 + 1e-9


def test_mask_loss_components(rng):
    y = np.array([1.0, 0.0, 1.0, 0.0])
    m = mask_loss(y, y)
    assert m.total.item() == pytest.approx(0.5, abs=1e-6)
    p = rng.uniform(0.1, 0.9, size=4)
    m = mask_loss(p, y)
    assert m.total.item() == pytest.approx(m.focal.item() + m.dice.item(), abs=1e-15)


def test_mask_loss_gradient_is_sum_of_parts(rng):
    y = binarize(rng.uniform(size=6))

    def grad(which):
        x = Tensor(rng.normal(size=(1, 6)), requires_grad=True) if not hasattr(grad, "x0") else None
        x = Tensor(grad.x0.copy(), requires_grad=True)
        m = mask_loss(T.sigmoid(x), y)
        T.backward({"total": m.total, "focal": m.focal, "dice": m.dice}[which])
        return x.grad

    grad.x0 = rng.normal(size=(1, 6))
    np.testing.assert_allclose(grad("total"), grad("focal") + grad("dice"), atol=1e-12)


def test_align_loss_exact_values(rng):
    v = Tensor(rng.normal(size=(6, 1)))
    e1, e2 = np.zeros((6, 1)), np.zeros((6, 1))
    e1[0], e2[1] = 3.0, 2.0
    assert align_loss(v, v).item() == pytest.approx(0.0, abs=1e-12)
    assert align_loss(v, T.scale(v, -1.0)).item() == pytest.approx(2.0, abs=1e-12)
    assert align_loss(Tensor(e1), Tensor(e2)).item() == pytest.approx(1.0, abs=1e-12)


@given(st.integers(0, 2 ** 31), st.floats(0.01, 100))
def test_align_loss_range_and_scale_invariance(seed, c):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(5, 1)), r.normal(size=(5, 1))
    la = align_loss(Tensor(a), Tensor(b)).item()
    assert 0 <= la <= 2
    assert align_loss(Tensor(c * a), Tensor(b)).item() == pytest.approx(la, abs=1e-12)


@pytest.mark.parametrize("K", [1, 2, 17, 40])
def test_proto_loss_uniform_is_log_k(K):
    assert proto_loss(Tensor(np.full((K, 1), 0.3)), K - 1, 0.07).item() == pytest.approx(np.log(K), abs=1e-9)


def test_proto_loss_value_and_validation():
    assert proto_loss(Tensor([[1.0], [0.0]]), 0, 1.0).item() == pytest.approx(-np.log(np.e / (np.e + 1)), abs=1e-12)
    with pytest.raises(IndexError):
        proto_loss(Tensor([[1.0], [0.0]]), 2, 1.0)
    with pytest.raises(ValueError):
        proto_loss(Tensor([[1.0], [0.0]]), 0, 0.0)


@given(hnp.arrays(np.float64, 5, elements=st.floats(-1, 1)), st.integers(0, 4))
def test_proto_loss_decreases_with_target_similarity(s, i):
    up = s.copy()
    up[i] = min(s[i] + 0.01, 1.0)
    assert proto_loss(Tensor(up.reshape(-1, 1)), i, 0.07).item() <= proto_loss(Tensor(s.reshape(-1, 1)), i, 0.07).item()


def test_total_loss_weights():
    one, half = Tensor(1.0), Tensor(0.5)
    assert total_loss(one, half, one).item() == pytest.approx(1.7, abs=1e-15)
    zero = LossConfig(beta_align=0.0, beta_proto=0.0)
    assert total_loss(one, half, one, zero).item() == 1.0
    assert (LossConfig().beta_align, LossConfig().beta_proto) == (0.2, 0.6)


def test_loss_config_validation():
    for bad in (dict(alpha=0.0), dict(alpha=1.0), dict(gamma=-1.0), dict(tau=0.0), dict(beta_align=-0.1)):
        with pytest.raises(ValueError):
            LossConfig(**bad)


def test_all_losses_pass_grad_check(rng):
    logits = Tensor(rng.normal(size=(1, 10)), requires_grad=True)
    a, b = Tensor(rng.normal(size=(4, 1)), requires_grad=True), Tensor(rng.normal(size=(4, 1)), requires_grad=True)
    s = Tensor(rng.uniform(-1, 1, size=(5, 1)), requires_grad=True)
    y = binarize(rng.uniform(size=10))
    cfg = LossConfig()
    fn = lambda: total_loss(mask_loss(T.sigmoid(logits), y, cfg).total, align_loss(a, b),  # noqa: E731
                            proto_loss(s, 3, cfg.tau), cfg)
    rep = T.grad_check(fn, {"logits": logits, "a": a, "b": b, "s": s})
    assert rep["passed"], rep["failed"]
