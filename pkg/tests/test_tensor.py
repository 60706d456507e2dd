import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from affordground import tensor as T
from affordground.tensor import DomainError, NondeterministicError, ShapeError, Tensor

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# -- matmul ----------------------------------------------------------------

def test_matmul_identity_and_zero():
    B = Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), B).data, B.data)
    assert np.array_equal(T.matmul(Tensor(np.zeros((2, 2))), B).data, np.zeros((2, 2)))


def test_matmul_hand_product():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_backward_rules(rng):
    A, B = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    G = rng.normal(size=(3, 2))
    T.backward(T.sum(T.mul(T.matmul(A, B), Tensor(G))))
    np.testing.assert_allclose(A.grad, G @ B.data.T, rtol=1e-13)
    np.testing.assert_allclose(B.grad, A.data.T @ G, rtol=1e-13)


# -- softmax ---------------------------------------------------------------

def test_softmax_uniform_and_known_value():
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros((1, 4))), axis=1).data, 0.25)
    out = T.softmax(Tensor([[0.0, np.log(3.0)]]), axis=1).data
    np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-15)


@given(hnp.arrays(np.float64, (3, 5), elements=finite), finite)
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    a = T.softmax(Tensor(x), axis=1).data
    b = T.softmax(Tensor(x + c), axis=1).data
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(a, b, atol=1e-9)
    assert (a >= 0).all()


def test_softmax_large_inputs_stay_finite():
    out = T.softmax(Tensor([[1e4, 0.0, -1e4]]), axis=1).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, [[1.0, 0.0, 0.0]])


def test_softmax_mask_zeroes_excluded_entries():
    mask = np.array([[True, False, True]])
    out = T.softmax(Tensor([[1.0, 50.0, 1.0]]), axis=1, mask=mask).data
    np.testing.assert_allclose(out, [[0.5, 0.0, 0.5]])


def test_softmax_rejects_fully_masked_row():
    with pytest.raises(ValueError):
        T.softmax(Tensor([[1.0, 2.0]]), axis=1, mask=np.array([[False, False]]))


# -- elementwise -----------------------------------------------------------

def test_sigmoid_values():
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5
    assert abs(T.sigmoid(Tensor([np.log(3.0)])).data[0] - 0.75) < 1e-15


@given(hnp.arrays(np.float64, (4, 3), elements=st.floats(-700, 700)))
def test_sigmoid_strictly_inside_unit_interval(x):
    out = T.sigmoid(Tensor(x)).data
    assert np.isfinite(out).all()
    assert ((out >= 0) & (out <= 1)).all()
    moderate = np.abs(x) < 30
    assert ((out[moderate] > 0) & (out[moderate] < 1)).all()


def test_mul_by_ones_is_identity(rng):
    x = rng.normal(size=(3, 4))
    assert np.array_equal(T.mul(Tensor(x), Tensor(np.ones((3, 4)))).data, x)


def test_log_rejects_non_positive():
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        T.log(Tensor([-1.0]))


def test_elementwise_dispatch_matches_direct_ops(rng):
    a, b = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 3)))
    for kind, ref in (("add", np.add), ("sub", np.subtract), ("mul", np.multiply),
                      ("min", np.minimum), ("max", np.maximum)):
        assert np.array_equal(T.elementwise(kind, a, b).data, ref(a.data, b.data))
    assert np.array_equal(T.elementwise("relu", a).data, np.maximum(a.data, 0))
    assert np.array_equal(T.elementwise("abs", a).data, np.abs(a.data))
    assert np.array_equal(T.elementwise("scale", a, factor=3.0).data, 3.0 * a.data)
    with pytest.raises(ValueError):
        T.elementwise("tanh", a)


@pytest.mark.parametrize("shape_b", [(3, 4), (3, 1), (1, 4), (1, 1)])
def test_supported_broadcasts(shape_b, rng):
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=shape_b))
    T.backward(T.sum(T.add(a, b)))
    assert b.grad.shape == shape_b
    np.testing.assert_allclose(b.grad, np.full(shape_b, 12 / np.prod(shape_b)))


def test_unsupported_broadcast_rejected():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((3, 4))), Tensor(np.ones((2, 4))))


def test_group_max_ties_go_to_lowest_index():
    x = leaf([[1.0, 3.0, 3.0, 2.0, 2.0, 0.0]])
    out = T.group_max(x, 3)
    assert np.array_equal(out.data, [[3.0, 2.0]])
    T.backward(T.sum(out))
    assert np.array_equal(x.grad, [[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]])


# -- backward --------------------------------------------------------------

def test_sum_of_squares_gradient(rng):
    x = leaf(rng.normal(size=(2, 5)))
    T.backward(T.sum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-15)


def test_product_sum_gradient_matches_finite_differences(rng):
    A, B = leaf(rng.normal(size=(3, 3))), leaf(rng.normal(size=(3, 3)))
    rep = T.grad_check(lambda: T.sum(T.matmul(A, B)), {"A": A, "B": B}, h=1e-4, tol=1e-4)
    assert rep["passed"], rep["failed"]


def test_softmax_cross_entropy_gradient_is_probs_minus_onehot(rng):
    z = leaf(rng.normal(size=(5,)))
    onehot = np.eye(5)[2]
    probs = T.softmax(z, axis=0)
    T.backward(T.scale(T.sum(T.mul(T.log(probs), Tensor(onehot))), -1.0))
    np.testing.assert_allclose(z.grad, probs.data - onehot, atol=1e-14)


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        T.backward(T.mul(leaf([1.0, 2.0]), 2.0))


def test_unreachable_parameters_get_zero_gradient():
    x, unused = leaf([1.0, 2.0]), leaf([[5.0]])
    grads = T.backward(T.sum(T.mul(x, x)), params=[x, unused])
    assert np.array_equal(grads[id(unused)], [[0.0]])
    np.testing.assert_allclose(grads[id(x)], [2.0, 4.0])


def test_gradients_accumulate_over_shared_use(rng):
    w = leaf(rng.normal(size=(2, 2)))
    x = Tensor(rng.normal(size=(2, 3)))
    T.backward(T.sum(T.add(T.matmul(w, x), T.matmul(w, x))))
    np.testing.assert_allclose(w.grad, 2 * np.ones((2, 3)) @ x.data.T)


@given(hnp.arrays(np.float64, (3, 3), elements=finite))
def test_backward_is_linear_in_the_loss(x0):
    def grad_of(build):
        x = leaf(x0)
        T.backward(build(x))
        return x.grad

    f = lambda x: T.sum(T.mul(x, x))  # noqa: E731
    g = lambda x: T.sum(T.sigmoid(x))  # noqa: E731
    np.testing.assert_allclose(grad_of(lambda x: T.add(f(x), g(x))), grad_of(f) + grad_of(g), atol=1e-12)


def test_no_grad_records_nothing(rng):
    x = leaf(rng.normal(size=(2, 2)))
    with T.no_grad():
        y = T.sum(T.mul(x, x))
    assert not y.requires_grad and y.parents == ()


# -- grad_check -----------------------------------------------------------

def test_grad_check_quadratic_passes_tight_tolerance(rng):
    x = leaf(rng.normal(size=(4,)))
    rep = T.grad_check(lambda: T.sum(T.mul(x, x)), [x], tol=1e-6)
    assert rep["passed"] and max(rep["max_rel_err"].values()) < 1e-6


def test_grad_check_flags_a_flipped_sign(rng):
    x = leaf(rng.uniform(0.5, 2.0, size=(3,)))
    with T.inject_sign_flip("exp"):
        rep = T.grad_check(lambda: T.sum(T.exp(x)), [x])
    assert not rep["passed"]
    assert rep["max_rel_err"]["p0"] == pytest.approx(1.0)


def test_grad_check_rejects_nondeterministic_function(rng):
    x = leaf([1.0])
    noise = np.random.default_rng(0)
    with pytest.raises(NondeterministicError):
        T.grad_check(lambda: T.sum(T.mul(x, Tensor([noise.normal()]))), [x])


def test_grad_check_rejects_non_positive_step():
    with pytest.raises(ValueError):
        T.grad_check(lambda: T.sum(leaf([1.0])), [leaf([1.0])], h=0.0)


def test_grad_check_uses_one_sided_difference_across_a_kink():
    # relu input 5e-5 sits inside the h = 1e-4 stencil
    x = leaf([5e-5, 1.0])
    rep = T.grad_check(lambda: T.sum(T.relu(x)), [x])
    assert rep["passed"] and rep["one_sided"] == 1


# -- determinism and dump format -----------------------------------------

def test_same_inputs_give_bit_identical_outputs(rng):
    x = rng.normal(size=(3, 4))
    a = T.softmax(T.matmul(Tensor(x), Tensor(x.T)), axis=1).data
    b = T.softmax(T.matmul(Tensor(x), Tensor(x.T)), axis=1).data
    assert a.tobytes() == b.tobytes()


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4),
                  elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_dump_round_trip_is_exact(x):
    text = T.dumps(Tensor(x))
    assert text.startswith("shape: " + " ".join(map(str, x.shape)))
    back = T.loads(text).data
    assert back.shape == x.shape and back.tobytes() == x.tobytes()
