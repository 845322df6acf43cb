"""Tensor/tape unit tests: hand oracles, finite differences, tape contracts."""

import numpy as np
import pytest

from u4d import autodiff as ad
from u4d.autodiff import Tensor, backward, grad_check


def test_matmul_identity():
    b = Tensor(np.arange(6, dtype=float).reshape(2, 3))
    eye = Tensor(np.eye(2))
    out = ad.matmul(eye, b)
    assert np.array_equal(out.data, b.data)


def test_matmul_hand_case():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[1.0], [1.0]])
    out = ad.matmul(a, b)
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((2, 3)))
    with pytest.raises(ad.ShapeError) as ei:
        ad.matmul(a, b)
    assert "(2, 3)" in str(ei.value)


def test_matmul_gradient_vs_finite_differences():
    rng = np.random.default_rng(0)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b_fixed = Tensor(rng.standard_normal((4, 2)))

    err_a = grad_check(lambda t: ad.sum_(ad.matmul(t, b_fixed)), a, eps=1e-5)
    assert err_a < 1e-6

    a_fixed = Tensor(rng.standard_normal((3, 4)))
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    err_b = grad_check(lambda t: ad.sum_(ad.matmul(a_fixed, t)), b, eps=1e-5)
    assert err_b < 1e-6


def test_softmax_uniform_row():
    x = Tensor(np.full((1, 4), 2.5))
    p = ad.softmax_rows(x, np.ones((1, 4), dtype=bool))
    assert np.allclose(p.data, 0.25, atol=1e-15)


def test_softmax_single_allowed_key():
    x = Tensor(np.array([[5.0, 100.0]]))
    allow = np.array([[True, False]])
    p = ad.softmax_rows(x, allow)
    assert np.array_equal(p.data, [[1.0, 0.0]])


def test_softmax_random_mask_rows_normalize():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((4, 4)))
    allow = rng.random((4, 4)) < 0.6
    allow[np.arange(4), np.arange(4)] = True  # keep every row non-empty
    p = ad.softmax_rows(x, allow)
    assert np.all(p.data[~allow] == 0.0)
    assert np.allclose(p.data.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_fully_masked_row_is_zero_and_flagged():
    x = Tensor(np.zeros((2, 3)))
    allow = np.ones((2, 3), dtype=bool)
    allow[1] = False
    with pytest.warns(UserWarning):
        p = ad.softmax_rows(x, allow)
    assert np.all(np.isfinite(p.data))
    assert np.array_equal(p.data[1], np.zeros(3))


def test_layer_norm_constant_vector_is_zero():
    x = Tensor(np.full((2, 5), 3.7))
    g = Tensor(np.ones(5))
    b = Tensor(np.zeros(5))
    out = ad.layer_norm(x, g, b, eps=1e-5)
    assert np.allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_zero_gamma_gives_beta():
    x = Tensor(np.random.default_rng(1).standard_normal((3, 4)))
    g = Tensor(np.zeros(4))
    b = Tensor(np.array([1.0, 2.0, 3.0, 4.0]))
    out = ad.layer_norm(x, g, b)
    assert np.array_equal(out.data, np.broadcast_to(b.data, (3, 4)))


def test_layer_norm_moments():
    rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal((6, 32)) * 10 + 1)
    g = Tensor(np.ones(32))
    b = Tensor(np.zeros(32))
    out = ad.layer_norm(x, g, b, eps=1e-5)
    assert np.all(np.abs(out.data.mean(axis=-1)) < 1e-10)
    assert np.all(np.abs(out.data.var(axis=-1) - 1.0) < 1e-6)


def test_layer_norm_dim_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.zeros(3)), Tensor(np.zeros(3)))


def test_backward_sum_gives_ones():
    x = Tensor(np.array([1.0, -2.0, 5.0]), requires_grad=True)
    backward(ad.sum_(x))
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_elementwise_square():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(ad.sum_(ad.mul(x, x)))
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_backward_twice_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = ad.sum_(x)
    backward(loss)
    with pytest.raises(ad.TapeConsumedError):
        backward(loss)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.ContractError):
        backward(ad.mul(x, x))


def test_building_on_consumed_graph_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ad.mul(x, x)
    backward(ad.sum_(y))
    with pytest.raises(ad.TapeConsumedError):
        ad.sum_(y)


def test_unreachable_tensor_has_no_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    other = Tensor(np.ones(3), requires_grad=True)
    backward(ad.sum_(x))
    assert other.grad is None


def test_grad_check_sum_is_exact():
    x = Tensor(np.random.default_rng(2).standard_normal((3, 3)))
    assert grad_check(ad.sum_, x) < 1e-10


def test_grad_check_softmax_matmul_chain():
    rng = np.random.default_rng(5)
    w = Tensor(rng.standard_normal((4, 4)))
    allow = rng.random((4, 4)) < 0.7
    allow[np.arange(4), np.arange(4)] = True
    coef = Tensor(rng.standard_normal((4, 4)))

    def f(x):
        p = ad.softmax_rows(ad.matmul(x, w), allow)
        return ad.sum_(ad.mul(p, coef))

    x = Tensor(rng.standard_normal((4, 4)))
    assert grad_check(f, x, eps=1e-5) < 1e-6


def test_grad_check_catches_wrong_backward():
    # fixture op with an intentionally wrong derivative (reports 3x^2 instead of 2x)
    def bad_square(a):
        data = a.data * a.data

        def bw(out):
            if a.requires_grad:
                a._accumulate(out.grad * 3.0 * a.data)

        return ad._make_node(data, (a,), bw)

    x = Tensor(np.array([1.0, 2.0, -1.5]))
    err = grad_check(lambda t: ad.sum_(bad_square(t)), x)
    assert err > 1e-2


def test_grad_check_rejects_nonscalar():
    x = Tensor(np.ones(3))
    with pytest.raises(ad.ContractError):
        grad_check(lambda t: ad.mul(t, t), x)


def test_gradient_soundness_property():
    """Randomized finite-difference check across every differentiable op."""
    rng = np.random.default_rng(11)
    d = 4

    def rand(shape):
        return rng.standard_normal(shape)

    allow = np.ones((d, d), dtype=bool)
    allow[0, 2] = allow[2, 1] = False
    gamma = Tensor(rand(d))
    beta = Tensor(rand(d))
    other = Tensor(rand((d, d)))
    ones = Tensor(np.ones((d, d)))
    coef_wide = Tensor(rand((d, 2 * d)))
    coef_row = Tensor(rand((1, d)))
    coef_sq1 = Tensor(rand((d, d)))
    coef_sq2 = Tensor(rand((d, d)))
    coef_bmm = Tensor(rand((2, d, 3)))
    idx = np.array([0, 2, 2, 3])

    cases = [
        lambda x: ad.sum_(ad.add(x, other)),
        lambda x: ad.sum_(ad.sub(other, x)),
        lambda x: ad.sum_(ad.mul(x, other)),
        lambda x: ad.sum_(ad.scale(x, -2.5)),
        lambda x: ad.sum_(ad.square(x)),
        lambda x: ad.sum_(ad.exp(ad.scale(x, 0.3))),
        lambda x: ad.sum_(ad.log(ad.add(ad.square(x), ones))),
        lambda x: ad.sum_(ad.tanh(x)),
        lambda x: ad.sum_(ad.sigmoid(x)),
        lambda x: ad.sum_(ad.gelu(x)),
        lambda x: ad.sum_(ad.reshape(x, (d * d,))),
        lambda x: ad.sum_(ad.transpose(x, (1, 0))),
        lambda x: ad.sum_(ad.mul(ad.concat([x, other], axis=1), coef_wide)),
        lambda x: ad.sum_(ad.gather_rows(x, idx)),
        lambda x: ad.sum_(ad.mul(ad.sum_(x, axis=0, keepdims=True), coef_row)),
        lambda x: ad.sum_(ad.mean(x, axis=1)),
        lambda x: ad.sum_(ad.matmul(x, other)),
        lambda x: ad.sum_(ad.mul(ad.softmax_rows(x, allow), coef_sq1)),
        lambda x: ad.sum_(ad.mul(ad.layer_norm(x, gamma, beta), coef_sq2)),
        lambda x: ad.sum_(ad.bmm(ad.reshape(x, (2, 2, d)), coef_bmm)),
    ]
    trials = 0
    for case in cases:
        for _ in range(6):
            x = Tensor(rand((d, d)))
            assert grad_check(case, x, eps=1e-5) < 1e-5
            trials += 1
    assert trials >= 100


def test_no_nan_on_finite_inputs():
    rng = np.random.default_rng(13)
    x = Tensor(rng.standard_normal((8, 8)) * 50)
    allow = rng.random((8, 8)) < 0.5
    allow[np.arange(8), np.arange(8)] = True
    p = ad.softmax_rows(x, allow)
    ln = ad.layer_norm(Tensor(rng.standard_normal((8, 8))), Tensor(np.ones(8)), Tensor(np.zeros(8)))
    assert np.all(np.isfinite(p.data))
    assert np.all(np.isfinite(ln.data))


def test_double_precision_determinism():
    def run(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((5, 5)), requires_grad=True)
        w = Tensor(rng.standard_normal((5, 5)), requires_grad=True)
        p = ad.softmax_rows(ad.matmul(x, w), np.ones((5, 5), dtype=bool))
        loss = ad.sum_(ad.square(p))
        backward(loss)
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    a = run(42)
    b = run(42)
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


def test_parameter_group_validation():
    with pytest.raises(ad.ContractError):
        ad.Parameter("w", Tensor(np.zeros(2), requires_grad=True), "nonsense")
    p = ad.Parameter("w", Tensor(np.zeros(2), requires_grad=True), "heads")
    assert p.group == "heads"
