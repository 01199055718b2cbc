"""
Test cases for the tensor tape and its primitives.
"""

import numpy as np
import pytest

from binflow.core.ndmath import (
    Rng, Tape, Tensor, backward, elementwise, gradcheck, linear, matmul, rand_uniform, randn,
    silu, softplus, square, take_rows, tanh, tmean, tsum,
)
from binflow.errors import ContractError, DimensionError, DomainError


@pytest.fixture
def rng():
    return Rng(1234)


def test_matmul_hand_arithmetic():
    """Test matmul against hand-computed products"""
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[1.0], [1.0]])
    assert np.array_equal(matmul(a, b).data, np.array([[3.0], [7.0]]))
    assert np.array_equal(matmul(Tensor(np.eye(2)), a).data, a.data)


def test_matmul_shape_mismatch():
    """Test matmul rejects incompatible shapes"""
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_is_ones_times_b_transpose(rng):
    """Test d sum(a b) / da == ones b^T"""
    a = Tensor(rng.normal((5, 7)), requires_grad=True)
    b = Tensor(rng.normal((7, 3)))
    with Tape() as tape:
        root = tsum(matmul(a, b))
    backward(root, tape)
    assert np.allclose(a.grad, np.ones((5, 3)) @ b.data.T, atol=1e-12)


def test_elementwise_values():
    """Test sigmoid(0), silu(0) and dispatch"""
    zero = Tensor(0.0)
    assert elementwise("sigmoid", zero).item() == 0.5
    assert elementwise("silu", zero).item() == 0.0
    assert elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data.tolist() == [4.0, 6.0]
    with pytest.raises(ContractError):
        elementwise("cube", zero)


def test_broadcast_rules():
    """Test scalar broadcasting is allowed and mismatched shapes are not"""
    out = elementwise("mul", Tensor(2.0), Tensor([1.0, 2.0]))
    assert out.data.tolist() == [2.0, 4.0]
    with pytest.raises(DimensionError):
        elementwise("add", Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_log_domain():
    """Test log of a non-positive entry is a domain error"""
    with pytest.raises(DomainError):
        elementwise("log", Tensor([1.0, 0.0]))


def test_tanh_gradient_matches_finite_difference():
    """Test tanh gradient at 0.3"""
    x = Tensor(0.3, requires_grad=True)
    with Tape() as tape:
        y = tanh(x)
    backward(y, tape)
    h = 1e-5
    numeric = (np.tanh(0.3 + h) - np.tanh(0.3 - h)) / (2 * h)
    assert abs(float(x.grad) - numeric) < 1e-7


def test_backward_sum_and_square_norm(rng):
    """Test grad of sum is ones and grad of squared norm is 2 theta"""
    theta = Tensor(rng.normal((4, 3)), requires_grad=True)
    with Tape() as tape:
        root = tsum(theta)
    backward(root, tape)
    assert np.array_equal(theta.grad, np.ones((4, 3)))

    theta.zero_grad()
    with Tape() as tape:
        root = tsum(square(theta))
    backward(root, tape)
    assert np.allclose(theta.grad, 2 * theta.data)


def test_backward_contracts(rng):
    """Test backward rejects non-scalar roots and foreign roots"""
    theta = Tensor(rng.normal(3), requires_grad=True)
    with Tape() as tape:
        vector = square(theta)
    with pytest.raises(ContractError):
        backward(vector, tape)
    with pytest.raises(ContractError):
        backward(Tensor(1.0), tape)
    with pytest.raises(ContractError):
        backward(tsum(theta))


def test_backward_accumulates(rng):
    """Test two backward passes add into existing grads"""
    theta = Tensor(rng.normal(3), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            root = tsum(theta)
        backward(root, tape)
    assert np.array_equal(theta.grad, 2 * np.ones(3))


def test_two_layer_mlp_gradcheck(rng):
    """Test every parameter of a small MLP against central differences"""
    x = Tensor(rng.normal((4, 3)))
    w1 = Tensor(rng.normal((3, 5)))
    b1 = Tensor(rng.normal(5))
    w2 = Tensor(rng.normal((5, 2)))
    b2 = Tensor(rng.normal(2))
    target = Tensor(rng.normal((4, 2)))

    def loss():
        hidden = silu(linear(x, w1, b1))
        return tmean(square(linear(hidden, w2, b2) - target))

    assert gradcheck(loss, [w1, b1, w2, b2]) < 1e-4


def test_primitive_gradchecks(rng):
    """Test unary primitives and row lookup against central differences"""
    a = Tensor(rng.normal((3, 4)))
    for fn in (tanh, silu, softplus, square):
        assert gradcheck(lambda: tsum(fn(a)), [a]) < 1e-4
    positive = Tensor(rng.uniform((3, 4)) + 0.5)
    assert gradcheck(lambda: tsum(elementwise("log", positive)), [positive]) < 1e-4
    assert gradcheck(lambda: tsum(elementwise("exp", a)), [a]) < 1e-4
    assert gradcheck(lambda: tsum(elementwise("sigmoid", a)), [a]) < 1e-4

    table = Tensor(rng.normal((5, 3)))
    index = np.array([0, 2, 2, 4])
    assert gradcheck(lambda: tsum(square(take_rows(table, index))), [table]) < 1e-4


def test_rng_determinism():
    """Test equal seeds give identical tensors"""
    assert np.array_equal(randn(Rng(7), (3, 4)).data, randn(Rng(7), (3, 4)).data)
    assert np.array_equal(rand_uniform(Rng(7), 5).data, rand_uniform(Rng(7), 5).data)
    assert not np.array_equal(Rng(7).derive(1).normal(4), Rng(7).derive(2).normal(4))


def test_rng_moments():
    """Test normal and uniform moments over 1e6 draws"""
    normal = randn(Rng(0), 1_000_000).data
    assert abs(normal.mean()) < 0.01
    assert abs(normal.var() - 1.0) < 0.01
    uniform = rand_uniform(Rng(0), 1_000_000).data
    assert abs(uniform.mean() - 0.5) < 0.002


def test_backward_is_linear(rng):
    """Test grad(2 f - 3 g) == 2 grad f - 3 grad g"""
    data = rng.normal((3, 4))

    def grad_of(build):
        theta = Tensor(data.copy(), requires_grad=True)
        with Tape() as tape:
            root = build(theta)
        backward(root, tape)
        return theta.grad

    def f(theta):
        return tsum(silu(theta))

    def g(theta):
        return tsum(square(tanh(theta)))

    combined = grad_of(lambda theta: f(theta) * 2.0 - g(theta) * 3.0)
    assert np.allclose(combined, 2.0 * grad_of(f) - 3.0 * grad_of(g), rtol=0, atol=1e-12)


def test_item_requires_single_entry():
    """Test item() on a vector is a contract error"""
    assert Tensor([[2.5]]).item() == 2.5
    with pytest.raises(ContractError):
        Tensor([1.0, 2.0]).item()
