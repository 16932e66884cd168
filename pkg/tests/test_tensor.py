import numpy as np
import pytest

from densegen.errors import ShapeError
from densegen.tensor import Tensor, concat, gelu, layer_norm, matmul, softmax

from fd import finite_difference_grad, max_relative_error


def check_grad(build_loss, x0, tol, h=1e-6):
    """Compare analytic grad of build_loss(Tensor) against central differences."""
    x = Tensor(x0, requires_grad=True)
    loss = build_loss(x)
    loss.backward()
    numeric = finite_difference_grad(lambda v: build_loss(Tensor(v)).item(), x0.copy(), h=h)
    err = max_relative_error(x.grad, numeric)
    assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((a @ b).data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_projector():
    a = Tensor([[1.0, 0.0], [0.0, 0.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal((a @ b).data, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    b0 = rng.uniform(-2, 2, (3, 3))

    def loss(a):
        return (a @ Tensor(b0)).sum()

    check_grad(loss, rng.uniform(-2, 2, (3, 3)), tol=1e-6)

    a0 = rng.uniform(-2, 2, (3, 3))

    def loss_b(b):
        return (Tensor(a0) @ b).sum()

    check_grad(loss_b, rng.uniform(-2, 2, (3, 3)), tol=1e-6)


def test_matmul_batched_and_weight_case_gradients():
    rng = np.random.default_rng(1)
    w0 = rng.uniform(-1, 1, (4, 3))
    x0 = rng.uniform(-1, 1, (2, 5, 4))

    def loss_x(x):
        return (x @ Tensor(w0)).sum()

    check_grad(loss_x, x0, tol=1e-6)

    def loss_w(w):
        return (Tensor(x0) @ w).sum()

    check_grad(loss_w, w0, tol=1e-6)

    lhs = rng.uniform(-1, 1, (2, 3, 4))
    rhs = rng.uniform(-1, 1, (2, 4, 3))
    mix = rng.standard_normal((2, 3, 3))

    def loss_batched(a):
        return ((a @ Tensor(rhs)) * Tensor(mix)).sum()

    check_grad(loss_batched, lhs, tol=1e-6)


def test_softmax_symmetry():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_stability_no_overflow():
    y = softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(y))
    assert y[0] == pytest.approx(1.0)
    assert y[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(2)
    y = softmax(Tensor(rng.uniform(-2, 2, (4, 7)))).data
    np.testing.assert_allclose(y.sum(axis=-1), np.ones(4), atol=1e-12)


def test_softmax_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    weights = rng.standard_normal(5)

    def loss(x):
        return (softmax(x) * Tensor(weights)).sum()

    check_grad(loss, rng.uniform(-2, 2, 5), tol=1e-6)


def test_layer_norm_constant_row_maps_to_zero():
    x = Tensor([[3.0, 3.0, 3.0]])
    y = layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_allclose(y.data, np.zeros((1, 3)), atol=1e-12)


def test_layer_norm_zero_gain_returns_bias():
    rng = np.random.default_rng(4)
    bias = rng.standard_normal(6)
    y = layer_norm(Tensor(rng.uniform(-2, 2, (3, 6))), Tensor(np.zeros(6)), Tensor(bias))
    np.testing.assert_allclose(y.data, np.broadcast_to(bias, (3, 6)))


def test_layer_norm_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    gain0 = rng.uniform(0.5, 1.5, 6)
    bias0 = rng.standard_normal(6)
    x0 = rng.uniform(-2, 2, (4, 6))
    mix = rng.standard_normal((4, 6))

    def loss_x(x):
        return (layer_norm(x, Tensor(gain0), Tensor(bias0)) * Tensor(mix)).sum()

    check_grad(loss_x, x0, tol=1e-5)

    def loss_gain(g):
        return (layer_norm(Tensor(x0), g, Tensor(bias0)) * Tensor(mix)).sum()

    check_grad(loss_gain, gain0, tol=1e-5)

    def loss_bias(b):
        return (layer_norm(Tensor(x0), Tensor(gain0), b) * Tensor(mix)).sum()

    check_grad(loss_bias, bias0, tol=1e-5)


def test_gelu_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    check_grad(lambda x: gelu(x).sum(), rng.uniform(-2, 2, 9), tol=1e-4)


def test_backward_requires_scalar():
    with pytest.raises(ValueError, match="scalar"):
        (Tensor(np.zeros(3), requires_grad=True) * 2.0).backward()


def test_backward_sum_gives_ones():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_elementwise_square():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_fanout_sums_path_gradients():
    # y = sum(x*x + 3*x): node x feeds two consumers.
    rng = np.random.default_rng(7)

    def loss(x):
        return (x * x + x * 3.0).sum()

    check_grad(loss, rng.uniform(-2, 2, 4), tol=1e-6)


def test_grad_accumulates_across_backward_calls():
    x = Tensor([1.0, 1.0], requires_grad=True)
    x.sum().backward()
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    x.zero_grad()
    assert x.grad is None


def test_concat_and_slice_gradients():
    rng = np.random.default_rng(8)
    a0 = rng.uniform(-2, 2, (2, 3))
    b0 = rng.uniform(-2, 2, (2, 2))

    def loss_a(a):
        joined = concat([a, Tensor(b0)], axis=1)
        return (joined[:, 1:4] * joined[:, 1:4]).sum()

    check_grad(loss_a, a0, tol=1e-6)

    def loss_b(b):
        joined = concat([Tensor(a0), b], axis=1)
        return joined[:, -1].sum()

    check_grad(loss_b, b0, tol=1e-6)


def test_slice_copies_rather_than_views():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    piece = x[0]
    piece.data[0] = 99.0
    assert x.data[0, 0] == 0.0


def test_mean_and_broadcast_add_gradients():
    rng = np.random.default_rng(9)
    x0 = rng.uniform(-2, 2, (3, 4))
    row = rng.standard_normal(4)
    mix = rng.standard_normal((3, 4))

    def loss(x):
        return ((x + Tensor(row)) * Tensor(mix)).mean()

    check_grad(loss, x0, tol=1e-6)

    def loss_row(r):
        return (Tensor(x0) + r).mean(axis=0).sum()

    check_grad(loss_row, row, tol=1e-6)


def test_transpose_and_reshape_gradients():
    rng = np.random.default_rng(10)
    x0 = rng.uniform(-2, 2, (2, 3, 4))
    mix = rng.standard_normal((4, 2, 3))
    w = rng.standard_normal((4, 2))

    def loss(x):
        return (x.transpose((2, 0, 1)) * Tensor(mix)).sum()

    check_grad(loss, x0, tol=1e-6)

    def loss_reshape(x):
        return (x.reshape(6, 4) @ Tensor(w)).sum()

    check_grad(loss_reshape, x0, tol=1e-6)


def test_constant_subgraphs_are_not_recorded():
    a = Tensor(np.ones(3))
    b = Tensor(np.ones(3))
    out = a + b
    assert out._parents == ()
    assert not out.requires_grad
