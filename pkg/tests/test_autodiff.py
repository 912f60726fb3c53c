import numpy as np
import pytest

from cpqlab import nn
from cpqlab.nn import autodiff as ad

from helpers import directional_fd_check


def test_quadratic_gradient():
    theta = ad.Var(np.array(3.0), requires_grad=True)
    loss = ad.square(theta)
    (g,) = ad.grads_of(loss, [theta])
    assert g == pytest.approx(6.0)


def test_constant_loss_zero_gradients():
    theta = ad.Var(np.ones((2, 3)), requires_grad=True)
    loss = ad.vmean(ad.Var(np.full((4,), 2.5)))
    (g,) = ad.grads_of(loss, [theta])
    assert np.all(g == 0.0)


def test_chain_rule_through_tanh_exp_log():
    x = ad.Var(np.array(0.7), requires_grad=True)
    loss = ad.log(ad.add(ad.exp(ad.tanh(x)), 1.0))
    (g,) = ad.grads_of(loss, [x])
    t = np.tanh(0.7)
    expected = np.exp(t) / (np.exp(t) + 1.0) * (1.0 - t * t)
    assert g == pytest.approx(expected, rel=1e-12)


def test_matmul_and_broadcast_bias():
    w = ad.Var(np.arange(6, dtype=float).reshape(2, 3), requires_grad=True)
    b = ad.Var(np.zeros(3), requires_grad=True)
    x = np.array([[1.0, 2.0], [3.0, -1.0]])
    out = ad.affine(x, w, b)
    loss = ad.vsum(out)
    gw, gb = ad.grads_of(loss, [w, b])
    np.testing.assert_allclose(gw, x.T @ np.ones((2, 3)))
    np.testing.assert_allclose(gb, [2.0, 2.0, 2.0])


def test_minimum_routes_gradient_to_smaller_branch():
    a = ad.Var(np.array([1.0, 5.0]), requires_grad=True)
    b = ad.Var(np.array([2.0, 4.0]), requires_grad=True)
    loss = ad.vsum(ad.minimum(a, b))
    ga, gb = ad.grads_of(loss, [a, b])
    np.testing.assert_allclose(ga, [1.0, 0.0])
    np.testing.assert_allclose(gb, [0.0, 1.0])


def test_concat_splits_gradient():
    a = ad.Var(np.ones((2, 2)), requires_grad=True)
    b = ad.Var(np.ones((2, 3)), requires_grad=True)
    out = ad.concat([a, b], axis=1)
    loss = ad.vsum(ad.mul(out, np.arange(10, dtype=float).reshape(2, 5)))
    ga, gb = ad.grads_of(loss, [a, b])
    np.testing.assert_allclose(ga, [[0, 1], [5, 6]])
    np.testing.assert_allclose(gb, [[2, 3, 4], [7, 8, 9]])


def test_clip_zeroes_gradient_outside_range():
    x = ad.Var(np.array([-10.0, 0.5, 10.0]), requires_grad=True)
    loss = ad.vsum(ad.clip(x, -5.0, 2.0))
    (g,) = ad.grads_of(loss, [x])
    np.testing.assert_allclose(g, [0.0, 1.0, 0.0])


def test_transpose_gradient():
    x = ad.Var(np.ones((2, 3)), requires_grad=True)
    weights = np.arange(6, dtype=float).reshape(3, 2)
    loss = ad.vsum(ad.mul(ad.transpose(x), weights))
    (g,) = ad.grads_of(loss, [x])
    np.testing.assert_allclose(g, weights.T)


def test_gradient_accumulates_across_reuse():
    x = ad.Var(np.array(2.0), requires_grad=True)
    y = ad.mul(x, x)          # x reused: d/dx = 2x
    (g,) = ad.grads_of(y, [x])
    assert g == pytest.approx(4.0)


def test_non_finite_forward_raises_with_op_name():
    x = ad.Var(np.array(-1.0))
    with pytest.raises(ad.NumericError, match="log"):
        ad.log(x)
    big = ad.Var(np.array(1e308))
    with np.errstate(over="ignore"), pytest.raises(ad.NumericError, match="mul"):
        ad.mul(big, 1e308)


def test_backward_requires_scalar():
    x = ad.Var(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.backward(ad.mul(x, 2.0))


def test_constant_subgraphs_are_pruned():
    x = ad.Var(np.ones((4, 2)), requires_grad=True)
    frozen = ad.Var(np.ones((2, 2)))  # no grad requested
    out = ad.matmul(x, frozen)
    assert out._parents is not None
    assert all(p.requires_grad for p, _ in out._parents)
    (g,) = ad.grads_of(ad.vsum(out), [x])
    np.testing.assert_allclose(g, 2.0 * np.ones((4, 2)))


def test_finite_difference_random_graph(rng):
    w1 = rng.standard_normal((4, 8))
    b1 = rng.standard_normal(8)
    w2 = rng.standard_normal((8, 1))
    b2 = rng.standard_normal(1)
    x = rng.standard_normal((16, 4))
    target = rng.standard_normal((16, 1))

    def build(leaves):
        h = ad.relu(ad.affine(x, leaves[0], leaves[1]))
        out = ad.tanh(ad.affine(h, leaves[2], leaves[3]))
        return ad.vmean(ad.square(ad.sub(out, target)))

    directional_fd_check(build, [w1, b1, w2, b2], rng, n_points=20)


def test_forward_is_pure_and_bitwise_reproducible(rng):
    params = nn.init_mlp([3, 5, 2], rng)
    x = rng.standard_normal((7, 3))
    first = nn.mlp_forward(params, x)
    second = nn.mlp_forward(params, x)
    assert np.array_equal(first, second)
