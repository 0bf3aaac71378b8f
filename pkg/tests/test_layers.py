import math

import numpy as np
import pytest

from skipsideways.gradcheck import PRIMITIVES, sample_input
from skipsideways.layers import (LayerSpec, fuse_apply, fused_shape, init_params, layer_apply, mse_loss,
                                 output_shape, param_shapes, softmax_xent, space_to_depth, tau_apply)
from skipsideways.numerics import RandomSource, ShapeError, finite_diff_vjp_check, inner_product


def test_affine_identity():
    spec = LayerSpec.affine(2, 2)
    params = {"w": np.eye(2), "b": np.zeros(2)}
    x = np.array([3.0, 4.0])
    y, pb = layer_apply(spec, params, x)
    assert np.array_equal(y, [3.0, 4.0])
    w = np.array([1.0, 1.0])
    dx, dp = pb(w)
    assert np.array_equal(dx, [1.0, 1.0])
    assert np.array_equal(dp["w"], np.outer(w, x))
    assert np.array_equal(dp["b"], w)


def test_relu_example():
    y, pb = layer_apply(LayerSpec.relu(), None, np.array([-1.0, 0.5]))
    assert np.array_equal(y, [0.0, 0.5])
    assert np.array_equal(pb(np.ones(2))[0], [0.0, 1.0])


def test_conv_same_shape_and_fd():
    spec = LayerSpec.conv2d(2, 5, 3)
    rng = RandomSource(4)
    params = init_params(spec, rng.split("p"))
    x = rng.split("x").normal(size=(1, 8, 8, 2))
    y, _ = layer_apply(spec, params, x)
    assert y.shape == (1, 8, 8, 5)
    w = rng.split("w").normal(size=y.shape)
    assert finite_diff_vjp_check(lambda z: layer_apply(spec, params, z), x, w) < 1e-5


def test_conv_matches_direct_correlation():
    spec = LayerSpec.conv2d(1, 1, 3)
    rng = RandomSource(9)
    params = init_params(spec, rng)
    x = rng.split("x").normal(size=(4, 4, 1))
    y, _ = layer_apply(spec, params, x)
    xp = np.pad(x[..., 0], 1)
    k = params["w"][..., 0, 0]
    ref = np.array([[np.sum(xp[i:i + 3, j:j + 3] * k) for j in range(4)] for i in range(4)])
    assert np.allclose(y[..., 0], ref, rtol=0, atol=1e-14)


def test_kernel_larger_than_input_rejected():
    spec = LayerSpec.conv2d(1, 1, 5, padding="valid")
    with pytest.raises(ShapeError):
        output_shape(spec, (3, 3, 1))


def test_shape_mismatch_rejected():
    spec = LayerSpec.affine(3, 2)
    with pytest.raises(ShapeError):
        layer_apply(spec, init_params(spec, RandomSource(0)), np.zeros(4))
    with pytest.raises(ShapeError):
        output_shape(LayerSpec.conv2d(2, 3), (4, 4, 3))


def test_shape_function_is_pure():
    spec = LayerSpec.conv2d(3, 4, 3, stride=2)
    assert output_shape(spec, (9, 9, 3)) == output_shape(spec, (9, 9, 3)) == (5, 5, 4)


def test_maxpool_1d_analogue():
    # a 1x4 row pooled with a 1x2 window
    spec = LayerSpec.maxpool2d((1, 2))
    x = np.array([1.0, 3.0, 2.0, 0.0]).reshape(1, 4, 1)
    y, pb = tau_apply(spec, x)
    assert np.array_equal(y.ravel(), [3.0, 2.0])
    assert np.array_equal(pb(np.ones((1, 2, 1)))[0].ravel(), [0.0, 1.0, 1.0, 0.0])


def test_maxpool_tie_goes_to_lowest_index():
    spec = LayerSpec.maxpool2d((1, 2))
    y, pb = tau_apply(spec, np.array([2.0, 2.0]).reshape(1, 2, 1))
    assert y.ravel().tolist() == [2.0]
    assert pb(np.ones((1, 1, 1)))[0].ravel().tolist() == [1.0, 0.0]


def test_tile_example():
    spec = LayerSpec.tile_upsample((1, 2))
    y, pb = tau_apply(spec, np.array([5.0]).reshape(1, 1, 1))
    assert y.ravel().tolist() == [5.0, 5.0]
    assert pb(np.array([2.0, 3.0]).reshape(1, 2, 1))[0].ravel().tolist() == [5.0]


def test_tau_non_divisible_rejected():
    with pytest.raises(ShapeError):
        tau_apply(LayerSpec.maxpool2d(2), np.zeros((3, 4, 1)))


def test_tau_identity_and_bad_kind():
    x = np.ones((2, 2, 1))
    assert tau_apply(None, x)[0] is x
    with pytest.raises(ValueError):
        tau_apply(LayerSpec.relu(), x)


def test_fuse_add_and_concat_examples():
    g, pb = fuse_apply("add", np.array([1.0, 2.0]), np.array([3.0, 4.0]))
    assert g.tolist() == [4.0, 6.0]
    d, s = pb(np.ones(2))
    assert d.tolist() == [1.0, 1.0] and s.tolist() == [1.0, 1.0]
    g, pb = fuse_apply("concat", np.array([1.0, 2.0]), np.array([3.0]))
    assert g.tolist() == [1.0, 2.0, 3.0]
    d, s = pb(np.array([7.0, 8.0, 9.0]))
    assert d.tolist() == [7.0, 8.0] and s.tolist() == [9.0]


def test_fuse_errors():
    with pytest.raises(ShapeError):
        fuse_apply("add", np.zeros((2, 2, 3)), np.zeros((2, 2, 4)))
    with pytest.raises(ShapeError):
        fuse_apply("concat", np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))
    with pytest.raises(ValueError):
        fuse_apply("mul", np.zeros(2), np.zeros(2))
    assert fused_shape("concat", (4, 4, 3), (4, 4, 2)) == (4, 4, 5)


@pytest.mark.parametrize("seed", range(20))
def test_fuse_adjoint_identity(seed):
    rng = RandomSource(seed)
    for op, sshape in (("add", (3, 3, 2)), ("concat", (3, 3, 5))):
        a = rng.split((op, "a")).normal(size=(3, 3, 2))
        b = rng.split((op, "b")).normal(size=sshape)
        g, pb = fuse_apply(op, a, b)
        w = rng.split((op, "w")).normal(size=g.shape)
        d, s = pb(w)
        gap = abs(inner_product(w, g) - inner_product(d, a) - inner_product(s, b))
        assert gap < 1e-12 * max(1.0, abs(inner_product(w, g)))


def test_space_to_depth_layout_and_roundtrip():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
    y, pb = space_to_depth(x, 2)
    assert y.shape == (1, 1, 4)
    assert y.ravel().tolist() == [1.0, 2.0, 3.0, 4.0]
    z = RandomSource(1).normal(size=(8, 8, 3))
    y, pb = space_to_depth(z, 2)
    assert y.shape == (4, 4, 12)
    assert np.array_equal(pb(y), z)
    with pytest.raises(ShapeError):
        space_to_depth(np.zeros((3, 4, 1)), 2)


def test_softmax_xent_symmetric():
    loss, grad = softmax_xent(np.array([0.0, 0.0]), 0)
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    assert np.allclose(grad, [-0.5, 0.5], atol=1e-15)


def test_softmax_xent_saturated():
    loss, grad = softmax_xent(np.array([10.0, -10.0]), 0)
    p1 = math.exp(-20.0) / (1.0 + math.exp(-20.0))
    assert loss == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-10)
    assert loss == pytest.approx(2.06e-9, rel=1e-2)
    assert np.allclose(grad, [-p1, p1], rtol=1e-10, atol=0)


@pytest.mark.parametrize("seed", range(20))
def test_softmax_xent_grad_fd(seed):
    rng = RandomSource(seed)
    logits = rng.normal(size=5)
    label = int(rng.integers(0, 5))
    _, grad = softmax_xent(logits, label)
    h = 1e-5
    fd = np.array([(softmax_xent(logits + h * e, label)[0] - softmax_xent(logits - h * e, label)[0]) / (2 * h)
                   for e in np.eye(5)])
    assert np.linalg.norm(fd - grad) / np.linalg.norm(grad) < 1e-6


def test_mse_examples_and_fd():
    loss, grad = mse_loss(np.ones(3), np.ones(3))
    assert loss == 0.0 and not grad.any()
    loss, grad = mse_loss(np.array([1.0, 1.0]), np.zeros(2))
    assert loss == 1.0 and grad.tolist() == [1.0, 1.0]
    rng = RandomSource(2)
    p, t = rng.split("p").normal(size=6), rng.split("t").normal(size=6)
    _, grad = mse_loss(p, t)
    h = 1e-5
    fd = np.array([(mse_loss(p + h * e, t)[0] - mse_loss(p - h * e, t)[0]) / (2 * h) for e in np.eye(6)])
    assert np.linalg.norm(fd - grad) / np.linalg.norm(grad) < 1e-8
    with pytest.raises(ShapeError):
        mse_loss(np.zeros(2), np.zeros(3))


def test_pullback_repeatable_and_non_mutating():
    spec = LayerSpec.conv2d(2, 3, 3)
    rng = RandomSource(0)
    params = init_params(spec, rng)
    x = rng.split("x").normal(size=(5, 5, 2))
    x0 = x.copy()
    y, pb = layer_apply(spec, params, x)
    w = rng.split("w").normal(size=y.shape)
    a, b = pb(w), pb(w)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1]["w"], b[1]["w"])
    assert np.array_equal(x, x0)


def test_init_reproducible_and_shaped():
    spec = LayerSpec.conv2d(3, 4, 3)
    a = init_params(spec, RandomSource(5))
    b = init_params(spec, RandomSource(5))
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert {k: v.shape for k, v in a.items()} == param_shapes(spec)


@pytest.mark.parametrize("name,spec,shape", PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
def test_primitive_vjp(name, spec, shape):
    for seed in range(5):
        rng = RandomSource(seed).split(("layers-test", name))
        params = init_params(spec, rng.split("p"))
        x = sample_input(spec, shape, rng.split("x"))
        y, _ = layer_apply(spec, params, x)
        w = rng.split("w").normal(size=y.shape)
        assert finite_diff_vjp_check(lambda z: layer_apply(spec, params, z), x, w) < 1e-5
