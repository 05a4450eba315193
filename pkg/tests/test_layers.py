import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manifold_gan import autodiff as ad
from manifold_gan.autodiff import Tape, Tensor, gradient_check
from manifold_gan.errors import ContractViolation
from manifold_gan.layers import (LayerSpec, Network, batch_norm_forward, dropout_forward,
                                 global_avg_pool, leaky_relu, output_shape, weight_norm_apply)


# -- weight norm -----------------------------------------------------------------

def test_weight_norm_unit_scaling():
    w = weight_norm_apply(Tensor(np.array([[3.0, 4.0]])), Tensor(np.array([1.0])))
    np.testing.assert_allclose(w.values, [[0.6, 0.8]], rtol=0, atol=1e-15)


def test_weight_norm_zero_scale(rng):
    w = weight_norm_apply(Tensor(rng.standard_normal((3, 5))), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(w.values, 0.0)


def test_weight_norm_row_norm_equals_g(rng):
    for _ in range(100):
        v = rng.standard_normal((4, 3, 2, 2))
        g = rng.uniform(0.1, 3.0, 4)
        w = weight_norm_apply(Tensor(v), Tensor(g)).values
        np.testing.assert_allclose(np.linalg.norm(w.reshape(4, -1), axis=1), g, rtol=1e-14)


def test_weight_norm_transposed_layout(rng):
    # conv-transpose kernels keep the output unit on axis 1
    v = rng.standard_normal((3, 5, 2, 2))
    g = rng.uniform(0.5, 2.0, 5)
    w = weight_norm_apply(Tensor(v), Tensor(g), out_axis=1).values
    norms = np.linalg.norm(np.moveaxis(w, 1, 0).reshape(5, -1), axis=1)
    np.testing.assert_allclose(norms, g, rtol=1e-14)


def test_weight_norm_zero_row_rejected():
    with pytest.raises(ContractViolation):
        weight_norm_apply(Tensor(np.array([[0.0, 0.0], [1.0, 0.0]])), Tensor(np.ones(2)))


def test_weight_norm_gradient(rng):
    g = Tensor(rng.uniform(0.5, 2.0, 3))
    x = Tensor(rng.standard_normal((4, 5)))
    rep = gradient_check(
        lambda v: ad.sum(ad.tanh(ad.matmul(x, ad.transpose(weight_norm_apply(v, g))))),
        rng.standard_normal((3, 5)))
    assert rep.passed, rep.max_relative_error


def test_weight_norm_invariant_after_update(rng):
    net = Network([LayerSpec("dense", units=3, weight_norm=True)], (4,), "n", seed=1)
    net.params["n.00.dense.v"] = net.params["n.00.dense.v"] + rng.standard_normal((3, 4))
    net.params["n.00.dense.g"] = np.array([0.5, 2.0, 1.5])
    w = net.effective_weight(0).values
    np.testing.assert_allclose(np.linalg.norm(w, axis=1), [0.5, 2.0, 1.5], rtol=1e-14)


# -- batch norm ------------------------------------------------------------------

def _bn(x, train=True, eps=1e-5):
    c = x.shape[1]
    return batch_norm_forward(Tensor(x), Tensor(np.ones(c)), Tensor(np.zeros(c)),
                              np.zeros(c), np.ones(c), train, eps=eps)


def test_batch_norm_constant_batch_is_zero():
    y, _, _ = _bn(np.full((5, 3), 4.2))
    np.testing.assert_array_equal(y.values, 0.0)


def test_batch_norm_already_normalised():
    y, _, _ = _bn(np.array([[-1.0], [1.0]]), eps=1e-15)
    np.testing.assert_allclose(y.values, [[-1.0], [1.0]], rtol=1e-12)


def test_batch_norm_random_batch_statistics(rng):
    x = rng.standard_normal((64, 4, 3, 3)) * 5.0 + 2.0
    y, _, _ = _bn(x)
    m = y.values.mean(axis=(0, 2, 3))
    v = y.values.var(axis=(0, 2, 3))
    np.testing.assert_allclose(m, 0.0, atol=1e-6)
    np.testing.assert_allclose(v, 1.0, atol=1e-6)


def test_batch_norm_rejects_single_example():
    with pytest.raises(ContractViolation):
        _bn(np.ones((1, 3)))


def test_batch_norm_running_stats_update(rng):
    x = rng.standard_normal((10, 2))
    _, nm, nv = batch_norm_forward(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                                   np.zeros(2), np.ones(2), True, momentum=0.9)
    np.testing.assert_allclose(nm, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(nv, 0.9 + 0.1 * x.var(axis=0))


def test_batch_norm_infer_is_affine(rng):
    rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    gamma, beta = rng.standard_normal(3), rng.standard_normal(3)

    def f(x):
        return batch_norm_forward(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv, False)[0].values

    a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    np.testing.assert_allclose(f(0.3 * a + 0.7 * b), 0.3 * f(a) + 0.7 * f(b), rtol=1e-12)
    np.testing.assert_allclose(f(a), gamma * (a - rm) / np.sqrt(rv + 1e-5) + beta, rtol=1e-12)


def test_batch_norm_gradient(rng):
    gamma, beta = Tensor(rng.uniform(0.5, 2, 3)), Tensor(rng.standard_normal(3))
    weights = Tensor(rng.standard_normal((6, 3, 2, 2)))
    rep = gradient_check(lambda x: ad.sum(ad.batch_norm_train(x, gamma, beta, 1e-5)[0] * weights),
                         rng.standard_normal((6, 3, 2, 2)))
    assert rep.passed, rep.max_relative_error


# -- dropout ---------------------------------------------------------------------

def test_dropout_p0_identity(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    assert dropout_forward(x, 0.0, True, rng) is x


def test_dropout_infer_identity_bitwise(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    assert dropout_forward(x, 0.7, False, None).values.tobytes() == x.values.tobytes()


def test_dropout_statistics():
    rng = np.random.default_rng(0)
    x = Tensor(np.ones(100_000))
    y = dropout_forward(x, 0.5, True, rng).values
    keep = np.mean(y != 0)
    assert abs(keep - 0.5) < 0.01
    assert abs(y.mean() - 1.0) < 0.02


@pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
def test_dropout_rejects_bad_p(p):
    with pytest.raises(ContractViolation):
        dropout_forward(Tensor(np.ones(3)), p, True, np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        LayerSpec("dropout", p=p)


# -- activations and pooling ------------------------------------------------------

def test_leaky_relu_values():
    x = Tensor(np.array([2.0, -1.0]))
    np.testing.assert_allclose(leaky_relu(x, 0.2).values, [2.0, -0.2])
    z = np.linspace(-3, 3, 11)
    np.testing.assert_array_equal(leaky_relu(Tensor(z), 1.0).values, z)


def test_global_avg_pool_values():
    x = np.full((1, 2, 3, 3), 7.0)
    np.testing.assert_array_equal(global_avg_pool(Tensor(x)).values, [[7.0, 7.0]])
    x = np.arange(1.0, 5.0).reshape(1, 1, 2, 2)
    np.testing.assert_array_equal(global_avg_pool(Tensor(x)).values, [[2.5]])


def test_global_avg_pool_gradient_spreads_evenly():
    tape = Tape()
    x = tape.watch(np.zeros((1, 1, 3, 4)))
    (g,) = tape.gradient(ad.sum(global_avg_pool(x)), [x])
    np.testing.assert_allclose(g, np.full((1, 1, 3, 4), 1 / 12))


# -- convolution ------------------------------------------------------------------

def test_conv_1x1_identity(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(ad.conv2d(Tensor(x), Tensor(w)).values, x)


def test_conv_output_shape_formula():
    out = ad.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), 2, 1)
    assert out.shape == (1, 1, 2, 2)
    spec = LayerSpec("conv", units=5, kernel=3, stride=2, pad=1)
    assert output_shape(spec, (1, 4, 4)) == (5, 2, 2)


def test_conv_against_direct_loops(rng):
    x = rng.standard_normal((2, 2, 5, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    got = ad.conv2d(Tensor(x), Tensor(w), 2, 1).values
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros(got.shape)
    for b in range(2):
        for o in range(3):
            for i in range(got.shape[2]):
                for j in range(got.shape[3]):
                    want[b, o, i, j] = np.sum(xp[b, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o])
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv_transpose_adjointness():
    rng = np.random.default_rng(7)
    for _ in range(50):
        stride = int(rng.integers(1, 3))
        k = int(rng.integers(1, 4))
        pad = int(rng.integers(0, k))
        h = int(rng.integers(k, 8))
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        w = rng.standard_normal((cout, cin, k, k))
        x = rng.standard_normal((2, cin, h, h))
        cx = ad.conv2d(Tensor(x), Tensor(w), stride, pad).values
        y = rng.standard_normal(cx.shape)
        # reconstruct the input extent exactly with output_pad
        extra = h - ad.conv_transpose_output_size(cx.shape[2], k, stride, pad)
        ty = ad.conv_transpose2d(Tensor(y), Tensor(w), stride, pad, extra).values
        assert np.vdot(cx, y) == pytest.approx(np.vdot(x, ty), rel=1e-10, abs=1e-10)


def test_conv_transpose_extent_formula():
    out = ad.conv_transpose2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((2, 3, 5, 5))), 2, 2)
    assert out.shape == (1, 3, 7, 7)  # (4 - 1) * 2 + 5 - 4
    out = ad.conv_transpose2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((2, 3, 5, 5))), 2, 2, 1)
    assert out.shape == (1, 3, 8, 8)


def test_conv_non_positive_extent():
    with pytest.raises(ContractViolation):
        ad.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))
    with pytest.raises(ContractViolation):
        output_shape(LayerSpec("conv", units=1, kernel=5), (1, 2, 2))


@pytest.mark.parametrize("stride, pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_gradients(stride, pad, rng):
    w0 = rng.standard_normal((2, 3, 3, 3))
    x0 = rng.standard_normal((2, 3, 5, 5))
    probe = rng.standard_normal(ad.conv2d(Tensor(x0), Tensor(w0), stride, pad).shape)
    assert gradient_check(lambda x: ad.sum(ad.conv2d(x, Tensor(w0), stride, pad) * Tensor(probe)), x0).passed
    assert gradient_check(lambda w: ad.sum(ad.conv2d(Tensor(x0), w, stride, pad) * Tensor(probe)), w0).passed


def test_conv_transpose_gradients(rng):
    w0 = rng.standard_normal((3, 2, 5, 5))
    x0 = rng.standard_normal((2, 3, 3, 3))
    probe = rng.standard_normal(ad.conv_transpose2d(Tensor(x0), Tensor(w0), 2, 2, 1).shape)
    f = lambda x, w: ad.sum(ad.conv_transpose2d(x, w, 2, 2, 1) * Tensor(probe))
    assert gradient_check(lambda x: f(x, Tensor(w0)), x0).passed
    assert gradient_check(lambda w: f(Tensor(x0), w), w0).passed


# -- specs and networks ------------------------------------------------------------

def test_layer_spec_validation():
    with pytest.raises(ContractViolation):
        LayerSpec("conv", units=3, stride=0)
    with pytest.raises(ContractViolation):
        LayerSpec("conv", units=3, kernel=0)
    with pytest.raises(ContractViolation):
        LayerSpec("pool")
    with pytest.raises(ContractViolation):
        LayerSpec("nin", units=3, kernel=3)


def test_layer_spec_dict_round_trip():
    spec = LayerSpec("conv-transpose", units=4, kernel=5, stride=2, pad=2, output_pad=1, weight_norm=True)
    assert LayerSpec.from_dict(spec.to_dict()) == spec


def test_network_init_conventions():
    specs = [LayerSpec("dense", units=40, weight_norm=True), LayerSpec("batch-norm"),
             LayerSpec("dense", units=30)]
    net = Network(specs, (50,), "t", seed=3)
    assert net.params.names() == ["t.00.dense.v", "t.00.dense.g", "t.00.dense.b",
                                  "t.01.batch-norm.gamma", "t.01.batch-norm.beta",
                                  "t.02.dense.w", "t.02.dense.b"]
    np.testing.assert_array_equal(net.params["t.00.dense.g"], 1.0)
    np.testing.assert_array_equal(net.params["t.00.dense.b"], 0.0)
    w = net.params["t.02.dense.w"]
    assert abs(w.std() - 0.05) < 0.005
    again = Network(specs, (50,), "t", seed=3)
    assert net.params.equal(again.params)
    assert not net.params.equal(Network(specs, (50,), "t", seed=4).params)


def test_network_rejects_wrong_input_shape():
    net = Network([LayerSpec("dense", units=2)], (3,), "t")
    with pytest.raises(ContractViolation):
        net.forward(np.zeros((2, 4)))


def test_network_bn_stats_only_updated_on_request(rng):
    net = Network([LayerSpec("dense", units=3), LayerSpec("batch-norm")], (2,), "t")
    x = rng.standard_normal((8, 2))
    net.forward(x, train=True)
    np.testing.assert_array_equal(net.state["t.01.batch-norm.running_mean"], 0.0)
    net.forward(x, train=True, update_stats=True)
    assert np.any(net.state["t.01.batch-norm.running_mean"] != 0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2), st.integers(3, 9), st.integers(1, 4))
def test_property_conv_shape_formula(stride, pad, size, kernel):
    if size + 2 * pad < kernel:
        return
    x = Tensor(np.zeros((1, 1, size, size)))
    out = ad.conv2d(x, Tensor(np.zeros((1, 1, kernel, kernel))), stride, pad)
    assert out.shape[2] == (size + 2 * pad - kernel) // stride + 1
