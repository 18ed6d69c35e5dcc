import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ckd.numerics import (
    ComputeGraph,
    GraphError,
    ModelParameters,
    ShapeError,
    affine,
    backward,
    batchnorm2d,
    conv2d,
    finite_diff_check,
    init_parameters,
    interpolate_upsample,
    relu,
    transposed_conv2d,
)
from ckd.numerics.tensor import NonFiniteError
from reference import (
    affine_loops,
    batchnorm_loops,
    conv2d_loops,
    transposed_conv2d_loops,
    upsample_replicate,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- conv2d ----------------------------------------------------------------------


def test_conv2d_full_overlap_sum():
    out = conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), stride=1, pad=0)
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == 9.0


def test_conv2d_identity_kernel(rng):
    x = rng.normal(size=(1, 2, 2))
    np.testing.assert_array_equal(conv2d(x, np.ones((1, 1, 1, 1))), x)


def test_conv2d_matches_loop_oracle(rng):
    x = rng.normal(size=(2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    np.testing.assert_allclose(conv2d(x, w), conv2d_loops(x, w, 1, 0), atol=1e-12, rtol=0)


@settings(max_examples=25, deadline=None)
@given(
    c_in=st.integers(1, 4), c_out=st.integers(1, 4), h=st.integers(3, 8), w=st.integers(3, 8),
    k=st.sampled_from([1, 2, 3]), stride=st.integers(1, 3), pad=st.integers(0, 2), seed=st.integers(0, 10**6),
)
def test_conv2d_random_shapes_match_oracle(c_in, c_out, h, w, k, stride, pad, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(c_in, h, w))
    kern = r.normal(size=(c_out, c_in, k, k))
    bias = r.normal(size=c_out)
    ours = conv2d(x, kern, stride, pad, bias=bias)
    np.testing.assert_allclose(ours, conv2d_loops(x, kern, stride, pad, bias), atol=1e-12, rtol=0)


def test_conv2d_output_size_floor(rng):
    out = conv2d(rng.normal(size=(1, 6, 6)), rng.normal(size=(2, 1, 3, 3)), stride=2, pad=0)
    assert out.shape == (2, 2, 2)


def test_conv2d_channel_mismatch_is_descriptive(rng):
    with pytest.raises(ShapeError, match="channels"):
        conv2d(rng.normal(size=(2, 4, 4)), rng.normal(size=(1, 3, 3, 3)))


def test_conv2d_kernel_too_large(rng):
    with pytest.raises(ShapeError):
        conv2d(rng.normal(size=(1, 2, 2)), rng.normal(size=(1, 1, 3, 3)))


def test_conv2d_is_linear(rng):
    x1, x2 = rng.normal(size=(2, 2, 5, 5))
    w = rng.normal(size=(2, 2, 3, 3))
    np.testing.assert_allclose(conv2d(2 * x1 - 3 * x2, w), 2 * conv2d(x1, w) - 3 * conv2d(x2, w), atol=1e-12)


# -- transposed conv --------------------------------------------------------------


def test_tconv_single_pixel_spread():
    out = transposed_conv2d(np.ones((1, 1, 1)), np.ones((1, 1, 2, 2)))
    np.testing.assert_array_equal(out, np.ones((1, 2, 2)))


def test_tconv_stride2_block_scatter():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    out = transposed_conv2d(x, np.ones((1, 1, 2, 2)), stride=2)
    np.testing.assert_array_equal(out, transposed_conv2d_loops(x, np.ones((1, 1, 2, 2)), 2, 0))
    np.testing.assert_array_equal(out[0, :2, :2], np.ones((2, 2)))
    np.testing.assert_array_equal(out[0, 2:, 2:], 4 * np.ones((2, 2)))


def test_tconv_zero_kernel(rng):
    assert np.all(transposed_conv2d(rng.normal(size=(2, 3, 3)), np.zeros((2, 4, 3, 3)), 2, 1) == 0)


@settings(max_examples=25, deadline=None)
@given(
    c_in=st.integers(1, 4), c_out=st.integers(1, 4), h=st.integers(1, 6), k=st.sampled_from([1, 2, 3]),
    stride=st.integers(1, 3), pad=st.integers(0, 1), seed=st.integers(0, 10**6),
)
def test_tconv_matches_scatter_oracle(c_in, c_out, h, k, stride, pad, seed):
    if (h - 1) * stride - 2 * pad + k < 1:
        return
    r = np.random.default_rng(seed)
    x = r.normal(size=(c_in, h, h))
    w = r.normal(size=(c_in, c_out, k, k))
    np.testing.assert_allclose(
        transposed_conv2d(x, w, stride, pad), transposed_conv2d_loops(x, w, stride, pad), atol=1e-12, rtol=0
    )


@settings(max_examples=30, deadline=None)
@given(
    c_in=st.integers(1, 4), c_out=st.integers(1, 4), ho=st.integers(1, 5), k=st.sampled_from([1, 2, 3]),
    stride=st.integers(1, 3), pad=st.integers(0, 1), seed=st.integers(0, 10**6),
)
def test_tconv_is_adjoint_of_conv(c_in, c_out, ho, k, stride, pad, seed):
    # choose the conv input size so that the transposed map reproduces it exactly
    h = (ho - 1) * stride - 2 * pad + k
    if h < 1 or k > h + 2 * pad:
        return
    r = np.random.default_rng(seed)
    kern = r.normal(size=(c_out, c_in, k, k))
    x = r.normal(size=(c_in, h, h))
    y = r.normal(size=(c_out, ho, ho))
    lhs = np.sum(conv2d(x, kern, stride, pad) * y)
    rhs = np.sum(x * transposed_conv2d(y, kern, stride, pad))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


# -- batchnorm ---------------------------------------------------------------------


def test_batchnorm_constant_channel_gives_zero():
    x = np.stack([np.full((3, 3), 2.0), np.full((3, 3), -5.0)])
    out, _ = batchnorm2d(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), train=True)
    np.testing.assert_array_equal(out, np.zeros_like(x))


def test_batchnorm_gamma_zero_gives_beta(rng):
    out, _ = batchnorm2d(rng.normal(size=(2, 3, 3)), np.zeros(2), np.array([0.5, -1.0]), np.zeros(2), np.ones(2))
    np.testing.assert_array_equal(out[0], np.full((3, 3), 0.5))
    np.testing.assert_array_equal(out[1], np.full((3, 3), -1.0))


def test_batchnorm_standardizes_moments(rng):
    x = rng.normal(3.0, 2.0, size=(2, 3, 3))
    out, _ = batchnorm2d(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), eps=0.0 + 1e-300)
    np.testing.assert_allclose(out.mean(axis=(1, 2)), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(1, 2)), 1.0, atol=1e-10)


def test_batchnorm_matches_loop_oracle(rng):
    x = rng.normal(size=(4, 8, 8))
    g, b = rng.normal(size=4), rng.normal(size=4)
    out, _ = batchnorm2d(x, g, b, np.zeros(4), np.ones(4), eps=1e-5)
    np.testing.assert_allclose(out, batchnorm_loops(x, g, b, 1e-5), atol=1e-12, rtol=0)


def test_batchnorm_running_stats_momentum(rng):
    x = rng.normal(size=(1, 4, 4))
    _, stats = batchnorm2d(x, np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), train=True)
    assert stats.mean[0] == pytest.approx(0.1 * x.mean())
    assert stats.var[0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1))


def test_batchnorm_eval_uses_running_stats(rng):
    x = rng.normal(size=(1, 2, 2))
    out, stats = batchnorm2d(x, np.ones(1), np.zeros(1), np.array([1.0]), np.array([4.0]), train=False, eps=1e-5)
    np.testing.assert_allclose(out, (x - 1.0) / np.sqrt(4.0 + 1e-5))
    assert stats.mean[0] == 1.0


def test_batchnorm_rejects_nonpositive_eps(rng):
    with pytest.raises(ValueError):
        batchnorm2d(rng.normal(size=(1, 2, 2)), np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), eps=0.0)


# -- relu / upsample / affine -------------------------------------------------------


def test_relu_values():
    np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    assert np.all(relu(-np.ones(5)) == 0)


def test_relu_gradient_mask_finite_difference(rng):
    g = ComputeGraph()
    x = g.input("x")
    g.set_output("y", g.relu(x))
    params = ModelParameters()
    xv = rng.normal(size=(1, 1, 3, 3))
    xv[np.abs(xv) < 1e-3] = 0.5  # keep away from the kink
    g.forward(params, {"x": xv})
    g.backward(params, {"y": np.ones_like(xv)})
    analytic = g.input_grads["x"]
    h = 1e-6
    numeric = np.zeros_like(xv)
    for i in range(xv.size):
        e = np.zeros_like(xv)
        e.flat[i] = h
        numeric.flat[i] = (relu(xv + e).sum() - relu(xv - e).sum()) / (2 * h)
    np.testing.assert_allclose(analytic, numeric, atol=1e-8)
    np.testing.assert_array_equal(analytic, (xv > 0).astype(float))


def test_upsample_single_pixel():
    np.testing.assert_array_equal(interpolate_upsample(np.full((1, 1, 1), 5.0), 2, 2), np.full((1, 2, 2), 5.0))


def test_upsample_identity_when_same_size(rng):
    x = rng.normal(size=(1, 2, 2))
    np.testing.assert_array_equal(interpolate_upsample(x, 2, 2), x)


def test_upsample_matches_replication(rng):
    x = rng.normal(size=(1, 2, 2))
    np.testing.assert_array_equal(interpolate_upsample(x, 4, 4), upsample_replicate(x, 2, 2))


def test_upsample_rejects_unknown_mode(rng):
    with pytest.raises(ValueError):
        interpolate_upsample(rng.normal(size=(1, 2, 2)), 3, 3, mode="bilinear")


def test_affine_identity_and_bias(rng):
    x = rng.normal(size=4)
    np.testing.assert_array_equal(affine(x, np.eye(4), np.zeros(4)), x)
    b = rng.normal(size=3)
    np.testing.assert_array_equal(affine(x, np.zeros((3, 4)), b), b)


def test_affine_matches_loop_oracle(rng):
    x, w, b = rng.normal(size=4), rng.normal(size=(3, 4)), rng.normal(size=3)
    np.testing.assert_allclose(affine(x, w, b), affine_loops(x, w, b), atol=1e-12, rtol=0)


def test_affine_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        affine(rng.normal(size=4), rng.normal(size=(3, 5)), np.zeros(3))


def test_non_finite_input_rejected():
    with pytest.raises(NonFiniteError):
        relu(np.array([1.0, np.nan]))


# -- graph backward ---------------------------------------------------------------------


def _residual_graph(channels=2, train=False):
    g = ComputeGraph()
    x = g.input("x")
    h = g.conv2d(x, "c1", channels, channels, 3, pad=1)
    h = g.relu(g.batchnorm2d(h, "bn1", channels))
    h = g.batchnorm2d(g.conv2d(h, "c2", channels, channels, 3, pad=1), "bn2", channels)
    g.set_output("y", g.relu(g.add(h, x)))
    return g


def _zero_conv_params(g):
    p = init_parameters(g, np.random.default_rng(0))
    for name in p.tensors:
        if name.endswith(".weight"):
            p.tensors[name][:] = 0.0
    return p


def test_single_relu_backward():
    g = ComputeGraph()
    g.set_output("y", g.relu(g.input("x")))
    params = ModelParameters()
    g.forward(params, {"x": np.array([[2.0]])})
    backward(g, params, np.array([[1.0]]))
    assert g.input_grads["x"][0, 0] == 1.0


def test_backward_before_forward_errors():
    g = ComputeGraph()
    g.set_output("y", g.relu(g.input("x")))
    with pytest.raises(GraphError):
        g.backward(ModelParameters(), {"y": np.ones((1, 1))})


def test_residual_zero_convs_passes_identity(rng):
    g = _residual_graph()
    p = _zero_conv_params(g)
    x = rng.normal(size=(1, 2, 3, 3))
    y = g.forward(p, {"x": x}, train=False)["y"]
    np.testing.assert_allclose(y, np.maximum(x, 0), atol=1e-15)
    g.backward(p, {"y": np.ones_like(x)})
    np.testing.assert_array_equal(g.input_grads["x"], (x > 0).astype(float))


def test_eight_zero_residual_blocks_preserve_gradient_norm(rng):
    g = ComputeGraph()
    x0 = g.input("x")
    h = x0
    for b in range(8):
        c = g.conv2d(h, f"b{b}.c1", 3, 3, 3, pad=1)
        c = g.relu(g.batchnorm2d(c, f"b{b}.bn1", 3))
        c = g.batchnorm2d(g.conv2d(c, f"b{b}.c2", 3, 3, 3, pad=1), f"b{b}.bn2", 3)
        h = g.relu(g.add(c, h))
    g.set_output("y", h)
    p = _zero_conv_params(g)
    x = np.abs(rng.normal(size=(1, 3, 4, 4))) + 0.1
    g.forward(p, {"x": x}, train=False)
    seed = rng.normal(size=x.shape)
    g.backward(p, {"y": seed})
    assert np.linalg.norm(g.input_grads["x"]) == pytest.approx(np.linalg.norm(seed), rel=1e-14)


def test_unused_parameters_get_zero_gradient(rng):
    g = ComputeGraph()
    x = g.input("x")
    g.affine(x, "unused", 3, 2)
    g.set_output("y", g.affine(x, "used", 3, 2))
    p = init_parameters(g, rng)
    g.forward(p, {"x": rng.normal(size=(1, 3))})
    grads = g.backward(p, {"y": np.ones((1, 2))})
    assert np.all(grads["unused.weight"] == 0) and np.all(grads["unused.bias"] == 0)
    assert grads["used.weight"].shape == (2, 3)


def test_missing_parameter_rejected(rng):
    g = ComputeGraph()
    g.set_output("y", g.affine(g.input("x"), "fc", 3, 2))
    with pytest.raises(GraphError):
        g.forward(ModelParameters(), {"x": np.ones((1, 3))})


def _sum_of_squares(out):
    y = out["y"]
    return 0.5 * float(np.sum(y**2)), {"y": y}


def test_linear_loss_gradcheck_exact(rng):
    g = ComputeGraph()
    g.set_output("y", g.affine(g.input("x"), "fc", 4, 1))
    p = init_parameters(g, rng)
    x = rng.normal(size=(1, 4))
    err = finite_diff_check(g, p, lambda o: (float(o["y"].sum()), {"y": np.ones_like(o["y"])}), 1e-5,
                            {"x": x}, samples_per_param=None)
    assert err < 1e-10


def test_quadratic_loss_gradcheck(rng):
    g = ComputeGraph()
    g.set_output("y", g.affine(g.input("x"), "fc", 4, 3))
    p = init_parameters(g, rng)
    err = finite_diff_check(g, p, _sum_of_squares, 1e-5, {"x": rng.normal(size=(2, 4))}, samples_per_param=None)
    assert err < 1e-8


def test_gradcheck_rejects_non_scalar(rng):
    g = ComputeGraph()
    g.set_output("y", g.affine(g.input("x"), "fc", 4, 3))
    p = init_parameters(g, rng)
    with pytest.raises(ValueError):
        finite_diff_check(g, p, lambda o: (o["y"], {"y": np.ones_like(o["y"])}), 1e-5, {"x": np.ones((1, 4))})


@pytest.mark.parametrize("layer", ["conv", "conv_s2", "tconv", "tconv_s2", "bn_train", "bn_eval", "upsample", "gap",
                                   "residual"])
def test_every_layer_backward_matches_finite_differences(layer, rng):
    g = ComputeGraph()
    x = g.input("x")
    shape = (2, 2, 4, 4)
    if layer == "conv":
        y = g.conv2d(x, "c", 2, 3, 3, pad=1, bias=True)
    elif layer == "conv_s2":
        y = g.conv2d(x, "c", 2, 3, 3, stride=2, pad=1)
    elif layer == "tconv":
        y = g.transposed_conv2d(x, "t", 2, 3, 3, pad=0)
    elif layer == "tconv_s2":
        y = g.transposed_conv2d(x, "t", 2, 3, 3, stride=2, pad=1)
    elif layer in ("bn_train", "bn_eval"):
        y = g.batchnorm2d(x, "bn", 2)
    elif layer == "upsample":
        y = g.upsample(x, 7, 6)
    elif layer == "gap":
        y = g.flatten(g.global_avg_pool(x))
    else:
        h = g.relu(g.batchnorm2d(g.conv2d(x, "c1", 2, 2, 3, pad=1), "bn1", 2))
        y = g.relu(g.add(g.batchnorm2d(g.conv2d(h, "c2", 2, 2, 3, pad=1), "bn2", 2), x))
    g.set_output("y", y)
    p = init_parameters(g, rng)
    for name in p.tensors:
        p.tensors[name] = p.tensors[name] + 0.3 * rng.normal(size=p.tensors[name].shape)
    if layer == "bn_eval":
        p.buffers["bn.running_mean"] = rng.normal(size=2)
        p.buffers["bn.running_var"] = rng.uniform(0.5, 2.0, size=2)
    xv = rng.normal(size=shape)
    r = rng.normal(size=g.forward(p, {"x": xv})["y"].shape)

    def loss(out):
        return float(np.sum(r * out["y"]) + 0.25 * np.sum(out["y"] ** 2)), {"y": r + 0.5 * out["y"]}

    err = finite_diff_check(g, p, loss, 1e-5, {"x": xv}, train=(layer != "bn_eval"), samples_per_param=None,
                            check_inputs=True)
    assert err < 1e-4


def test_forward_nan_is_error(rng):
    g = ComputeGraph()
    g.set_output("y", g.affine(g.input("x"), "fc", 2, 2))
    p = init_parameters(g, rng)
    p.tensors["fc.weight"][0, 0] = np.inf
    with pytest.raises(NonFiniteError):
        g.forward(p, {"x": np.ones((1, 2))})


def test_init_bounds(rng):
    g = ComputeGraph()
    g.conv2d(g.input("x"), "c", 4, 2, 3)
    p = init_parameters(g, rng)
    assert np.all(np.abs(p.tensors["c.weight"]) <= np.sqrt(1 / 36))
