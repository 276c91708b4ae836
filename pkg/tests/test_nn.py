import mpmath
import numpy as np
import pytest

from erp_forge import nn
from erp_forge.errors import DegenerateBatch, InvalidSpec, NotForwarded, ShapeMismatch

from gradcheck import check_layer, numeric_grad, rel_error

F64 = np.float64
TOL = 1e-5


def away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-9) * margin, x)


# ---------------------------------------------------------------- forward


def test_conv2d_table_shapes(rng):
    c1 = nn.Conv((1, 10), 8, 1, rng=rng)
    y = c1.forward(rng.standard_normal((2, 6, 64, 1)).astype(np.float32))
    assert y.shape == (2, 6, 55, 8)
    c2 = nn.Conv((6, 1), 16, 8, rng=rng)
    assert c2.forward(y).shape == (2, 1, 55, 16)


def test_conv3d_table_shapes(rng):
    c1 = nn.Conv((1, 7, 3), 16, 1, "same", rng=rng)
    y = c1.forward(rng.standard_normal((2, 32, 64, 5, 1)).astype(np.float32))
    assert y.shape == (2, 32, 64, 5, 16)
    c2 = nn.Conv((32, 1, 1), 32, 16, rng=rng)
    assert c2.forward(y).shape == (2, 1, 64, 5, 32)


def test_conv_identity_and_zero(rng):
    c = nn.Conv((1, 1), 1, 1, rng=rng, dtype=F64)
    c.params["W"][:] = 1.0
    x = rng.standard_normal((3, 4, 5, 1))
    np.testing.assert_array_equal(c.forward(x), x)
    c3 = nn.Conv((1, 7, 3), 4, 2, "same", rng=rng, dtype=F64)
    assert np.all(c3.forward(np.zeros((2, 3, 8, 5, 2))) == 0)


def conv_oracle(x, w, b, pads):
    """Direct nested-loop cross-correlation on (N, C, T, D, F)."""
    xp = np.pad(x, [(0, 0), *pads, (0, 0)])
    kc, kt, kd, fi, fo = w.shape
    n, cp, tp, dp, _ = xp.shape
    out = np.zeros((n, cp - kc + 1, tp - kt + 1, dp - kd + 1, fo))
    for i in range(out.shape[1]):
        for j in range(out.shape[2]):
            for k in range(out.shape[3]):
                patch = xp[:, i:i + kc, j:j + kt, k:k + kd, :]
                out[:, i, j, k, :] = np.tensordot(patch, w, axes=([1, 2, 3, 4], [0, 1, 2, 3])) + b
    return out


@pytest.mark.parametrize("kernel, padding", [((2, 3, 2), "valid"), ((1, 4, 3), "same"), ((3, 1, 1), "valid")])
def test_conv3d_matches_loop_oracle(rng, kernel, padding):
    c = nn.Conv(kernel, 3, 2, padding, rng=rng, dtype=F64)
    c.params["b"][:] = rng.standard_normal(3)
    x = rng.standard_normal((2, 4, 6, 3, 2))
    want = conv_oracle(x, c.params["W"], c.params["b"], c._pads())
    np.testing.assert_allclose(c.forward(x), want, atol=1e-12)


def test_conv_shape_errors(rng):
    with pytest.raises(ShapeMismatch):
        nn.Conv((7, 1), 2, 1, rng=rng).forward(np.zeros((1, 6, 10, 1), np.float32))
    with pytest.raises(ShapeMismatch):
        nn.Conv((1, 1), 2, 3, rng=rng).forward(np.zeros((1, 6, 10, 1), np.float32))
    with pytest.raises(InvalidSpec):
        nn.Conv((0, 1), 2, 1, rng=rng)


def test_batchnorm_train_stats(rng):
    bn = nn.BatchNorm(3, dtype=F64)
    y = bn.forward(rng.standard_normal((8, 5, 3)) * 4 + 7, training=True)
    np.testing.assert_allclose(y.reshape(-1, 3).mean(axis=0), 0, atol=1e-6)
    np.testing.assert_allclose(y.reshape(-1, 3).var(axis=0), 1, atol=1e-6)


def test_batchnorm_infer_running_stats():
    bn = nn.BatchNorm(1, dtype=F64)
    bn.buffers["running_mean"][:] = 2.0
    bn.buffers["running_var"][:] = 4.0
    y = bn.forward(np.array([[4.0]]))
    assert y[0, 0] == pytest.approx(2 / np.sqrt(4 + 1e-5))
    # inference is a batch-independent affine map
    a = bn.forward(np.array([[1.0], [5.0]]))
    b = np.vstack([bn.forward(np.array([[1.0]])), bn.forward(np.array([[5.0]]))])
    np.testing.assert_array_equal(a, b)


def test_batchnorm_degenerate_batch():
    with pytest.raises(DegenerateBatch):
        nn.BatchNorm(2).forward(np.zeros((1, 4, 2), np.float32), training=True)


def gelu_ref(v):
    mpmath.mp.dps = 30
    v = mpmath.mpf(float(v))
    return float(0.5 * v * (1 + mpmath.tanh(mpmath.sqrt(2 / mpmath.pi) * (v + mpmath.mpf("0.044715") * v ** 3))))


def swish_ref(v):
    mpmath.mp.dps = 30
    v = mpmath.mpf(float(v))
    return float(v / (1 + mpmath.exp(-v)))


def test_activation_values():
    for kind in ("gelu", "swish", "relu"):
        assert nn.activation(kind, np.zeros(3)).tolist() == [0, 0, 0]
    assert abs(nn.activation("gelu", np.array([1.0]))[0] - 0.841192) < 1e-5
    assert abs(nn.activation("swish", np.array([1.0]))[0] - 0.731059) < 1e-5
    xs = np.linspace(-6, 6, 25)
    np.testing.assert_allclose(nn.activation("gelu", xs), [gelu_ref(v) for v in xs], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(nn.activation("swish", xs), [swish_ref(v) for v in xs], rtol=1e-12, atol=1e-14)
    x32 = xs.astype(np.float32)
    np.testing.assert_allclose(nn.activation("gelu", x32), [gelu_ref(v) for v in x32], rtol=1e-5, atol=1e-6)


def se_oracle(x, p):
    """Scalar-loop squeeze-and-excitation."""
    n, f = x.shape[0], x.shape[-1]
    out = np.empty_like(x)
    for i in range(n):
        s = [x[i, ..., j].mean() for j in range(f)]
        h = [max(0.0, sum(s[j] * p["W1"][j, k] for j in range(f)) + p["b1"][k]) for k in range(p["W1"].shape[1])]
        for j in range(f):
            e = sum(h[k] * p["W2"][k, j] for k in range(len(h))) + p["b2"][j]
            out[i, ..., j] = x[i, ..., j] / (1 + np.exp(-e))
    return out


def test_se_matches_oracle(rng):
    se = nn.SqueezeExcite(6, 3, rng=rng, dtype=F64)
    se.params["b1"][:] = rng.standard_normal(3)
    se.params["b2"][:] = rng.standard_normal(6)
    x = rng.standard_normal((2, 1, 5, 6))
    np.testing.assert_allclose(se.forward(x), se_oracle(x, se.params), atol=1e-8)


def test_se_gate_extremes(rng):
    se = nn.SqueezeExcite(4, 2, rng=rng, dtype=F64)
    x = rng.standard_normal((3, 1, 7, 4))
    se.params["W2"][:] = 0
    se.params["b2"][:] = 60.0
    np.testing.assert_allclose(se.forward(x), x, atol=1e-12)
    se.params["b2"][:] = -800.0
    np.testing.assert_allclose(se.forward(x), 0.0, atol=1e-300)
    with pytest.raises(ShapeMismatch):
        se.output_shape((1, 7, 5))


def test_gap_examples():
    gap = nn.GlobalAvgPool()
    np.testing.assert_array_equal(gap.forward(np.full((2, 3, 4, 5), 1.5)), 1.5)
    x = np.arange(6.0).reshape(2, 1, 1, 3)
    np.testing.assert_array_equal(gap.forward(x), x)
    ramp = np.arange(64 * 5 * 64, dtype=F64).reshape(1, 1, 64, 5, 64)
    # mean over (T, D) of t*320 + d*64 + f is 31.5*320 + 2*64 + f
    np.testing.assert_allclose(gap.forward(ramp).ravel(), 31.5 * 320 + 128 + np.arange(64))


def test_softmax_dense_dropout(rng):
    np.testing.assert_allclose(nn.softmax(np.zeros((1, 2))), [[0.5, 0.5]])
    z = rng.standard_normal((50, 2)) * 3
    p = nn.softmax(z)
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    z2 = z.copy()
    z2[:, 1] += 0.5
    assert np.all(nn.softmax(z2)[:, 1] > p[:, 1])
    d = nn.Dropout(0.0, rng=rng)
    x = rng.standard_normal((4, 3))
    np.testing.assert_array_equal(d.forward(x, training=True), x)
    d = nn.Dropout(0.25, rng=rng)
    y = d.forward(np.ones((2000, 10), np.float32), training=True)
    assert set(np.unique(y)) <= {0.0, np.float32(1 / 0.75)}
    assert abs(y.mean() - 1) < 0.05
    np.testing.assert_array_equal(d.forward(x), x)
    with pytest.raises(InvalidSpec):
        nn.Dropout(1.0, rng=rng)


# -------------------------------------------------------------- gradients


@pytest.mark.parametrize("kernel, padding, shape", [
    ((1, 3), "valid", (2, 3, 7, 2)),
    ((3, 1), "valid", (2, 3, 5, 2)),
    ((2, 3), "same", (2, 3, 6, 2)),
    ((1, 3, 3), "same", (2, 3, 6, 4, 2)),
    ((3, 1, 1), "valid", (2, 3, 5, 2, 2)),
    ((2, 2, 2), "valid", (2, 3, 4, 3, 1)),
])
def test_conv_gradients(rng, kernel, padding, shape):
    c = nn.Conv(kernel, 3, shape[-1], padding, rng=rng, dtype=F64)
    c.params["b"][:] = rng.standard_normal(3)
    errs = check_layer(c, rng.standard_normal(shape), rng)
    assert max(errs.values()) < TOL, errs


@pytest.mark.parametrize("shape", [(4, 3, 5, 3), (3, 2, 4, 2, 3)])
def test_batchnorm_gradients(rng, shape):
    bn = nn.BatchNorm(shape[-1], dtype=F64)
    bn.params["gamma"][:] = rng.uniform(0.5, 1.5, shape[-1])
    bn.params["beta"][:] = rng.standard_normal(shape[-1])
    errs = check_layer(bn, rng.standard_normal(shape) * 2 + 1, rng)
    assert max(errs.values()) < TOL, errs


@pytest.mark.parametrize("kind", ["relu", "gelu", "swish", "sigmoid"])
def test_activation_gradients(rng, kind):
    errs = check_layer(nn.Activation(kind), away_from_zero(rng, (3, 4, 5)) * 2, rng)
    assert max(errs.values()) < TOL, errs


def test_activation_grad_function(rng):
    x = away_from_zero(rng, (40,)) * 3
    dy = rng.standard_normal(40)
    for kind in ("relu", "gelu", "swish", "sigmoid"):
        num = numeric_grad(lambda: float(np.sum(dy * nn.activation(kind, x))), x)
        assert rel_error(nn.activation_grad(kind, x, dy), num) < TOL


@pytest.mark.parametrize("shape", [(3, 1, 6, 4), (2, 1, 5, 3, 4)])
def test_se_gradients(rng, shape):
    se = nn.SqueezeExcite(4, 3, rng=rng, dtype=F64)
    se.params["b1"][:] = rng.uniform(0.1, 0.5, 3)
    se.params["b2"][:] = rng.standard_normal(4)
    errs = check_layer(se, rng.standard_normal(shape), rng)
    assert max(errs.values()) < TOL, errs


def test_gap_flatten_dense_gradients(rng):
    assert check_layer(nn.GlobalAvgPool(), rng.standard_normal((2, 3, 4, 5)), rng)["input"] < TOL
    assert check_layer(nn.GlobalAvgPool(), rng.standard_normal((2, 1, 4, 3, 5)), rng)["input"] < TOL
    assert check_layer(nn.Flatten(), rng.standard_normal((2, 3, 4)), rng)["input"] < TOL
    d = nn.Dense(12, 5, rng=rng, dtype=F64)
    d.params["b"][:] = rng.standard_normal(5)
    errs = check_layer(d, rng.standard_normal((3, 1, 1, 12)), rng)
    assert max(errs.values()) < TOL, errs


def test_softmax_gradient(rng):
    assert check_layer(nn.Softmax(), rng.standard_normal((4, 2)), rng)["input"] < TOL


def test_dropout_gradient_uses_mask(rng):
    d = nn.Dropout(0.5, rng=np.random.default_rng(1))
    x = rng.standard_normal((6, 8))
    y = d.forward(x, training=True)
    dx = d.backward(np.ones_like(x))
    np.testing.assert_allclose(y, x * dx)


def small_net(rng, dtype=F64):
    layers = [
        nn.Conv((1, 3), 2, 1, rng=rng, dtype=dtype, name="c1"),
        nn.Activation("gelu", name="a1"),
        nn.BatchNorm(2, dtype=dtype, name="bn"),
        nn.Conv((3, 1), 4, 2, rng=rng, dtype=dtype, name="c2"),
        nn.SqueezeExcite(4, 2, rng=rng, dtype=dtype, name="se"),
        nn.Flatten(name="flat"),
        nn.Dense(16, 2, rng=rng, dtype=dtype, name="out"),
        nn.Softmax(name="sm"),
    ]
    return nn.Network(layers, (3, 6, 1), rng=rng)


def test_network_end_to_end_gradient(rng):
    net = small_net(rng)
    x = rng.standard_normal((4, 3, 6, 1))
    w = rng.standard_normal((4, 2))
    net.forward(x, training=True)
    dx = net.backward(w)
    grads = {(i, n): np.array(g) for i, n, _, g in net.parameters()}

    def objective():
        return float(np.sum(w * net.forward(x, training=True)))

    assert rel_error(dx, numeric_grad(objective, x)) < TOL
    for i, n, p, _ in net.parameters():
        assert rel_error(grads[(i, n)], numeric_grad(objective, p)) < TOL, (i, n)


def test_zero_upstream_gives_zero_grads(rng):
    net = small_net(rng)
    net.forward(rng.standard_normal((4, 3, 6, 1)), training=True)
    net.backward(np.zeros((4, 2)))
    for _, _, _, g in net.parameters():
        assert np.all(g == 0)


def test_linear_input_gradient_closed_form(rng):
    # sum of outputs of a 1D valid correlation: dL/dx[t] = sum of kernel taps covering t
    c = nn.Conv((1, 3), 1, 1, rng=rng, dtype=F64)
    k = c.params["W"].ravel()
    x = rng.standard_normal((1, 1, 8, 1))
    c.forward(x, training=True)
    dx = c.backward(np.ones((1, 1, 6, 1))).ravel()
    want = np.correlate(np.ones(6), k[::-1], mode="full")
    np.testing.assert_allclose(dx, want, atol=1e-12)


def test_backward_before_forward(rng):
    with pytest.raises(NotForwarded):
        small_net(rng).backward(np.zeros((1, 2)))


def test_forward_is_deterministic():
    a = small_net(np.random.default_rng(5), np.float32)
    b = small_net(np.random.default_rng(5), np.float32)
    x = np.random.default_rng(0).standard_normal((4, 3, 6, 1)).astype(np.float32)
    ya, yb = a.forward(x, training=True), b.forward(x, training=True)
    np.testing.assert_array_equal(ya, yb)
    np.testing.assert_array_equal(a.backward(np.ones_like(ya)), b.backward(np.ones_like(yb)))


def test_checkpoint_round_trip(tmp_path, rng):
    net = small_net(rng, np.float32)
    net.forward(rng.standard_normal((4, 3, 6, 1)).astype(np.float32), training=True)
    path = tmp_path / "w.erpw"
    nn.save_checkpoint(net, path)
    other = small_net(np.random.default_rng(99), np.float32)
    nn.load_checkpoint(other, path)
    for (k, a), b in zip(net.get_state().items(), other.get_state().values()):
        np.testing.assert_array_equal(a, b)
    nn.save_checkpoint(other, tmp_path / "w2.erpw")
    assert path.read_bytes() == (tmp_path / "w2.erpw").read_bytes()
    assert path.read_bytes()[:5] == b"ERPW\x01"


def test_checkpoint_shape_mismatch(tmp_path, rng):
    net = small_net(rng, np.float32)
    nn.save_checkpoint(net, tmp_path / "w.erpw")
    wrong = nn.Network([nn.Conv((1, 5), 2, 1, rng=rng, name="c1")], (3, 6, 1))
    with pytest.raises(ShapeMismatch):
        nn.load_checkpoint(wrong, tmp_path / "w.erpw")
    (tmp_path / "bad").write_bytes(b"NOPE")
    with pytest.raises(ValueError):
        nn.load_checkpoint(net, tmp_path / "bad")


@pytest.mark.parametrize("training", [False, True])
def test_network_inplace_layers_match_copying_forward(rng, training):
    layers = [
        nn.Activation("swish", name="a0"),
        nn.BatchNorm(1, dtype=np.float32, name="bn0"),
        nn.Conv((1, 3), 2, 1, rng=rng, dtype=np.float32, name="c1"),
        nn.Activation("gelu", name="a1"),
        nn.BatchNorm(2, dtype=np.float32, name="bn1"),
        nn.Activation("relu", name="a2"),
        nn.Flatten(name="flat"),
        nn.Dense(24, 2, rng=rng, dtype=np.float32, name="out"),
        nn.Softmax(name="sm"),
    ]
    net = nn.Network(layers, (3, 6, 1), rng=rng)
    x = rng.standard_normal((5, 3, 6, 1)).astype(np.float32)
    x0 = x.copy()
    got = net.forward(x, training=training)
    np.testing.assert_array_equal(x, x0)
    h = x0
    for layer in layers:
        h = layer.forward(h, training)
    np.testing.assert_array_equal(got, h)


def test_predict_batch_size_invariant_without_dense(rng):
    layers = [
        nn.Conv((1, 3), 2, 1, rng=rng, dtype=np.float32, name="c1"),
        nn.Activation("gelu", name="a1"),
        nn.BatchNorm(2, dtype=np.float32, name="bn1"),
        nn.GlobalAvgPool(name="gap"),
        nn.Softmax(name="sm"),
    ]
    net = nn.Network(layers, (3, 6, 1), rng=rng)
    x = rng.standard_normal((70, 3, 6, 1)).astype(np.float32)
    np.testing.assert_array_equal(net.predict(x, 7), net.predict(x, 256))
