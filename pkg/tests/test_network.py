import numpy as np
import pytest

from fwicert.linop import ConvGeometry, ShapeError, conv2d_direct, tconv2d_direct
from fwicert.network import (
    DenseGeometry, LayerSpec, ModelFormatError, ModelVersionError, NetworkParams,
    NetworkSpec, backward, forward, init_params, load_model, model_bytes,
    reference_spec, save_model,
)
from oracles import central_difference


def small_net(kind, activation="leaky_relu"):
    if kind == "conv":
        g = ConvGeometry(5, 4, 2, 3, 3, 2, 2, 1)
        layers = (LayerSpec("conv", g, activation, 0.1),)
        return NetworkSpec(layers, g.input_shape, g.output_shape)
    if kind == "tconv":
        g = ConvGeometry(5, 6, 2, 3, 3, 3, 2, 1)
        layers = (LayerSpec("tconv", g, activation, 0.1),)
        return NetworkSpec(layers, g.output_shape, g.input_shape)
    layers = (LayerSpec("dense", DenseGeometry(6, 4), activation, 0.1),)
    return NetworkSpec(layers, (6,), (4,))


def mixed_net():
    g1 = ConvGeometry(6, 6, 1, 2, 3, 3, 2, 1)
    g2 = ConvGeometry(6, 6, 2, 2, 2, 2, 2, 0)
    layers = (
        LayerSpec("conv", g1, "leaky_relu", 0.1),
        LayerSpec("dense", DenseGeometry(18, 8), "relu"),
        LayerSpec("dense", DenseGeometry(8, 18), "leaky_relu", 0.2),
        LayerSpec("tconv", g2, "identity"),
    )
    return NetworkSpec(layers, (1, 6, 6), (2, 6, 6))


def relative_error(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / scale


def grad_check(spec, seed):
    rng = np.random.default_rng(seed)
    params = init_params(spec, seed)
    for b in params.biases:
        b[:] = rng.standard_normal(b.shape)
    for i, layer in enumerate(spec.layers):
        if layer.kind != "dense":
            params.biases[i][:] = 0.0
    x = rng.standard_normal((2,) + spec.input_shape)
    r = rng.standard_normal((2,) + spec.output_shape)

    def objective(p, xx):
        return float(np.sum(r * forward(p, spec, xx)[0]))

    _, cache = forward(params, spec, x)
    grads, gx = backward(params, spec, cache, r)
    errors = [relative_error(gx, central_difference(lambda v: objective(params, v), x))]
    for i, layer in enumerate(spec.layers):
        def fw(w, i=i):
            p = params.copy()
            p.weights[i] = w
            return objective(p, x)
        errors.append(relative_error(grads.weights[i], central_difference(fw, params.weights[i])))
        if layer.kind == "dense":
            def fb(b, i=i):
                p = params.copy()
                p.biases[i] = b
                return objective(p, x)
            errors.append(relative_error(grads.biases[i], central_difference(fb, params.biases[i])))
        else:
            assert not grads.biases[i].any()
    return max(errors)


@pytest.mark.parametrize("kind", ["conv", "tconv", "dense"])
@pytest.mark.parametrize("activation", ["identity", "relu", "leaky_relu"])
def test_gradients_per_layer_kind(kind, activation):
    for seed in range(3):
        assert grad_check(small_net(kind, activation), seed) < 1e-6


def test_gradients_mixed_network():
    assert grad_check(mixed_net(), 11) < 1e-6


def test_single_one_by_one_conv_doubles():
    g = ConvGeometry(3, 3, 1, 1, 1, 1)
    spec = NetworkSpec((LayerSpec("conv", g, "identity"),), (1, 3, 3), (1, 3, 3))
    params = NetworkParams([np.full((1, 1, 1, 1), 2.0)], [np.zeros(1)])
    x = np.arange(9.0).reshape(1, 3, 3)
    out, _ = forward(params, spec, x)
    np.testing.assert_array_equal(out, 2 * x)


def test_zero_weights_give_zero_output():
    spec = reference_spec((3, 16, 8), (8, 8), widths=(2, 2, 2, 2))
    params = init_params(spec, 0)
    params = NetworkParams([np.zeros_like(w) for w in params.weights], params.biases)
    out, _ = forward(params, spec, np.ones(spec.input_shape))
    assert out.shape == (8, 8)
    assert not out.any()


def test_two_layer_net_matches_hand_composition():
    g1 = ConvGeometry(6, 6, 1, 2, 2, 2, 2, 0)
    g2 = ConvGeometry(6, 6, 1, 2, 2, 2, 2, 0)
    spec = NetworkSpec((LayerSpec("conv", g1, "relu"), LayerSpec("tconv", g2, "identity")),
                       (1, 6, 6), (1, 6, 6))
    params = init_params(spec, 4)
    x = np.random.default_rng(1).standard_normal((1, 6, 6))
    h = np.maximum(conv2d_direct(x, params.weights[0], g1), 0.0)
    expected = tconv2d_direct(h, params.weights[1], g2)
    np.testing.assert_array_equal(forward(params, spec, x)[0], expected)


def test_linear_net_input_gradient_is_transpose():
    spec = NetworkSpec((LayerSpec("dense", DenseGeometry(5, 3)),), (5,), (3,))
    params = init_params(spec, 2)
    _, cache = forward(params, spec, np.ones(5))
    g = np.array([1.0, -2.0, 0.5])
    grads, gx = backward(params, spec, cache, g)
    np.testing.assert_array_equal(gx, params.weights[0].T @ g)
    _, gx0 = backward(params, spec, cache, np.zeros(3))
    assert not gx0.any()


def test_stale_cache_rejected():
    spec = small_net("dense")
    params = init_params(spec, 0)
    _, cache = forward(params, spec, np.ones(6))
    with pytest.raises(ValueError):
        backward(params.copy(), spec, cache, np.ones(4))


def test_init_determinism_and_mean():
    spec = reference_spec((3, 16, 8), (8, 8), widths=(2, 4, 4, 8))
    a, b, c = init_params(spec, 0), init_params(spec, 0), init_params(spec, 1)
    for wa, wb in zip(a.weights, b.weights):
        assert wa.tobytes() == wb.tobytes()
    assert any(not np.array_equal(wa, wc) for wa, wc in zip(a.weights, c.weights))
    for i in range(spec.depth):
        means = np.array([init_params(spec, s).weights[i].mean() for s in range(10)])
        draws = np.concatenate([init_params(spec, s).weights[i].ravel() for s in range(10)])
        stderr = draws.std() / np.sqrt(draws.size)
        assert abs(means.mean()) <= 3 * stderr


def test_reference_architecture_shapes():
    spec = reference_spec()
    assert spec.input_shape == (3, 64, 32)
    assert spec.output_shape == (32, 32)
    assert [l.kind for l in spec.layers] == ["conv"] * 4 + ["tconv"] * 4
    assert spec.layers[-1].activation == "identity"
    assert all(l.activation_lipschitz == 1.0 for l in spec.layers)
    out, _ = forward(init_params(spec, 0), spec, np.zeros((2,) + spec.input_shape))
    assert out.shape == (2, 32, 32)


def test_positive_homogeneity():
    spec = reference_spec((3, 16, 8), (8, 8), widths=(2, 4, 4, 8))
    params = init_params(spec, 5)
    y = np.random.default_rng(0).standard_normal(spec.input_shape)
    base = forward(params, spec, y)[0]
    for c in (0.5, 3.0):
        np.testing.assert_allclose(forward(params, spec, c * y)[0], c * base, rtol=1e-12, atol=1e-14)


def test_save_load_round_trip(tmp_path):
    spec = mixed_net()
    params = init_params(spec, 3)
    params.biases[1][:] = 0.25
    path = tmp_path / "m.fwb"
    save_model(spec, params, path)
    spec2, params2 = load_model(path)
    assert spec2 == spec
    for a, b in zip(params.weights + params.biases, params2.weights + params2.biases):
        assert a.tobytes() == b.tobytes()
    assert model_bytes(spec2, params2) == path.read_bytes()


def test_corrupt_files(tmp_path):
    spec = small_net("conv")
    data = model_bytes(spec, init_params(spec, 0))
    p = tmp_path / "bad.fwb"
    p.write_bytes(data[: len(data) // 2])
    with pytest.raises(ModelFormatError):
        load_model(p)
    p.write_bytes(b"XWB1" + data[4:])
    with pytest.raises(ModelFormatError, match="magic"):
        load_model(p)
    p.write_bytes(data[:4] + (7).to_bytes(4, "little") + data[8:])
    with pytest.raises(ModelVersionError):
        load_model(p)
    flipped = bytearray(data)
    flipped[-20] ^= 0xFF
    p.write_bytes(bytes(flipped))
    with pytest.raises(ModelFormatError, match="CRC"):
        load_model(p)


def test_shape_mismatch():
    spec = small_net("dense")
    with pytest.raises(ShapeError):
        forward(init_params(spec, 0), spec, np.ones(5))
