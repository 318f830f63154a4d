import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fwicert.bounds import (GenBoundInputs, NoiseSpec, cor2_condition, draw_noise,
                            empirical_loss_gain, fact3_witness, generalization_bound,
                            greedy_covering_number, layer_operator, pairwise_distances,
                            rb_mae_bound, rb_mse_bound, weight_norm_products, certify)
from fwicert.linop import ConvGeometry
from fwicert.network import (DenseGeometry, LayerSpec, NetworkParams, NetworkSpec, init_params,
                             predict)
from fwicert.train import per_sample_loss
from oracles import jacobi_singular_values, minimal_cover_size


def dense_net(weights):
    layers = tuple(LayerSpec("dense", DenseGeometry(w.shape[1], w.shape[0]), "relu") for w in weights)
    spec = NetworkSpec(layers, (weights[0].shape[1],), (weights[-1].shape[0],))
    return spec, NetworkParams(list(weights), [np.zeros(w.shape[0]) for w in weights])


def test_single_dense_layer_norms():
    spec, params = dense_net([np.diag([3.0, 2.0])])
    n = weight_norm_products(params, spec)
    assert n.frob_product == pytest.approx(math.sqrt(13))
    assert n.spec_product == pytest.approx(3.0, rel=1e-9)


def test_product_of_two_layers():
    w1 = np.array([[3.0, 0.0]])
    w2 = np.array([[4.0], [0.0]])
    spec, params = dense_net([w1, w2])
    assert weight_norm_products(params, spec).frob_product == pytest.approx(12.0)
    assert rb_mae_bound(12.0, 0.1) == pytest.approx(1.2)
    assert rb_mae_bound(12.0, 0.0) == 0.0


def test_conv_operator_spectral_norm_matches_svd_oracle():
    g = ConvGeometry(6, 5, 2, 3, 3, 3, 2, 1)
    spec = NetworkSpec((LayerSpec("conv", g, "leaky_relu", 0.2),), g.input_shape, g.output_shape)
    params = init_params(spec, 3)
    n = weight_norm_products(params, spec)
    sv = jacobi_singular_values(layer_operator(params.weights[0], spec.layers[0]))
    assert n.layer_spec[0] == pytest.approx(max(sv), abs=1e-6)
    assert n.frob_product == pytest.approx(math.sqrt(np.sum(np.square(sv))), rel=1e-12)
    # kernel norm and operator norm differ once windows overlap or pad
    assert n.frob_kernel_product != pytest.approx(n.frob_product)


def test_rb_mse_hand_values():
    stated, solved = rb_mse_bound(1.2, 0.3, 9, 0.5, 2.0)
    assert stated == pytest.approx(0.44)
    assert solved == pytest.approx(0.25)
    assert rb_mse_bound(1.2, 0.0, 9, 0.5, 2.0) == (0.0, 0.0)
    assert rb_mse_bound(1.0, 3.0, 9, 0.5, 1.0)[1] == math.inf


def test_cor2_condition():
    t = np.zeros((2, 3))
    assert cor2_condition(t, t, t) == 0.0
    assert cor2_condition(np.array(0.8), np.array(0.7), np.array(0.1)) == 1.0
    rng = np.random.default_rng(0)
    p, q, y = rng.standard_normal((3, 5, 7))
    count = 0
    for a, b, c in zip(p.ravel(), q.ravel(), y.ravel()):
        count += abs(a + b - 2 * c) >= 1
    assert cor2_condition(p, q, y) == count / 35
    with pytest.raises(ValueError):
        cor2_condition(p, q, y[:2])


def test_fact3_counterexample():
    lhs, rhs = fact3_witness(np.array([1.0, 2.0]))
    assert lhs == pytest.approx(15.0) and rhs == pytest.approx(5.0)
    rng = np.random.default_rng(1)
    x1 = rng.standard_normal(6) * 3
    x2 = rng.standard_normal(6) * 0.1
    assert np.linalg.norm(x1) > np.linalg.norm(x2)
    lhs, rhs = fact3_witness(x1, x2)
    assert lhs > rhs


def test_noise_ball_and_snr():
    x = np.ones((4, 5))
    for i in range(50):
        n = draw_noise(x, NoiseSpec(eta=0.3), 0, i)
        assert np.linalg.norm(n) <= 0.3
    assert np.array_equal(draw_noise(x, NoiseSpec(eta=0.3), 0, 7), draw_noise(x, NoiseSpec(eta=0.3), 0, 7))
    assert not draw_noise(x, NoiseSpec(snr_db=math.inf), 0, 0).any()
    big = np.ones(200_000)
    n = draw_noise(big, NoiseSpec(snr_db=10.0), 2, 0)
    assert 10 * np.log10(1.0 / np.mean(n * n)) == pytest.approx(10.0, abs=0.05)
    with pytest.raises(ValueError):
        NoiseSpec(eta=1.0, snr_db=3.0)
    with pytest.raises(ValueError):
        draw_noise(np.zeros(3), NoiseSpec(snr_db=0.0), 0, 0)


def small_net(seed=0):
    g = ConvGeometry(6, 6, 1, 2, 3, 3, 2, 1)
    spec = NetworkSpec((LayerSpec("conv", g, "leaky_relu", 0.1),
                        LayerSpec("dense", DenseGeometry(g.output_size, 4))), (1, 6, 6), (4,))
    rng = np.random.default_rng(seed)
    return spec, init_params(spec, seed), (rng.standard_normal((5, 1, 6, 6)), rng.standard_normal((5, 4)))


def test_loss_gain_zero_noise_and_recompute():
    spec, params, data = small_net()
    zero = empirical_loss_gain(params, spec, data, "mae", NoiseSpec(eta=0.0), 20)
    assert not zero.gains.any()
    g = empirical_loss_gain(params, spec, data, "mse", NoiseSpec(eta=0.5, seed=3), 40, chunk=8)
    again = empirical_loss_gain(params, spec, data, "mse", NoiseSpec(eta=0.5, seed=3), 40, chunk=8)
    assert g.gains.tobytes() == again.gains.tobytes()
    # replay the chunk holding draws 8..15 with two separate forward passes
    draws = np.arange(8, 16)
    items = draws % 5
    x, y = data
    noise = np.stack([draw_noise(x[i], NoiseSpec(eta=0.5), 3, d) for i, d in zip(items, draws)])
    clean = per_sample_loss(predict(params, spec, x[items]), y[items], "mse")
    noisy = per_sample_loss(predict(params, spec, x[items] + noise), y[items], "mse")
    assert np.abs(noisy - clean).tobytes() == g.gains[8:16].tobytes()
    assert g.max == g.gains.max()


def test_loss_gain_independent_of_worker_count():
    spec, params, data = small_net(1)
    a = empirical_loss_gain(params, spec, data, "mae", NoiseSpec(eta=1.0), 30, chunk=4, workers=1)
    b = empirical_loss_gain(params, spec, data, "mae", NoiseSpec(eta=1.0), 30, chunk=4, workers=2)
    assert a.gains.tobytes() == b.gains.tobytes()


def test_certify_small_net_has_no_violation():
    spec, params, data = small_net(2)
    for eta in (0.01, 0.1, 1.0):
        r = certify(params, spec, data, eta, 300, seed=1)
        assert not r.violation
        assert r.empirical_gain_max <= r.rb_mae
        assert r.rb_mae == pytest.approx(r.frob_product * eta)
    text = r.to_text()
    assert "rb_mae = " in text and "violation = False" in text
    assert r.csv_header().startswith("eta,frob_product,spec_product,rb_mae")


def test_spectral_product_bounds_output_change():
    spec, params, _ = small_net(3)
    bound = weight_norm_products(params, spec).spec_product
    rng = np.random.default_rng(5)
    y1, y2 = rng.standard_normal((2, 200, 1, 6, 6))
    diff = np.linalg.norm(predict(params, spec, y1) - predict(params, spec, y2), axis=1)
    assert np.all(diff <= bound * np.linalg.norm((y1 - y2).reshape(200, -1), axis=1))


def test_cover_trivial_cases():
    assert greedy_covering_number(np.ones((1, 3)), 0.5) == (1, [0])
    pts = np.random.default_rng(0).standard_normal((12, 3))
    diam = pairwise_distances(pts).max()
    assert greedy_covering_number(pts, diam)[0] == 1
    with pytest.raises(ValueError):
        greedy_covering_number(pts, 0.0)


def test_cover_on_a_line_matches_exhaustive_search():
    pts = np.arange(8.0)[:, None]
    k, centers = greedy_covering_number(pts, 1.0)
    assert k == minimal_cover_size(pts, 1.0) == 3


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10), st.integers(0, 10 ** 6), st.floats(0.3, 2.5))
def test_cover_is_valid_and_not_below_optimum(n, seed, radius):
    pts = np.random.default_rng(seed).standard_normal((n, 2))
    k, centers = greedy_covering_number(pts, radius)
    d = pairwise_distances(pts)
    assert np.all(d[:, centers].min(axis=1) <= radius)
    assert k == len(set(centers))
    assert k >= minimal_cover_size(pts, radius)


def hand_inputs(**kw):
    base = dict(delta=0.1, epsilon=0.05, eta=0.01, lipschitz=1.0, max_loss=1.0, n_train=100,
                cover_count=4, norm_product=2.0)
    base.update(kw)
    return GenBoundInputs(**base)


def test_generalization_bound_hand_example():
    r = generalization_bound(hand_inputs())
    assert r.term1 == pytest.approx(0.36)
    assert r.term2 == pytest.approx(math.sqrt((8 * math.log(2) + math.log(20)) / 100))
    assert r.bound == pytest.approx(0.65225, abs=1e-5)
    assert r.bound == r.term1 + r.term2
    lemma = generalization_bound(hand_inputs(confidence_form="lemma"))
    assert lemma.term2 > r.term2


def test_generalization_bound_degenerate_and_monotone():
    assert generalization_bound(hand_inputs(max_loss=0.0, delta=0.0, eta=0.0)).bound == 0.0
    base = generalization_bound(hand_inputs())
    doubled = generalization_bound(hand_inputs(n_train=200))
    assert doubled.term2 == pytest.approx(base.term2 / math.sqrt(2))
    for key, value in [("cover_count", 8), ("max_loss", 2.0), ("delta", 0.2), ("eta", 0.02),
                       ("lipschitz", 2.0), ("norm_product", 3.0)]:
        assert generalization_bound(hand_inputs(**{key: value})).bound > base.bound
    with pytest.raises(ValueError):
        hand_inputs(epsilon=1.0)
    with pytest.raises(ValueError):
        hand_inputs(n_train=0)
