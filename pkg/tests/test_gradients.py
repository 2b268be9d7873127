"""Finite-difference checks for every hand-written backward pass."""

import numpy as np
import pytest
import scipy.sparse as sp

from conftest import random_graph
from defense_vgae.gcn import gcn_loss_and_grads, init_gcn
from defense_vgae.graph import normalize_adjacency
from defense_vgae.nn import make_rng, masked_cross_entropy, relu, relu_backward, softmax_rows, spmm
from defense_vgae.vgae import init_vgae, reconstruction_target, vgae_objective

H = 1e-4
TOL = 1e-4


def check_gradient(loss_fn, param, analytic, rng, n_coords=100, atol=1e-9):
    """Compare ``analytic`` against central differences of ``loss_fn`` at up to ``n_coords`` entries of ``param``."""
    coords = list(np.ndindex(*param.shape))
    if len(coords) > n_coords:
        coords = [coords[i] for i in rng.choice(len(coords), n_coords, replace=False)]
    worst = 0.0
    for idx in coords:
        old = param[idx]
        param[idx] = old + H
        up = loss_fn()
        param[idx] = old - H
        down = loss_fn()
        param[idx] = old
        num = (up - down) / (2 * H)
        diff = abs(num - analytic[idx])
        if diff > atol:
            worst = max(worst, diff / max(abs(num), abs(analytic[idx])))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def test_spmm_backward(rng):
    a = sp.csr_matrix(rng.standard_normal((8, 8)) * (rng.random((8, 8)) < 0.4))
    b = rng.standard_normal((8, 5))
    r = rng.standard_normal((8, 5))
    # L = sum(R * (A B)) => dL/dB = A^T R
    analytic = spmm(a.T.tocsr(), r)
    assert check_gradient(lambda: float(np.sum(r * spmm(a, b))), b, analytic, rng) < TOL


def test_relu_backward_gradient(rng):
    x = rng.standard_normal((10, 10))
    x[np.abs(x) < 1e-2] = 0.5  # stay away from the kink
    r = rng.standard_normal((10, 10))
    analytic = relu_backward(x, r)
    assert check_gradient(lambda: float(np.sum(r * relu(x))), x, analytic, rng) < TOL


def test_softmax_cross_entropy_gradient(rng):
    logits = rng.standard_normal((10, 4))
    labels = rng.integers(0, 4, size=10)
    mask = np.arange(0, 10, 2)
    _, analytic = masked_cross_entropy(logits, labels, mask)
    worst = check_gradient(lambda: masked_cross_entropy(logits, labels, mask)[0], logits, analytic, rng)
    assert worst < TOL


def test_softmax_jacobian_vector_product(rng):
    x = rng.standard_normal((6, 5))
    r = rng.standard_normal((6, 5))
    p = softmax_rows(x)
    analytic = p * (r - np.sum(r * p, axis=1, keepdims=True))
    assert check_gradient(lambda: float(np.sum(r * softmax_rows(x))), x, analytic, rng) < TOL


@pytest.mark.parametrize("activation", ["relu", "linear"])
@pytest.mark.parametrize("weight_decay", [0.0, 5e-4])
def test_gcn_whole_model_gradient(activation, weight_decay, rng):
    g = random_graph(6, 4, 2, p=0.4, seed=5)
    a_hat = normalize_adjacency(g)
    model = init_gcn(4, 3, 2, seed=2, activation=activation)
    x = g.features
    mask = np.arange(6)

    def loss():
        return gcn_loss_and_grads(model, a_hat, x, g.labels, mask, weight_decay)[0]

    _, g0, g1 = gcn_loss_and_grads(model, a_hat, x, g.labels, mask, weight_decay)
    assert check_gradient(loss, model.w0.value, g0, rng) < TOL
    assert check_gradient(loss, model.w1.value, g1, rng) < TOL


def test_vgae_whole_model_gradient(rng):
    g = random_graph(5, 3, 2, p=0.5, seed=8)
    a_hat = normalize_adjacency(g)
    target = reconstruction_target(g.adjacency)
    model = init_vgae(3, 4, 2, make_rng(4))
    noise = make_rng(5).standard_normal((5, 2))
    x = g.features

    def loss():
        return vgae_objective(model, a_hat, x, target, noise)[0].total

    _, grads = vgae_objective(model, a_hat, x, target, noise)
    for param, grad in zip(model.parameters(), grads):
        assert check_gradient(loss, param.value, grad, rng) < TOL


def test_vgae_gradient_independent_of_block_size(rng):
    g = random_graph(9, 3, 2, p=0.4, seed=1)
    a_hat = normalize_adjacency(g)
    target = reconstruction_target(g.adjacency)
    model = init_vgae(3, 4, 2, make_rng(0))
    noise = make_rng(1).standard_normal((9, 2))
    loss_a, grads_a = vgae_objective(model, a_hat, g.features, target, noise, block_rows=2)
    loss_b, grads_b = vgae_objective(model, a_hat, g.features, target, noise, block_rows=512)
    assert loss_a.total == pytest.approx(loss_b.total, rel=1e-13)
    for ga, gb in zip(grads_a, grads_b):
        np.testing.assert_allclose(ga, gb, rtol=1e-12, atol=1e-15)
