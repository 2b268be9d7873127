"""Variational graph autoencoder with a shared-first-layer GCN encoder and inner-product decoder.

The KL term is the closed form for ``KL[N(mu, sigma^2) || N(0, I)]``,
``0.5 * sum(mu^2 + sigma^2 - 2 log sigma - 1)``, and the reconstruction
term is a positively re-weighted binary cross-entropy against ``A + I``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, TransformerMixin

from .gcn import as_operand
from .graph import Graph, normalize_adjacency
from .nn import (
    SIGMOID_EPS,
    NonFiniteError,
    Parameter,
    Rng,
    adam_step,
    check_finite,
    glorot_init,
    make_rng,
    relu,
    relu_backward,
    sigmoid,
    spmm,
)
from .validation import check_graph, check_is_fitted

logger = logging.getLogger(__name__)

BLOCK_ROWS = 512
# |logit| beyond which the clamped sigmoid is flat.
# eps**40 = 1e-280 is still a normal float64.
_LOG_GROUP = 40
_CLAMP_LOGIT = float(np.log((1.0 - SIGMOID_EPS) / SIGMOID_EPS))


@dataclass
class VgaeModel:
    w0: Parameter
    w_mu: Parameter
    w_sigma: Parameter

    def __post_init__(self):
        if self.w_mu.shape != self.w_sigma.shape:
            raise ValueError("w_mu and w_sigma must share a shape")
        if self.w0.shape[1] != self.w_mu.shape[0]:
            raise ValueError("hidden width mismatch between w0 and the output heads")

    @property
    def hidden_dim(self) -> int:
        return self.w0.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.w_mu.shape[1]

    def parameters(self) -> tuple[Parameter, Parameter, Parameter]:
        return self.w0, self.w_mu, self.w_sigma

    def to_dict(self) -> dict:
        names = ("w0", "w_mu", "w_sigma")
        return {
            "kind": "vgae",
            "shapes": {n: list(p.shape) for n, p in zip(names, self.parameters())},
            "weights": {n: p.value.ravel().tolist() for n, p in zip(names, self.parameters())},
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "VgaeModel":
        if payload.get("kind") != "vgae":
            raise ValueError("checkpoint is not a VGAE model")
        shapes, weights = payload["shapes"], payload["weights"]
        params = [
            Parameter(np.asarray(weights[n], dtype=np.float64).reshape(shapes[n])) for n in ("w0", "w_mu", "w_sigma")
        ]
        return cls(*params)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "VgaeModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class LatentState:
    mu: np.ndarray
    log_sigma: np.ndarray
    z: np.ndarray
    noise: np.ndarray


@dataclass
class VgaeLoss:
    reconstruction: float
    kl: float
    total: float
    pos_weight: float
    norm: float


def init_vgae(n_features: int, hidden_dim: int, latent_dim: int, rng: Rng) -> VgaeModel:
    return VgaeModel(
        Parameter(glorot_init(n_features, hidden_dim, rng)),
        Parameter(glorot_init(hidden_dim, latent_dim, rng)),
        Parameter(glorot_init(hidden_dim, latent_dim, rng)),
    )


def _encode_cached(model: VgaeModel, a_hat, x):
    if x.shape[1] != model.w0.shape[0]:
        raise ValueError(f"features have {x.shape[1]} columns, model expects {model.w0.shape[0]}")
    if a_hat.shape[1] != x.shape[0]:
        raise ValueError(f"adjacency {a_hat.shape} does not match {x.shape[0]} feature rows")
    xw = spmm(x, model.w0.value) if sp.issparse(x) else x @ model.w0.value
    hidden = spmm(a_hat, xw)
    prop = spmm(a_hat, relu(hidden))  # Â h, shared by both heads
    mu = prop @ model.w_mu.value
    log_sigma = prop @ model.w_sigma.value
    return mu, log_sigma, hidden, prop


def encode(model: VgaeModel, a_hat, x) -> tuple[np.ndarray, np.ndarray]:
    """Posterior parameters ``(mu, log_sigma)``, each N x F."""
    mu, log_sigma, _, _ = _encode_cached(model, a_hat, x)
    return mu, log_sigma


def reparameterize(mu: np.ndarray, log_sigma: np.ndarray, rng: Rng) -> LatentState:
    if mu.shape != log_sigma.shape:
        raise ValueError("mu and log_sigma shapes differ")
    noise = rng.standard_normal(mu.shape)
    return LatentState(mu, log_sigma, mu + np.exp(log_sigma) * noise, noise)


def inner_product_logits(z: np.ndarray) -> np.ndarray:
    s = z @ z.T
    # Averaging with the transpose makes the result symmetric bit-for-bit.
    return 0.5 * (s + s.T)


def decode(z: np.ndarray) -> np.ndarray:
    """Dense edge probabilities ``sigmoid(z z^T)``."""
    return sigmoid(inner_product_logits(z))


def reconstruction_target(adjacency) -> sp.csr_matrix:
    n = adjacency.shape[0]
    target = sp.csr_matrix(adjacency, dtype=np.float64) + sp.identity(n, format="csr")
    target = target.tocsr()
    target.data[:] = 1.0
    target.sort_indices()
    return target


def loss_weights(target) -> tuple[float, float]:
    """``(pos_weight, norm)`` for a binary target with ``nnz`` positives."""
    n = target.shape[0]
    nnz = target.nnz if sp.issparse(target) else int(np.count_nonzero(target))
    if nnz == 0:
        raise ValueError("reconstruction target has no positive entries")
    total = float(n) * n
    if nnz >= total:
        raise ValueError("reconstruction target has no negative entries")
    return (total - nnz) / nnz, total / (2.0 * (total - nnz))


def kl_term(mu: np.ndarray, log_sigma: np.ndarray) -> float:
    """``(1/N) * sum_i sum_f 0.5 (mu^2 + sigma^2 - 2 log sigma - 1)``."""
    n = mu.shape[0]
    return float(0.5 * np.sum(mu**2 + np.exp(2.0 * log_sigma) - 2.0 * log_sigma - 1.0) / n)


def vgae_loss(probs: np.ndarray, target, mu: np.ndarray, log_sigma: np.ndarray) -> VgaeLoss:
    """Loss value from a dense probability matrix (reference path, no gradients)."""
    t = target.toarray() if sp.issparse(target) else np.asarray(target, dtype=np.float64)
    n = t.shape[0]
    pos_weight, norm = loss_weights(target)
    p = np.clip(probs, SIGMOID_EPS, 1.0 - SIGMOID_EPS)
    rc = -float(np.sum(pos_weight * t * np.log(p) + (1.0 - t) * np.log(1.0 - p))) / (n * n)
    kl = kl_term(mu, log_sigma)
    return VgaeLoss(rc, kl, norm * rc + kl / n, pos_weight, norm)


def _sum_log(q: np.ndarray) -> float:
    """``sum(log(q))`` for ``q`` in ``[eps, 1]``, taking logs of partial products.

    Groups of ``_LOG_GROUP`` factors stay above the float64 underflow limit.
    """
    flat = q.reshape(q.shape[0], -1)
    starts = np.arange(0, flat.shape[1], _LOG_GROUP)
    return float(np.sum(np.log(np.multiply.reduceat(flat, starts, axis=1))))


def _reconstruction_blocked(z: np.ndarray, target: sp.csr_matrix, pos_weight: float, block_rows: int):
    """Weighted BCE sum over all N^2 entries and ``d sum / d S`` folded into ``d/dz``.

    Works on row blocks of ``S = z z^T`` so peak memory is ``block_rows x N``.
    Every entry is first treated as a negative; the sparse positives are then
    corrected in place, which avoids densifying the target.
    """
    n = z.shape[0]
    total = 0.0
    grad_z = np.empty_like(z)
    lo, hi = SIGMOID_EPS, 1.0 - SIGMOID_EPS
    for r0 in range(0, n, block_rows):
        r1 = min(n, r0 + block_rows)
        s = z[r0:r1] @ z.T
        clamped = None
        if s.max() > _CLAMP_LOGIT or s.min() < -_CLAMP_LOGIT:
            clamped = np.abs(s) > _CLAMP_LOGIT
        with np.errstate(over="ignore"):
            p = np.exp(np.negative(s, out=s), out=s)
        p += 1.0
        np.reciprocal(p, out=p)
        np.clip(p, lo, hi, out=p)

        block = target[r0:r1]
        rows = np.repeat(np.arange(r1 - r0), np.diff(block.indptr))
        cols = block.indices
        p_pos = p[rows, cols]
        total -= _sum_log(1.0 - p)
        total -= float(np.sum(pos_weight * np.log(p_pos) - np.log1p(-p_pos)))

        # d/dS of -[w t log p + (1-t) log(1-p)] with p = sigmoid(S): p on negatives,
        # -w (1 - p) on positives; zero where the clamp is active.
        corr = -pos_weight * (1.0 - p_pos) - p_pos
        if clamped is not None:
            p[clamped] = 0.0
            corr[clamped[rows, cols]] = 0.0
        g = p @ z
        g += sp.csr_matrix((corr, cols, block.indptr), shape=(r1 - r0, n)) @ z
        grad_z[r0:r1] = g
    # S is symmetric, so d/dz of sum f(z_i . z_j) is (dS + dS^T) z = 2 dS z.
    return total, 2.0 * grad_z


def vgae_objective(model: VgaeModel, a_hat, x, target, noise: np.ndarray, block_rows: int = BLOCK_ROWS):
    """Total loss and gradients for all three weight matrices with the given noise sample."""
    n = x.shape[0]
    pos_weight, norm = loss_weights(target)
    mu, log_sigma, hidden, prop = _encode_cached(model, a_hat, x)
    sigma = np.exp(log_sigma)
    z = mu + sigma * noise

    rc_sum, grad_z = _reconstruction_blocked(z, target, pos_weight, block_rows)
    nn2 = float(n) * n
    rc = rc_sum / nn2
    kl = kl_term(mu, log_sigma)
    total = norm * rc + kl / n
    if not np.isfinite(total):
        raise NonFiniteError(f"VGAE loss is non-finite: {total}")

    grad_z *= norm / nn2
    grad_mu = grad_z + mu / nn2
    grad_ls = grad_z * noise * sigma + (sigma * sigma - 1.0) / nn2

    grad_w_mu = prop.T @ grad_mu
    grad_w_sigma = prop.T @ grad_ls
    d_prop = grad_mu @ model.w_mu.value.T + grad_ls @ model.w_sigma.value.T
    d_hidden = relu_backward(hidden, spmm(a_hat, d_prop))
    grad_w0 = np.asarray(x.T @ spmm(a_hat, d_hidden))
    loss = VgaeLoss(rc, kl, total, pos_weight, norm)
    return loss, (grad_w0, grad_w_mu, grad_w_sigma)


def train_vgae(
    graph: Graph,
    epochs: int = 250,
    lr: float = 0.001,
    rng: Rng | int = 0,
    hidden_dim: int = 32,
    latent_dim: int = 16,
    block_rows: int = BLOCK_ROWS,
    adjacency=None,
) -> tuple[VgaeModel, list[VgaeLoss]]:
    """Fit a VGAE to ``graph`` (or to ``adjacency`` when given) with full-batch Adam.

    One posterior sample per step. Weights and noise both come from ``rng``,
    so an integer seed fully determines the result.
    """
    check_graph(graph)
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    rng = make_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    adj = graph.adjacency if adjacency is None else adjacency
    a_hat = normalize_adjacency(adj)
    target = reconstruction_target(adj)
    x = as_operand(graph.features)
    model = init_vgae(graph.n_features, hidden_dim, latent_dim, rng)

    history = []
    for epoch in range(epochs):
        noise = rng.standard_normal((graph.n_nodes, latent_dim))
        loss, grads = vgae_objective(model, a_hat, x, target, noise, block_rows)
        history.append(loss)
        for param, grad in zip(model.parameters(), grads):
            param.grad[...] = grad
            adam_step(param, lr)
            check_finite("VGAE weights", param.value)
        if epoch % 50 == 0:
            logger.debug("vgae epoch %d loss %.5f (rc %.5f kl %.5f)", epoch, loss.total, loss.reconstruction, loss.kl)
    return model, history


class VGAE(BaseEstimator, TransformerMixin):
    """Estimator form: ``transform`` returns posterior means, ``reconstruct`` edge scores."""

    def __init__(self, hidden_dim=32, latent_dim=16, epochs=250, lr=0.001, seed=0):
        self.hidden_dim = hidden_dim
        self.latent_dim = latent_dim
        self.epochs = epochs
        self.lr = lr
        self.seed = seed

    def fit(self, graph: Graph, y=None):
        self.model_, self.loss_history_ = train_vgae(
            graph, self.epochs, self.lr, make_rng(self.seed), self.hidden_dim, self.latent_dim
        )
        return self

    def transform(self, graph: Graph) -> np.ndarray:
        check_is_fitted(self, "model_")
        check_graph(graph)
        mu, _ = encode(self.model_, normalize_adjacency(graph), as_operand(graph.features))
        return mu

    def reconstruct(self, graph: Graph) -> np.ndarray:
        check_is_fitted(self, "model_")
        from .defense import reconstruct_adjacency

        return reconstruct_adjacency(self.model_, graph)
