"""Structure purification defenses: VGAE reconstruction, Jaccard edge pruning, low-rank SVD."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, TransformerMixin

from .gcn import GcnModel, TrainConfig, as_operand, evaluate, train_gcn
from .graph import Graph, GraphError, density, edge_jaccard, is_identity_features, normalize_adjacency
from .nn import make_rng, sigmoid
from .validation import check_graph, check_is_fitted
from .vgae import VgaeModel, encode, inner_product_logits, train_vgae

logger = logging.getLogger(__name__)

DEFAULT_RATIO_GRID = (1.0, 2.0, 5.0, 10.0, 20.0, 50.0)


@dataclass
class DefenseConfig:
    ratio_grid: Sequence[float] = DEFAULT_RATIO_GRID
    fixed_ratio: float | None = None
    vgae_epochs: int = 250
    vgae_lr: float = 0.001
    vgae_hidden: int = 32
    vgae_latent: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.fixed_ratio is not None:
            if self.fixed_ratio <= 0:
                raise ValueError("fixed_ratio must be > 0")
        elif not self.ratio_grid:
            raise ValueError("ratio_grid must be nonempty when fixed_ratio is unset")
        if any(r <= 0 for r in self.ratio_grid):
            raise ValueError("all ratios must be > 0")

    @property
    def ratios(self) -> list[float]:
        return [float(self.fixed_ratio)] if self.fixed_ratio is not None else [float(r) for r in self.ratio_grid]


@dataclass
class DefendedGraph:
    graph: Graph
    chosen_ratio: float
    achieved_density: float
    val_accuracy: float
    search: list[dict] = field(default_factory=list)


def reconstruct_adjacency(model: VgaeModel, graph: Graph, logits: bool = False) -> np.ndarray:
    """Dense symmetric edge scores from the posterior means, diagonal set to 0.

    With ``logits=True`` the raw inner products are returned instead of
    probabilities. They rank pairs identically but are not flattened by the
    sigmoid clamp.
    """
    if graph.n_features != model.w0.shape[0]:
        raise ValueError(f"graph has {graph.n_features} features, model expects {model.w0.shape[0]}")
    mu, _ = encode(model, normalize_adjacency(graph), as_operand(graph.features))
    scores = inner_product_logits(mu)
    if not logits:
        scores = sigmoid(scores)
    np.fill_diagonal(scores, 0.0)
    return scores


def top_k_count(target_density: float, n: int) -> int:
    """Number of undirected pairs giving ``target_density`` of an N x N matrix (round half up)."""
    return int(math.floor(target_density * n * n / 2.0 + 0.5))


def sparsify(scores: np.ndarray, target_density: float) -> sp.csr_matrix:
    """Keep the ``k`` highest-scoring strict-upper-triangle pairs, mirrored.

    ``k = round(target_density * N^2 / 2)``, capped at ``N(N-1)/2``. Equal
    scores are ranked by ascending ``(i, j)``.
    """
    if target_density <= 0:
        raise ValueError("target_density must be > 0")
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if scores.shape != (n, n):
        raise ValueError("scores must be square")
    if np.isnan(scores).any():
        raise ValueError("scores contain NaN")
    iu, ju = np.triu_indices(n, k=1)
    k = min(top_k_count(target_density, n), iu.size)
    if k == 0:
        return sp.csr_matrix((n, n))
    values = scores[iu, ju]
    # Stable sort on the negated scores keeps lexicographic order among ties.
    order = np.argsort(-values, kind="stable")[:k]
    rows, cols = iu[order], ju[order]
    adj = sp.coo_matrix(
        (np.ones(2 * k), (np.concatenate([rows, cols]), np.concatenate([cols, rows]))), shape=(n, n)
    ).tocsr()
    adj.sort_indices()
    return adj


def _train_on(graph: Graph, gcn_cfg: TrainConfig) -> tuple[GcnModel, float]:
    model, history = train_gcn(graph, gcn_cfg)
    return model, max(h["val_acc"] for h in history)


def defense_vgae(
    graph: Graph, cfg: DefenseConfig | None = None, gcn_cfg: TrainConfig | None = None
) -> tuple[DefendedGraph, GcnModel]:
    """Train a VGAE on ``graph``, re-sparsify its reconstruction and retrain a GCN on it.

    Densities are multiples of the input density. With several candidates the
    one with the best validation accuracy wins; ties go to the smaller ratio.
    """
    cfg = cfg or DefenseConfig()
    gcn_cfg = gcn_cfg or TrainConfig()
    check_graph(graph)
    base_density = density(graph.adjacency)
    if base_density == 0:
        raise GraphError("cannot scale the density of an edgeless graph")
    vgae_model, _ = train_vgae(
        graph, cfg.vgae_epochs, cfg.vgae_lr, cfg.seed, cfg.vgae_hidden, cfg.vgae_latent
    )
    scores = reconstruct_adjacency(vgae_model, graph, logits=True)

    best = None
    search = []
    for ratio in sorted(cfg.ratios):
        adj = sparsify(scores, min(ratio * base_density, 1.0))
        defended = graph.with_adjacency(adj)
        model, val_acc = _train_on(defended, gcn_cfg)
        achieved = density(adj)
        search.append({"ratio": ratio, "val_accuracy": val_acc, "density": achieved})
        logger.debug("ratio %.3g: density %.3g val %.4f", ratio, achieved, val_acc)
        if best is None or val_acc > best[0].val_accuracy:
            best = (DefendedGraph(defended, ratio, achieved, val_acc), model)
    best[0].search = search
    return best


def gcn_jaccard_defense(graph: Graph, threshold: float = 0.0) -> Graph:
    """Drop every edge whose endpoint feature supports have Jaccard similarity ``<= threshold``."""
    check_graph(graph)
    if is_identity_features(graph.features):
        raise GraphError("Jaccard pruning needs node features; this graph has identity features")
    edges = graph.edge_list()
    keep = edges[edge_jaccard(graph.features, edges) > threshold]
    n = graph.n_nodes
    adj = sp.coo_matrix(
        (np.ones(2 * len(keep)), (np.r_[keep[:, 0], keep[:, 1]], np.r_[keep[:, 1], keep[:, 0]])), shape=(n, n)
    ).tocsr()
    return graph.with_adjacency(adj)


# Dense SVD below this size; randomized subspace iteration above.
DENSE_SVD_MAX = 200


def randomized_svd(
    matrix, rank: int, seed: int = 0, n_oversamples: int = 10, min_iter: int = 4, max_iter: int = 60, tol: float = 1e-12
):
    """Randomized subspace iteration with QR re-orthonormalization.

    Runs at least ``min_iter`` power iterations, then continues until the
    leading ``rank`` singular value estimates move by less than ``tol``
    relative to the largest one (or ``max_iter`` is reached).
    """
    m, n = matrix.shape
    width = min(rank + n_oversamples, m, n)
    rng = make_rng(seed)
    q, _ = np.linalg.qr(matrix @ rng.standard_normal((n, width)))
    previous = None
    for it in range(max_iter):
        q, _ = np.linalg.qr(matrix.T @ q)
        q, _ = np.linalg.qr(matrix @ q)
        if it + 1 < min_iter:
            continue
        sv = np.linalg.svd(np.asarray((matrix.T @ q).T), compute_uv=False)[:rank]
        if previous is not None and np.max(np.abs(sv - previous)) <= tol * max(sv[0], np.finfo(float).tiny):
            break
        previous = sv
    u_small, s, vt = np.linalg.svd(np.asarray((matrix.T @ q).T), full_matrices=False)
    return (q @ u_small)[:, :rank], s[:rank], vt[:rank]


def truncated_svd(matrix, rank: int, seed: int = 0, method: str = "auto"):
    """Rank-``rank`` factors ``(U, s, Vt)`` of ``matrix``."""
    n = matrix.shape[0]
    if not 1 <= rank <= min(matrix.shape):
        raise ValueError(f"rank must be in [1, {min(matrix.shape)}], got {rank}")
    if method == "auto":
        method = "dense" if n <= DENSE_SVD_MAX else "randomized"
    if method == "dense":
        dense = matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix, dtype=np.float64)
        u, s, vt = np.linalg.svd(dense)
        return u[:, :rank], s[:rank], vt[:rank]
    if method == "randomized":
        return randomized_svd(matrix, rank, seed=seed)
    raise ValueError(f"unknown SVD method {method!r}")


def low_rank_approximation(matrix, rank: int, seed: int = 0, method: str = "auto") -> np.ndarray:
    u, s, vt = truncated_svd(matrix, rank, seed=seed, method=method)
    return (u * s) @ vt


def gcn_svd_defense(graph: Graph, rank: int = 10, seed: int = 0, method: str = "auto") -> Graph:
    """Replace the adjacency by its binarized (``> 0.5``) symmetric rank-``rank`` approximation."""
    check_graph(graph)
    if not 1 <= rank <= graph.n_nodes:
        raise ValueError(f"rank must be in [1, {graph.n_nodes}], got {rank}")
    approx = low_rank_approximation(graph.adjacency, rank, seed=seed, method=method)
    approx = 0.5 * (approx + approx.T)
    binary = approx > 0.5
    np.fill_diagonal(binary, False)
    return graph.with_adjacency(sp.csr_matrix(binary.astype(np.float64)))


class DefenseVGAE(BaseEstimator, TransformerMixin):
    """Purify a graph with a VGAE reconstruction.

    ``fit`` trains the VGAE and (when ``fixed_ratio`` is None) searches
    ``ratio_grid`` by validation accuracy of a GCN retrained on each candidate.
    ``transform`` returns the defended :class:`Graph`; the GCN trained on it is
    kept as ``classifier_``.
    """

    def __init__(
        self,
        ratio_grid=DEFAULT_RATIO_GRID,
        fixed_ratio=None,
        vgae_epochs=250,
        vgae_lr=0.001,
        vgae_hidden=32,
        vgae_latent=16,
        gcn_hidden=16,
        gcn_lr=0.01,
        gcn_weight_decay=5e-4,
        gcn_epochs=200,
        gcn_patience=30,
        seed=0,
    ):
        self.ratio_grid = ratio_grid
        self.fixed_ratio = fixed_ratio
        self.vgae_epochs = vgae_epochs
        self.vgae_lr = vgae_lr
        self.vgae_hidden = vgae_hidden
        self.vgae_latent = vgae_latent
        self.gcn_hidden = gcn_hidden
        self.gcn_lr = gcn_lr
        self.gcn_weight_decay = gcn_weight_decay
        self.gcn_epochs = gcn_epochs
        self.gcn_patience = gcn_patience
        self.seed = seed

    def fit(self, graph: Graph, y=None):
        cfg = DefenseConfig(
            ratio_grid=tuple(self.ratio_grid),
            fixed_ratio=self.fixed_ratio,
            vgae_epochs=self.vgae_epochs,
            vgae_lr=self.vgae_lr,
            vgae_hidden=self.vgae_hidden,
            vgae_latent=self.vgae_latent,
            seed=self.seed,
        )
        gcn_cfg = TrainConfig(
            epochs=self.gcn_epochs,
            lr=self.gcn_lr,
            weight_decay=self.gcn_weight_decay,
            hidden_dim=self.gcn_hidden,
            patience=self.gcn_patience,
            seed=self.seed,
        )
        self.defended_, self.classifier_ = defense_vgae(graph, cfg, gcn_cfg)
        self.chosen_ratio_ = self.defended_.chosen_ratio
        self.achieved_density_ = self.defended_.achieved_density
        self.val_accuracy_ = self.defended_.val_accuracy
        return self

    def transform(self, graph: Graph) -> Graph:
        check_is_fitted(self, "defended_")
        check_graph(graph)
        if graph.n_nodes != self.defended_.graph.n_nodes:
            raise ValueError("graph does not match the one the defense was fitted on")
        return self.defended_.graph

    def score(self, graph: Graph, node_ids=None) -> float:
        check_is_fitted(self, "classifier_")
        defended = self.defended_.graph
        return evaluate(self.classifier_, defended, defended.split.test_ids if node_ids is None else node_ids)


class JaccardPurifier(BaseEstimator, TransformerMixin):
    def __init__(self, threshold=0.0):
        self.threshold = threshold

    def fit(self, graph: Graph, y=None):
        check_graph(graph)
        return self

    def transform(self, graph: Graph) -> Graph:
        return gcn_jaccard_defense(graph, self.threshold)


class SVDPurifier(BaseEstimator, TransformerMixin):
    def __init__(self, rank=10, seed=0, method="auto"):
        self.rank = rank
        self.seed = seed
        self.method = method

    def fit(self, graph: Graph, y=None):
        check_graph(graph)
        return self

    def transform(self, graph: Graph) -> Graph:
        return gcn_svd_defense(graph, self.rank, self.seed, self.method)
