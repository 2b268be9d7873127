"""Held-out edge evaluation of a VGAE's link reconstruction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from sklearn.metrics import roc_auc_score

from .gcn import as_operand
from .graph import Graph, adjacency_from_edges, normalize_adjacency
from .nn import make_rng
from .vgae import encode, inner_product_logits, train_vgae


@dataclass
class LinkSplit:
    train_adjacency: sp.csr_matrix
    test_edges: np.ndarray
    test_non_edges: np.ndarray


def split_edges(graph: Graph, fraction: float = 0.1, seed: int = 0) -> LinkSplit:
    """Hold out ``fraction`` of the edges plus as many node pairs that are not edges."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    rng = make_rng(seed)
    edges = graph.edge_list()
    n_test = max(1, int(round(fraction * len(edges))))
    order = rng.permutation(len(edges))
    test, train = edges[order[:n_test]], edges[order[n_test:]]
    n = graph.n_nodes
    existing = set(map(tuple, edges.tolist()))
    negatives: set[tuple[int, int]] = set()
    while len(negatives) < n_test:
        i, j = (int(v) for v in rng.integers(0, n, size=2))
        pair = (min(i, j), max(i, j))
        if i != j and pair not in existing:
            negatives.add(pair)
    return LinkSplit(adjacency_from_edges(train, n), test, np.array(sorted(negatives), dtype=np.int64))


def held_out_auc(graph: Graph, fraction: float = 0.1, seed: int = 0, **vgae_kwargs) -> float:
    """ROC-AUC of posterior-mean inner products on held-out edges against sampled non-edges.

    The VGAE is trained on the graph with the held-out edges removed.
    """
    split = split_edges(graph, fraction, seed)
    model, _ = train_vgae(graph, rng=seed, adjacency=split.train_adjacency, **vgae_kwargs)
    mu, _ = encode(model, normalize_adjacency(split.train_adjacency), as_operand(graph.features))
    scores = inner_product_logits(mu)
    pos = scores[split.test_edges[:, 0], split.test_edges[:, 1]]
    neg = scores[split.test_non_edges[:, 0], split.test_non_edges[:, 1]]
    y = np.r_[np.ones(pos.size), np.zeros(neg.size)]
    return float(roc_auc_score(y, np.r_[pos, neg]))
