"""Attributed graph container and the structural primitives shared by every module."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    """Raised when graph data violates a structural invariant."""


@dataclass(frozen=True, eq=False)
class DataSplit:
    """Disjoint train / validation / test node-id sets."""

    train_ids: np.ndarray
    val_ids: np.ndarray
    test_ids: np.ndarray

    def __post_init__(self):
        for name in ("train_ids", "val_ids", "test_ids"):
            ids = np.asarray(getattr(self, name), dtype=np.int64).ravel()
            ids.setflags(write=False)
            object.__setattr__(self, name, ids)
        tr, va, te = set(self.train_ids.tolist()), set(self.val_ids.tolist()), set(self.test_ids.tolist())
        if len(tr) != len(self.train_ids) or len(va) != len(self.val_ids) or len(te) != len(self.test_ids):
            raise GraphError("split contains duplicate node ids")
        if tr & va or tr & te or va & te:
            raise GraphError("train/val/test ids must be pairwise disjoint")

    def validate(self, n_nodes: int) -> None:
        for ids in (self.train_ids, self.val_ids, self.test_ids):
            if ids.size and (ids.min() < 0 or ids.max() >= n_nodes):
                raise GraphError(f"split id out of range for {n_nodes} nodes")

    def __eq__(self, other) -> bool:
        # Sets, not sequences: order of ids carries no meaning.
        if not isinstance(other, DataSplit):
            return NotImplemented
        return all(
            np.array_equal(np.sort(getattr(self, n)), np.sort(getattr(other, n)))
            for n in ("train_ids", "val_ids", "test_ids")
        )

    __hash__ = None

    def to_dict(self) -> dict:
        return {"train": self.train_ids.tolist(), "val": self.val_ids.tolist(), "test": self.test_ids.tolist()}


@dataclass(frozen=True)
class Graph:
    """Immutable undirected attributed graph.

    ``adjacency`` is a CSR matrix with sorted indices, exactly symmetric, unit
    valued and without diagonal entries. ``features`` is either a dense array or
    a sparse matrix (identity features are kept sparse).
    """

    adjacency: sp.csr_matrix
    features: np.ndarray | sp.spmatrix
    labels: np.ndarray
    split: DataSplit
    name: str = field(default="graph", compare=False)

    def __post_init__(self):
        adj = self.adjacency
        if not sp.isspmatrix_csr(adj):
            raise GraphError("adjacency must be a CSR matrix")
        n = adj.shape[0]
        if n == 0 or adj.shape != (n, n):
            raise GraphError(f"adjacency must be square and nonempty, got {adj.shape}")
        if adj.diagonal().any():
            raise GraphError("adjacency has diagonal entries")
        if adj.nnz and not np.all(adj.data == 1):
            raise GraphError("adjacency values must all equal 1")
        if (adj != adj.T).nnz:
            raise GraphError("adjacency is not symmetric")
        if self.features.shape[0] != n:
            raise GraphError(f"features have {self.features.shape[0]} rows, expected {n}")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (n,):
            raise GraphError(f"labels must have shape ({n},), got {labels.shape}")
        if labels.size and labels.min() < 0:
            raise GraphError("labels must be non-negative class ids")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        self.split.validate(n)

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_edges(self) -> int:
        """Number of undirected edges."""
        return self.adjacency.nnz // 2

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def edge_list(self) -> np.ndarray:
        """Undirected edges as an (E, 2) array with ``i < j``, in lexicographic order."""
        upper = sp.triu(self.adjacency, k=1).tocsr()
        upper.sort_indices()
        rows = np.repeat(np.arange(self.n_nodes), np.diff(upper.indptr))
        return np.column_stack([rows, upper.indices]).astype(np.int64)

    def with_adjacency(self, adjacency: sp.spmatrix) -> "Graph":
        """Copy of this graph with the structure replaced; features, labels and split are kept."""
        return Graph(_canonical_csr(adjacency), self.features, self.labels, self.split, name=self.name)


def _canonical_csr(adj: sp.spmatrix) -> sp.csr_matrix:
    adj = sp.csr_matrix(adj, dtype=np.float64)
    adj.sum_duplicates()
    adj.eliminate_zeros()
    adj.sort_indices()
    return adj


def adjacency_from_edges(edges, n_nodes: int) -> sp.csr_matrix:
    """Symmetric binary CSR adjacency from an edge array; self-loops and duplicates dropped."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n_nodes):
        raise GraphError(f"edge endpoint out of range for {n_nodes} nodes")
    edges = edges[edges[:, 0] != edges[:, 1]]
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    adj = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n_nodes, n_nodes)).tocsr()
    adj.sum_duplicates()
    adj.data[:] = 1.0
    adj.sort_indices()
    return adj


def build_graph(edges: Iterable[Sequence[int]], features, labels, split: DataSplit, name: str = "graph") -> Graph:
    """Assemble a :class:`Graph` from an undirected edge list.

    Each pair is stored in both directions, duplicates collapse and
    self-loops are discarded (the normalization adds them back explicitly).
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = features.shape[0]
    if n == 0:
        raise GraphError("empty graph")
    if labels.shape[0] != n:
        raise GraphError(f"{labels.shape[0]} labels for {n} feature rows")
    if not sp.issparse(features):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2:
            raise GraphError("features must be a 2-d matrix")
    edges = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
    return Graph(adjacency_from_edges(edges, n), features, labels, split, name=name)


def normalize_adjacency(graph_or_adj) -> sp.csr_matrix:
    """Return ``D^-1/2 (A + I) D^-1/2`` with degrees taken from ``A + I``."""
    adj = graph_or_adj.adjacency if isinstance(graph_or_adj, Graph) else sp.csr_matrix(graph_or_adj)
    n = adj.shape[0]
    a_tilde = (adj + sp.identity(n, format="csr")).tocsr()
    deg = np.asarray(a_tilde.sum(axis=1)).ravel()
    d_inv_sqrt = 1.0 / np.sqrt(deg)
    out = sp.diags(d_inv_sqrt) @ a_tilde @ sp.diags(d_inv_sqrt)
    out = sp.csr_matrix(out)
    out.sort_indices()
    return out


def density(adjacency) -> float:
    """Fraction of nonzero entries, ``nnz / N**2``."""
    n_rows, n_cols = adjacency.shape
    if n_rows != n_cols:
        raise GraphError("density needs a square matrix")
    nnz = adjacency.nnz if sp.issparse(adjacency) else int(np.count_nonzero(adjacency))
    return nnz / float(n_rows * n_cols)


def jaccard_similarity(features_i, features_j) -> float:
    """Jaccard index of the nonzero supports of two feature vectors (0 when both are empty)."""
    a = np.asarray(features_i.toarray() if sp.issparse(features_i) else features_i).ravel() != 0
    b = np.asarray(features_j.toarray() if sp.issparse(features_j) else features_j).ravel() != 0
    if a.shape != b.shape:
        raise GraphError(f"feature vectors differ in length: {a.size} vs {b.size}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def edge_jaccard(features, edges: np.ndarray) -> np.ndarray:
    """Vectorized Jaccard similarity for each ``(u, v)`` row of ``edges``."""
    binary = sp.csr_matrix(features != 0, dtype=np.float64) if sp.issparse(features) else sp.csr_matrix(
        (np.asarray(features) != 0).astype(np.float64)
    )
    if len(edges) == 0:
        return np.zeros(0)
    u, v = edges[:, 0], edges[:, 1]
    counts = np.asarray(binary.sum(axis=1)).ravel()
    inter = np.asarray(binary[u].multiply(binary[v]).sum(axis=1)).ravel()
    union = counts[u] + counts[v] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    return sim


def is_identity_features(features) -> bool:
    n, d = features.shape
    if n != d:
        return False
    if sp.issparse(features):
        f = sp.csr_matrix(features)
        return f.nnz == n and np.all(f.diagonal() == 1)
    return bool(np.array_equal(features, np.eye(n)))
