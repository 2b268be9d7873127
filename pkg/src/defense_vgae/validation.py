"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError

from .graph import Graph


def check_graph(graph) -> Graph:
    if not isinstance(graph, Graph):
        raise TypeError(f"expected a Graph, got {type(graph).__name__}")
    return graph


def check_node_ids(node_ids, n_nodes: int) -> np.ndarray:
    ids = np.asarray(sorted(node_ids) if isinstance(node_ids, (set, frozenset)) else node_ids, dtype=np.int64).ravel()
    if ids.size == 0:
        raise ValueError("node id set is empty")
    if ids.min() < 0 or ids.max() >= n_nodes:
        raise ValueError(f"node id out of range for {n_nodes} nodes")
    return ids


def check_is_fitted(estimator, attribute: str) -> None:
    if not hasattr(estimator, attribute):
        raise NotFittedError(f"{type(estimator).__name__} is not fitted yet; call fit first")
