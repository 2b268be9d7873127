"""Dataset ingestion (Planetoid raw / Planetoid index files / generic text) and synthetic graphs."""

from __future__ import annotations

import json
import logging
import pickle
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph import DataSplit, Graph, GraphError, build_graph, is_identity_features
from .nn import make_rng

logger = logging.getLogger(__name__)


def planetoid_split(labels, seed: int = 0, per_class: int = 20, n_val: int = 500, n_test: int = 1000) -> DataSplit:
    """Semi-supervised split in the Planetoid style: ``per_class`` training nodes per class,
    then ``n_val`` validation and ``n_test`` test nodes drawn from the remainder."""
    labels = np.asarray(labels)
    rng = make_rng(seed)
    order = rng.permutation(labels.size)
    train = []
    for c in range(int(labels.max()) + 1):
        members = order[labels[order] == c]
        train.extend(members[:per_class].tolist())
    train_set = set(train)
    rest = np.array([i for i in order if i not in train_set], dtype=np.int64)
    if rest.size < n_val + n_test:
        raise GraphError(f"not enough nodes for {n_val} val + {n_test} test after training selection")
    return DataSplit(np.sort(train), np.sort(rest[:n_val]), np.sort(rest[n_val : n_val + n_test]))


def labeled_split(n_nodes: int, seed: int = 0, labeled_fraction: float = 0.2) -> DataSplit:
    """Label a random ``labeled_fraction`` of nodes, half for training and half for validation;
    everything else is test."""
    rng = make_rng(seed)
    order = rng.permutation(n_nodes)
    n_lab = int(round(labeled_fraction * n_nodes))
    n_train = n_lab // 2
    return DataSplit(np.sort(order[:n_train]), np.sort(order[n_train:n_lab]), np.sort(order[n_lab:]))


def load_planetoid_raw(directory, name: str, split: DataSplit | None = None, seed: int = 0) -> Graph:
    """Read ``<name>.content`` / ``<name>.cites`` (tab separated).

    Node ids are mapped to 0-based indices in first-seen ``.content`` order;
    label strings are numbered in sorted order. Citations to unknown ids are
    dropped and counted.
    """
    directory = Path(directory)
    content, cites = directory / f"{name}.content", directory / f"{name}.cites"
    for path in (content, cites):
        if not path.is_file():
            raise FileNotFoundError(path)
    index: dict[str, int] = {}
    rows, raw_labels = [], []
    with content.open() as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 3:
                continue
            if parts[0] in index:
                continue
            index[parts[0]] = len(index)
            rows.append(np.asarray(parts[1:-1], dtype=np.float64))
            raw_labels.append(parts[-1])
    widths = {r.size for r in rows}
    if len(widths) != 1:
        raise GraphError(f"inconsistent feature widths in {content}: {sorted(widths)}")
    classes = {c: i for i, c in enumerate(sorted(set(raw_labels)))}
    labels = np.array([classes[c] for c in raw_labels], dtype=np.int64)
    features = sp.csr_matrix(np.vstack(rows))

    edges, skipped = [], 0
    with cites.open() as fh:
        for line in fh:
            parts = line.split()
            if len(parts) != 2:
                continue
            a, b = parts
            if a in index and b in index:
                edges.append((index[a], index[b]))
            else:
                skipped += 1
    if skipped:
        logger.warning("%s: skipped %d citations referencing unknown ids", cites.name, skipped)
    if split is None:
        split = planetoid_split(labels, seed=seed)
    return build_graph(np.asarray(edges, dtype=np.int64).reshape(-1, 2), features, labels, split, name=name)


def _load_pickle(path: Path):
    with path.open("rb") as fh:
        return pickle.load(fh, encoding="latin1")


def load_planetoid_index(directory, name: str) -> Graph:
    """Read the ``ind.<name>.*`` files, which carry the standard fixed Planetoid split.

    Training nodes are the rows of ``y``, validation the next 500 rows (fewer if
    the test ids start earlier), and test the nodes listed in ``test.index``.
    """
    directory = Path(directory)
    parts = {key: _load_pickle(directory / f"ind.{name}.{key}") for key in ("x", "y", "tx", "ty", "allx", "ally", "graph")}
    test_index = np.loadtxt(directory / f"ind.{name}.test.index", dtype=np.int64).ravel()
    test_sorted = np.sort(test_index)
    tx, ty = sp.csr_matrix(parts["tx"]), np.asarray(parts["ty"])
    if name == "citeseer":
        # Some test ids have no record; pad them with zero rows.
        full = np.arange(test_sorted.min(), test_sorted.max() + 1)
        tx_ext = sp.lil_matrix((full.size, tx.shape[1]))
        tx_ext[test_sorted - test_sorted.min(), :] = tx
        ty_ext = np.zeros((full.size, ty.shape[1]))
        ty_ext[test_sorted - test_sorted.min(), :] = ty
        tx, ty = tx_ext.tocsr(), ty_ext
    features = sp.vstack([sp.csr_matrix(parts["allx"]), tx]).tolil()
    features[test_index, :] = features[test_sorted, :]
    onehot = np.vstack([np.asarray(parts["ally"]), ty])
    onehot[test_index, :] = onehot[test_sorted, :]
    labels = np.argmax(onehot, axis=1)
    n = features.shape[0]
    edges = [(u, v) for u, nbrs in parts["graph"].items() for v in nbrs if u < n and v < n]
    n_train = np.asarray(parts["y"]).shape[0]
    val_end = min(n_train + 500, int(test_sorted.min()))
    split = DataSplit(np.arange(n_train), np.arange(n_train, val_end), np.sort(test_index))
    return build_graph(np.asarray(edges, dtype=np.int64).reshape(-1, 2), features.tocsr(), labels, split, name=name)


def load_split(path) -> DataSplit:
    with open(path) as fh:
        payload = json.load(fh)
    return DataSplit(payload["train"], payload["val"], payload["test"])


def load_generic(directory, split: DataSplit | None = None, seed: int = 0, name: str | None = None) -> Graph:
    """Read ``edges.txt``, ``labels.txt``, optional ``features.csv`` and optional ``split.json``.

    A missing feature file means identity features (kept sparse). Without a
    split file the labeled-fraction split is used.
    """
    directory = Path(directory)
    edges_path = directory / "edges.txt"
    if not edges_path.is_file():
        raise FileNotFoundError(edges_path)
    labels = np.loadtxt(directory / "labels.txt", dtype=np.int64, ndmin=1)
    edges = np.loadtxt(edges_path, dtype=np.int64, ndmin=2, comments="#").reshape(-1, 2)
    feat_path = directory / "features.csv"
    if feat_path.is_file():
        features = np.loadtxt(feat_path, delimiter=",", dtype=np.float64, ndmin=2)
    else:
        features = sp.identity(labels.size, format="csr")
    if split is None:
        split_path = directory / "split.json"
        split = load_split(split_path) if split_path.is_file() else labeled_split(labels.size, seed=seed)
    return build_graph(edges, features, labels, split, name=name or directory.name)


def save_generic(graph: Graph, directory) -> Path:
    """Write ``graph`` in the generic text format; identity features are not written."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.savetxt(directory / "edges.txt", graph.edge_list(), fmt="%d")
    np.savetxt(directory / "labels.txt", graph.labels, fmt="%d")
    if not is_identity_features(graph.features):
        feats = graph.features.toarray() if sp.issparse(graph.features) else graph.features
        np.savetxt(directory / "features.csv", feats, delimiter=",", fmt="%.17g")
    with open(directory / "split.json", "w") as fh:
        json.dump(graph.split.to_dict(), fh)
    return directory


CORA_CLASS_SIZES = (351, 217, 418, 818, 426, 298, 180)


def synthetic_citation_graph(
    n_nodes: int = 2708,
    n_classes: int = 7,
    n_features: int = 1433,
    n_edges: int = 5429,
    homophily: float = 0.6,
    words_per_node: int = 18,
    topic_fraction: float = 0.35,
    degree_exponent: float = 2.5,
    seed: int = 0,
    split: str = "planetoid",
    name: str = "synthetic",
) -> Graph:
    """Degree-corrected stochastic block model with bag-of-words features.

    Defaults mimic Cora's size, class balance and sparsity, and are tuned so a
    two-layer GCN reaches roughly 80% test accuracy while a structure-free
    model reaches roughly 58%, close to the real dataset.
    Each class owns a disjoint slice of the vocabulary; a node draws
    ``words_per_node`` words, a ``topic_fraction`` share of them from its class
    slice and the rest from a Zipf-like background over the whole vocabulary.
    """
    rng = make_rng(seed)
    if n_classes == len(CORA_CLASS_SIZES) and n_nodes > 0:
        props = np.asarray(CORA_CLASS_SIZES, dtype=np.float64)
        props /= props.sum()
    else:
        props = np.full(n_classes, 1.0 / n_classes)
    labels = rng.choice(n_classes, size=n_nodes, p=props)
    labels[:n_classes] = np.arange(n_classes)[: min(n_classes, n_nodes)]

    # Heavy-tailed degree propensities.
    theta = (1.0 - rng.random(n_nodes)) ** (-1.0 / (degree_exponent - 1.0))
    members = [np.flatnonzero(labels == c) for c in range(n_classes)]
    class_p = [theta[m] / theta[m].sum() for m in members]
    all_p = theta / theta.sum()

    max_edges = n_nodes * (n_nodes - 1) // 2
    n_edges = min(n_edges, max_edges)
    seen: set[tuple[int, int]] = set()
    touched = np.zeros(n_nodes, dtype=bool)

    def partner(u):
        c = labels[u]
        if rng.random() < homophily and members[c].size > 1:
            return int(rng.choice(members[c], p=class_p[c]))
        v = int(rng.choice(n_nodes, p=all_p))
        return v if labels[v] != c else None

    def add(u, v):
        if v is None or u == v:
            return False
        key = (min(u, v), max(u, v))
        if key in seen:
            return False
        seen.add(key)
        touched[u] = touched[v] = True
        return True

    # Every node gets at least one link (no isolated nodes), then the rest
    # follow the degree propensities.
    for u in rng.permutation(n_nodes):
        while not touched[u] and len(seen) < n_edges:
            add(int(u), partner(u))
    while len(seen) < n_edges:
        u = int(rng.choice(n_nodes, p=all_p))
        add(u, partner(u))
    edges = np.array(sorted(seen), dtype=np.int64)

    vocab_slices = np.array_split(np.arange(n_features), n_classes)
    background = 1.0 / np.arange(1, n_features + 1) ** 0.8
    background = background[rng.permutation(n_features)]
    background /= background.sum()
    rows, cols = [], []
    for i in range(n_nodes):
        n_topic = rng.binomial(words_per_node, topic_fraction)
        words = np.concatenate(
            [
                rng.choice(vocab_slices[labels[i]], size=n_topic),
                rng.choice(n_features, size=words_per_node - n_topic, p=background),
            ]
        )
        words = np.unique(words)
        rows.extend([i] * words.size)
        cols.extend(words.tolist())
    features = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_nodes, n_features))

    if split == "planetoid":
        per_class = 20
        n_val = min(500, (n_nodes - per_class * n_classes) // 3)
        n_test = min(1000, n_nodes - per_class * n_classes - n_val)
        data_split = planetoid_split(labels, seed=seed, per_class=per_class, n_val=n_val, n_test=n_test)
    else:
        data_split = labeled_split(n_nodes, seed=seed)
    return build_graph(edges, features, labels, data_split, name=name)


def load_dataset(spec: dict) -> Graph:
    """Load a graph from a dataset description such as ``{"format": "planetoid", "path": ..., "name": "cora"}``."""
    fmt = spec.get("format", "planetoid")
    seed = int(spec.get("split_seed", 0))
    split = None
    split_kind = spec.get("split", "default")
    if spec.get("split_file"):
        split = load_split(spec["split_file"])
    if fmt == "synthetic":
        params = dict(spec.get("params", {}))
        params.setdefault("name", spec.get("name", "synthetic"))
        return synthetic_citation_graph(**params)
    path = spec.get("path")
    if path is None or not Path(path).exists():
        raise FileNotFoundError(f"dataset path does not exist: {path}")
    name = spec.get("name")
    if fmt == "planetoid":
        if split is None and split_kind == "labeled":
            g = load_planetoid_raw(path, name, seed=seed)
            return g.__class__(g.adjacency, g.features, g.labels, labeled_split(g.n_nodes, seed), name=g.name)
        return load_planetoid_raw(path, name, split=split, seed=seed)
    if fmt == "planetoid-index":
        return load_planetoid_index(path, name)
    if fmt == "generic":
        if split is None and split_kind == "labeled":
            g = load_generic(path, seed=seed, name=name)
            return g.__class__(g.adjacency, g.features, g.labels, labeled_split(g.n_nodes, seed), name=g.name)
        return load_generic(path, split=split, seed=seed, name=name)
    raise ValueError(f"unknown dataset format {fmt!r}")
