"""Structure poisoning attacks and perturbation files.

``surrogate-greedy`` and ``dice`` are simplified stand-ins for Nettack and
Metattack respectively; they are not those algorithms. Outputs of the real
attacks can be replayed through :func:`read_perturbation`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .gcn import GcnModel, TrainConfig, as_operand, train_gcn
from .graph import Graph, GraphError
from .nn import Rng, make_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Perturbation:
    """Ordered undirected edge flips, each stored as ``(i, j)`` with ``i < j``."""

    flips: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        normalized = []
        for i, j in self.flips:
            i, j = int(i), int(j)
            if i == j:
                raise GraphError(f"self-pair ({i}, {j}) cannot be flipped")
            normalized.append((min(i, j), max(i, j)))
        if len(set(normalized)) != len(normalized):
            raise GraphError("perturbation contains a duplicate pair")
        object.__setattr__(self, "flips", tuple(normalized))

    def __len__(self) -> int:
        return len(self.flips)


@dataclass
class AttackResult:
    perturbation: Perturbation
    attacked_graph: Graph
    attack: str
    budget: int
    target: int | None = None
    shortfall: bool = False
    meta: dict = field(default_factory=dict)


def apply_perturbation(graph: Graph, perturbation: Perturbation) -> Graph:
    """Toggle each pair of ``perturbation`` in ``graph``; features, labels and split are kept."""
    if not perturbation.flips:
        return graph
    n = graph.n_nodes
    pairs = np.asarray(perturbation.flips, dtype=np.int64)
    if pairs.min() < 0 or pairs.max() >= n:
        raise GraphError(f"perturbation references a node outside [0, {n})")
    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    toggle = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    # Entries present in exactly one of the two matrices survive: XOR on the pattern.
    flipped = graph.adjacency + toggle
    flipped.data = np.where(flipped.data == 1.0, 1.0, 0.0)
    flipped.eliminate_zeros()
    return graph.with_adjacency(flipped)


def write_perturbation(path, perturbation: Perturbation, attack: str, budget, target: int | None = None) -> Path:
    path = Path(path)
    lines = [f"# attack: {attack}", f"# budget: {budget}"]
    if target is not None:
        lines.append(f"# target: {target}")
    lines.extend(f"{i} {j}" for i, j in perturbation.flips)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_perturbation(path) -> tuple[Perturbation, dict]:
    """Parse a perturbation file into flips plus the ``# key: value`` header metadata."""
    meta, flips = {}, []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            if value:
                meta[key.strip()] = value.strip()
            continue
        i, j = (int(tok) for tok in line.split())
        if i >= j:
            raise GraphError(f"perturbation line {line!r} must satisfy i < j")
        flips.append((i, j))
    return Perturbation(tuple(flips)), meta


def _pair_from_index(index: np.ndarray, n: int) -> np.ndarray:
    """Map linear indices over the strict upper triangle (row-major) to ``(i, j)`` pairs."""
    starts = np.concatenate([[0], np.cumsum(np.arange(n - 1, 0, -1))])
    i = np.searchsorted(starts, index, side="right") - 1
    j = index - starts[i] + i + 1
    return np.column_stack([i, j])


def random_flip_attack(graph: Graph, budget: int, rng: Rng | int = 0) -> AttackResult:
    """Toggle ``budget`` distinct node pairs drawn uniformly without replacement."""
    rng = make_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    n = graph.n_nodes
    n_pairs = n * (n - 1) // 2
    if not 0 <= budget <= n_pairs:
        raise GraphError(f"budget {budget} infeasible: graph has {n_pairs} node pairs")
    index = rng.choice(n_pairs, size=budget, replace=False) if budget else np.zeros(0, dtype=np.int64)
    pairs = _pair_from_index(np.asarray(index, dtype=np.int64), n)
    perturbation = Perturbation(tuple(map(tuple, pairs.tolist())))
    return AttackResult(perturbation, apply_perturbation(graph, perturbation), "random", budget)


def train_surrogate(graph: Graph, seed: int = 0, cfg: TrainConfig | None = None) -> np.ndarray:
    """Class scores ``X W`` of a linearized two-layer GCN (``W = W0 W1``, no ReLU) trained on ``graph``."""
    base = cfg or TrainConfig(seed=seed)
    lin_cfg = TrainConfig(
        epochs=base.epochs,
        lr=base.lr,
        weight_decay=base.weight_decay,
        hidden_dim=base.hidden_dim,
        patience=base.patience,
        seed=base.seed,
        activation="linear",
    )
    model, _ = train_gcn(graph, lin_cfg)
    return surrogate_scores(model, graph)


def surrogate_scores(model: GcnModel, graph: Graph) -> np.ndarray:
    weights = model.w0.value @ model.w1.value
    x = as_operand(graph.features)
    return np.asarray(x @ weights)


def surrogate_target_logits(adjacency: sp.csr_matrix, xw: np.ndarray, target: int) -> np.ndarray:
    """Row ``target`` of ``Â² X W`` computed directly (reference path)."""
    n = adjacency.shape[0]
    a_tilde = adjacency + sp.identity(n, format="csr")
    d_inv_sqrt = 1.0 / np.sqrt(np.asarray(a_tilde.sum(axis=1)).ravel())
    a_hat = sp.diags(d_inv_sqrt) @ a_tilde @ sp.diags(d_inv_sqrt)
    row = a_hat[target] @ a_hat
    return np.asarray(row @ xw).ravel()


def flip_candidate_logits(adjacency: sp.csr_matrix, xw: np.ndarray, target: int) -> tuple[np.ndarray, np.ndarray]:
    """Surrogate logits of ``target`` after flipping ``(target, j)``, for every ``j`` at once.

    Returns ``(logits, sign)`` where ``logits[j]`` is the C-vector after the flip and
    ``sign[j]`` is +1 for an insertion and -1 for a deletion. Row ``target`` is
    meaningless and must be masked by the caller.

    Uses ``[Â² H]_t = d_t^{-1/2} sum_k Ã_tk G_k / d_k`` with ``G = Ã D^{-1/2} H``
    and updates only the terms touched by the flip.
    """
    t = target
    deg = np.asarray(adjacency.sum(axis=1)).ravel() + 1.0
    u = xw / np.sqrt(deg)[:, None]
    g = adjacency @ u + u
    row = adjacency[t].toarray().ravel()
    nbr = adjacency[t].indices
    s_const = (g[nbr] / deg[nbr, None]).sum(axis=0)
    w_const = float(np.sum(1.0 / deg[nbr]))
    weights = np.zeros(deg.size)
    weights[nbr] = 1.0 / deg[nbr]
    c = adjacency @ weights

    sign = np.where(row > 0, -1.0, 1.0)
    a_old = row
    a_new = a_old + sign
    d_t_new = deg[t] + sign
    d_j_new = deg + sign
    u_t_new = xw[t][None, :] / np.sqrt(d_t_new)[:, None]
    u_j_new = xw / np.sqrt(d_j_new)[:, None]
    du_t = u_t_new - u[t][None, :]
    du_j = u_j_new - u

    g_t_new = g[t][None, :] - a_old[:, None] * u + du_t + a_new[:, None] * u_j_new
    g_j_new = g + du_j + u_t_new  # only used where the edge is inserted (a_old = 0)
    inner = (
        s_const[None, :]
        - (a_old / deg)[:, None] * g
        + du_t * (w_const - a_old / deg)[:, None]
        + du_j * c[:, None]
    )
    total = g_t_new / d_t_new[:, None] + inner + (a_new / d_j_new)[:, None] * g_j_new
    with np.errstate(divide="ignore", invalid="ignore"):
        logits = total / np.sqrt(d_t_new)[:, None]
    return logits, sign


def classification_margin(logits: np.ndarray, label: int) -> np.ndarray:
    """True-class logit minus the best other logit (row-wise for 2-d input)."""
    logits = np.atleast_2d(logits)
    others = logits.copy()
    others[:, label] = -np.inf
    return logits[:, label] - others.max(axis=1)


def targeted_surrogate_attack(
    graph: Graph, target: int, budget: int, surrogate: np.ndarray | None = None, seed: int = 0
) -> AttackResult:
    """Greedy direct structure attack on one node (stand-in for Nettack).

    Each step flips the pair ``(target, j)`` that most lowers the linearized
    surrogate's classification margin for ``target``. Deletions that would
    leave a node without neighbours are not considered. Stops early, with
    ``shortfall=True``, when no flip lowers the margin.
    """
    n = graph.n_nodes
    if not 0 <= target < n:
        raise GraphError(f"target {target} out of range")
    if budget < 0:
        raise GraphError("budget must be >= 0")
    xw = train_surrogate(graph, seed=seed) if surrogate is None else surrogate
    label = int(graph.labels[target])
    adj = graph.adjacency.copy()
    flips: list[tuple[int, int]] = []
    used = np.zeros(n, dtype=bool)
    used[target] = True
    margin = float(classification_margin(surrogate_target_logits(adj, xw, target), label)[0])
    shortfall = False
    for _ in range(budget):
        logits, sign = flip_candidate_logits(adj, xw, target)
        deg = np.asarray(adj.sum(axis=1)).ravel()
        blocked = used.copy()
        deleting = sign < 0
        blocked |= deleting & ((deg == 1) | (deg[target] == 1))
        margins = classification_margin(logits, label)
        margins[blocked] = np.inf
        j = int(np.argmin(margins))
        if not np.isfinite(margins[j]) or margins[j] >= margin:
            shortfall = True
            break
        margin = float(margins[j])
        used[j] = True
        flips.append((min(target, j), max(target, j)))
        adj = apply_perturbation(graph, Perturbation(tuple(flips))).adjacency
    perturbation = Perturbation(tuple(flips))
    if shortfall:
        logger.info("target %d: only %d of %d margin-reducing flips found", target, len(flips), budget)
    return AttackResult(
        perturbation,
        apply_perturbation(graph, perturbation),
        "surrogate-greedy",
        budget,
        target=target,
        shortfall=shortfall,
        meta={"final_margin": margin},
    )


def dice_untargeted_attack(graph: Graph, rate: float, rng: Rng | int = 0) -> AttackResult:
    """Label-aware random flips (stand-in for Metattack).

    ``round(rate * |E|)`` flips; each one deletes a same-label edge or inserts a
    different-label non-edge with equal probability, falling back to the other
    move when one pool is exhausted. Uses ground-truth labels.
    """
    if not 0 < rate <= 1:
        raise GraphError("rate must be in (0, 1]")
    rng = make_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    n = graph.n_nodes
    labels = graph.labels
    budget = int(np.floor(rate * graph.n_edges + 0.5))
    edges = graph.edge_list()
    delete_pool = [tuple(e) for e in edges[labels[edges[:, 0]] == labels[edges[:, 1]]].tolist()]
    existing = set(map(tuple, edges.tolist()))
    chosen: list[tuple[int, int]] = []
    taken: set[tuple[int, int]] = set()

    def draw_insertion():
        for _ in range(10_000):
            i, j = (int(v) for v in rng.integers(0, n, size=2))
            pair = (min(i, j), max(i, j))
            if i != j and labels[i] != labels[j] and pair not in existing and pair not in taken:
                return pair
        # Dense fallback when rejection sampling keeps missing.
        iu, ju = np.triu_indices(n, k=1)
        ok = labels[iu] != labels[ju]
        pool = [p for p in zip(iu[ok].tolist(), ju[ok].tolist()) if p not in existing and p not in taken]
        return pool[int(rng.integers(len(pool)))] if pool else None

    shortfall = False
    for _ in range(budget):
        want_delete = rng.random() < 0.5
        pair = None
        if want_delete and delete_pool:
            pair = delete_pool.pop(int(rng.integers(len(delete_pool))))
        else:
            pair = draw_insertion()
            if pair is None and delete_pool:
                pair = delete_pool.pop(int(rng.integers(len(delete_pool))))
        if pair is None:
            shortfall = True
            break
        taken.add(pair)
        chosen.append(pair)
    perturbation = Perturbation(tuple(chosen))
    return AttackResult(
        perturbation, apply_perturbation(graph, perturbation), "dice", budget, shortfall=shortfall, meta={"rate": rate}
    )
