"""Two-layer GCN node classifier: ``softmax(Â relu(Â X W0) W1)``."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator

from .graph import Graph, normalize_adjacency
from .nn import (
    NonFiniteError,
    Parameter,
    adam_step,
    check_finite,
    glorot_init,
    make_rng,
    masked_cross_entropy,
    relu,
    relu_backward,
    spmm,
)
from .validation import check_graph, check_is_fitted, check_node_ids

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "linear")


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 0.01
    weight_decay: float = 5e-4
    hidden_dim: int = 16
    patience: int = 30
    seed: int = 0
    activation: str = "relu"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")


@dataclass
class GcnModel:
    w0: Parameter
    w1: Parameter
    activation: str = "relu"

    @property
    def hidden_dim(self) -> int:
        return self.w0.shape[1]

    def to_dict(self) -> dict:
        return {
            "kind": "gcn",
            "activation": self.activation,
            "shapes": {"w0": list(self.w0.shape), "w1": list(self.w1.shape)},
            "weights": {"w0": self.w0.value.ravel().tolist(), "w1": self.w1.value.ravel().tolist()},
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "GcnModel":
        if payload.get("kind") != "gcn":
            raise ValueError("checkpoint is not a GCN model")
        shapes, weights = payload["shapes"], payload["weights"]
        w0 = np.asarray(weights["w0"], dtype=np.float64).reshape(shapes["w0"])
        w1 = np.asarray(weights["w1"], dtype=np.float64).reshape(shapes["w1"])
        return cls(Parameter(w0), Parameter(w1), payload.get("activation", "relu"))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "GcnModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def init_gcn(n_features: int, hidden_dim: int, n_classes: int, seed: int, activation: str = "relu") -> GcnModel:
    rng = make_rng(seed)
    w0 = glorot_init(n_features, hidden_dim, rng)
    w1 = glorot_init(hidden_dim, n_classes, rng)
    return GcnModel(Parameter(w0), Parameter(w1), activation)


def as_operand(x):
    """Features in the cheapest form for ``X @ W``: CSR when mostly zeros."""
    if sp.issparse(x):
        out = sp.csr_matrix(x, dtype=np.float64)
        out.sort_indices()
        return out
    x = np.asarray(x, dtype=np.float64)
    if x.size and np.count_nonzero(x) < 0.1 * x.size:
        out = sp.csr_matrix(x)
        out.sort_indices()
        return out
    return x


def _matmul(x, w):
    return spmm(x, w) if sp.issparse(x) else x @ w


def gcn_forward(model: GcnModel, a_hat, x) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(logits, pre_activation_hidden)``; softmax is left to the loss."""
    if x.shape[1] != model.w0.shape[0]:
        raise ValueError(f"features have {x.shape[1]} columns, model expects {model.w0.shape[0]}")
    if a_hat.shape[1] != x.shape[0]:
        raise ValueError(f"adjacency {a_hat.shape} does not match {x.shape[0]} feature rows")
    hidden = spmm(a_hat, _matmul(x, model.w0.value))
    act = relu(hidden) if model.activation == "relu" else hidden
    logits = spmm(a_hat, act @ model.w1.value)
    return logits, hidden


def gcn_backward(model: GcnModel, a_hat, x, hidden: np.ndarray, grad_logits: np.ndarray):
    """Gradients of the loss w.r.t. ``(w0, w1)`` given ``d loss / d logits``.

    ``a_hat`` is symmetric, so its transpose is itself.
    """
    act = relu(hidden) if model.activation == "relu" else hidden
    d_prop = spmm(a_hat, grad_logits)  # Â^T G
    grad_w1 = act.T @ d_prop
    d_act = d_prop @ model.w1.value.T
    d_hidden = relu_backward(hidden, d_act) if model.activation == "relu" else d_act
    d_xw = spmm(a_hat, d_hidden)
    grad_w0 = np.asarray(x.T @ d_xw)
    return grad_w0, grad_w1


def gcn_loss_and_grads(model: GcnModel, a_hat, x, labels, mask, weight_decay: float = 0.0):
    """Masked cross-entropy plus ``weight_decay/2 * ||W0||^2`` and analytic gradients."""
    logits, hidden = gcn_forward(model, a_hat, x)
    loss, grad_logits = masked_cross_entropy(logits, labels, mask)
    grad_w0, grad_w1 = gcn_backward(model, a_hat, x, hidden, grad_logits)
    if weight_decay:
        loss += 0.5 * weight_decay * float(np.sum(model.w0.value**2))
        grad_w0 = grad_w0 + weight_decay * model.w0.value
    return loss, grad_w0, grad_w1


def accuracy(logits: np.ndarray, labels, node_ids) -> float:
    node_ids = np.asarray(node_ids, dtype=np.int64)
    if node_ids.size == 0:
        raise ValueError("accuracy over an empty node set")
    # np.argmax returns the lowest index among ties.
    return float(np.mean(np.argmax(logits[node_ids], axis=1) == np.asarray(labels)[node_ids]))


def train_gcn(graph: Graph, cfg: TrainConfig | None = None, a_hat=None) -> tuple[GcnModel, list[dict]]:
    """Full-batch Adam training; returns the snapshot with the best validation accuracy.

    ``history`` has one dict per epoch with train/val loss and accuracy measured
    on the parameters *before* that epoch's update.
    """
    cfg = cfg or TrainConfig()
    split = graph.split
    if split.train_ids.size == 0 or split.val_ids.size == 0:
        raise ValueError("train_gcn needs nonempty train and val sets")
    a_hat = normalize_adjacency(graph) if a_hat is None else a_hat
    x = as_operand(graph.features)
    labels = graph.labels
    model = init_gcn(graph.n_features, cfg.hidden_dim, graph.n_classes, cfg.seed, cfg.activation)

    history: list[dict] = []
    best_acc, best_epoch = -1.0, 0
    best_weights = (model.w0.value.copy(), model.w1.value.copy())
    for epoch in range(cfg.epochs):
        logits, hidden = gcn_forward(model, a_hat, x)
        train_loss, grad_logits = masked_cross_entropy(logits, labels, split.train_ids)
        val_loss, _ = masked_cross_entropy(logits, labels, split.val_ids)
        if not np.isfinite(train_loss):
            raise NonFiniteError(f"GCN loss diverged at epoch {epoch}: {train_loss}")
        val_acc = accuracy(logits, labels, split.val_ids)
        history.append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "train_acc": accuracy(logits, labels, split.train_ids),
                "val_loss": val_loss,
                "val_acc": val_acc,
            }
        )
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_weights = (model.w0.value.copy(), model.w1.value.copy())
        elif epoch - best_epoch >= cfg.patience:
            logger.debug("early stop at epoch %d (best %d)", epoch, best_epoch)
            break

        grad_w0, grad_w1 = gcn_backward(model, a_hat, x, hidden, grad_logits)
        model.w0.grad[...] = grad_w0 + cfg.weight_decay * model.w0.value
        model.w1.grad[...] = grad_w1
        adam_step(model.w0, cfg.lr)
        adam_step(model.w1, cfg.lr)
        check_finite("GCN weights", model.w0.value)
        check_finite("GCN weights", model.w1.value)

    model.w0.value[...] = best_weights[0]
    model.w1.value[...] = best_weights[1]
    return model, history


def predict_logits(model: GcnModel, graph: Graph, a_hat=None) -> np.ndarray:
    a_hat = normalize_adjacency(graph) if a_hat is None else a_hat
    logits, _ = gcn_forward(model, a_hat, as_operand(graph.features))
    return logits


def evaluate(model: GcnModel, graph: Graph, node_ids, a_hat=None) -> float:
    """Fraction of ``node_ids`` whose argmax logit (ties to lowest class) equals the label."""
    node_ids = check_node_ids(node_ids, graph.n_nodes)
    return accuracy(predict_logits(model, graph, a_hat), graph.labels, node_ids)


class GCNClassifier(BaseEstimator):
    """Estimator wrapper around :func:`train_gcn`.

    ``fit`` consumes a :class:`Graph` and uses its train/val split; ``predict``
    returns a class id for every node of the graph passed in.
    """

    def __init__(self, hidden_dim=16, lr=0.01, weight_decay=5e-4, epochs=200, patience=30, seed=0, activation="relu"):
        self.hidden_dim = hidden_dim
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.patience = patience
        self.seed = seed
        self.activation = activation

    def _config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            lr=self.lr,
            weight_decay=self.weight_decay,
            hidden_dim=self.hidden_dim,
            patience=self.patience,
            seed=self.seed,
            activation=self.activation,
        )

    def fit(self, graph: Graph, y=None):
        check_graph(graph)
        self.model_, self.history_ = train_gcn(graph, self._config())
        self.n_classes_ = graph.n_classes
        self.best_val_accuracy_ = max(h["val_acc"] for h in self.history_)
        return self

    def decision_function(self, graph: Graph) -> np.ndarray:
        check_is_fitted(self, "model_")
        check_graph(graph)
        return predict_logits(self.model_, graph)

    def predict(self, graph: Graph) -> np.ndarray:
        return np.argmax(self.decision_function(graph), axis=1)

    def score(self, graph: Graph, node_ids=None) -> float:
        check_is_fitted(self, "model_")
        ids = graph.split.test_ids if node_ids is None else node_ids
        return evaluate(self.model_, graph, ids)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
