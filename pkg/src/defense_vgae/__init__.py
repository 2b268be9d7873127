"""Graph purification with a variational graph autoencoder, plus GCN baselines and attacks."""

from .attacks import (
    AttackResult,
    Perturbation,
    apply_perturbation,
    dice_untargeted_attack,
    random_flip_attack,
    read_perturbation,
    targeted_surrogate_attack,
    write_perturbation,
)
from .datasets import load_dataset, load_generic, load_planetoid_index, load_planetoid_raw, save_generic, synthetic_citation_graph
from .defense import (
    DefendedGraph,
    DefenseConfig,
    DefenseVGAE,
    JaccardPurifier,
    SVDPurifier,
    defense_vgae,
    gcn_jaccard_defense,
    gcn_svd_defense,
    sparsify,
)
from .gcn import GCNClassifier, GcnModel, TrainConfig, evaluate, predict_logits, train_gcn
from .graph import DataSplit, Graph, GraphError, build_graph, density, normalize_adjacency
from .linkpred import held_out_auc, split_edges
from .vgae import VGAE, VgaeModel, train_vgae

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
