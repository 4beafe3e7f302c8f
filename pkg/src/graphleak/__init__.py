"""Graph reconstruction attacks and privacy-bottleneck defenses for graph neural networks."""

from .attack import AttackConfig, PriorKnowledge, build_prior, run_attack
from .defense import DefenseConfig, baseline_dp_sgd, baseline_output_noise, train_defended
from .evaluate import audit_adjacency, audit_auc, ensemble_attack
from .gnn import TrainConfig, default_model, forward, load_model, save_model, train_standard
from .graph import Graph, generate_sbm, load_dataset, save_dataset
from .rng import RngStream

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "DefenseConfig",
    "Graph",
    "PriorKnowledge",
    "RngStream",
    "TrainConfig",
    "audit_adjacency",
    "audit_auc",
    "baseline_dp_sgd",
    "baseline_output_noise",
    "build_prior",
    "default_model",
    "ensemble_attack",
    "forward",
    "generate_sbm",
    "load_dataset",
    "load_model",
    "run_attack",
    "save_dataset",
    "save_model",
    "train_defended",
    "train_standard",
]
