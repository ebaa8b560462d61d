"""Desk-scale metanetwork-assisted structural pruning."""
from .workbench.data import Dataset, gen_dataset, train_test
from .graphcodec import NeuralGraph, graph_to_network, network_to_graph
from .metanet import MetanetConfig, Metanetwork, init_metanetwork, metanet_apply
from .netmodel import NetworkSpec, TrainConfig, build_architecture, count_costs, forward_logits, train
from .pruner import CriterionConfig, apply_prune, build_pruning_groups, plan_prune, speed_up

__version__ = "0.1.0"

__all__ = [
    "CriterionConfig",
    "Dataset",
    "MetanetConfig",
    "Metanetwork",
    "NetworkSpec",
    "NeuralGraph",
    "TrainConfig",
    "apply_prune",
    "build_architecture",
    "build_pruning_groups",
    "count_costs",
    "forward_logits",
    "gen_dataset",
    "graph_to_network",
    "init_metanetwork",
    "metanet_apply",
    "network_to_graph",
    "plan_prune",
    "speed_up",
    "train",
    "train_test",
]
