"""Class-wise splitting of vision transformers for edge deployment.

A ViT is split into sub-models that each cover a subset of the classes,
structurally pruned to fit a memory budget, placed on energy-limited devices
and recombined by a small fusion MLP over their class-token embeddings.
"""
from .assignment import AssignmentPlan, DeviceSpec, SubModelProfile, exact_assign, greedy_assign, objective_value, verify_plan
from .config import ConfigError, ExperimentConfig, parse_config, serialize_config
from .cost import comm_time, feature_payload_bytes, fc_macs, mem_mib, mhsa_macs, model_macs, param_count
from .data import SyntheticDatasetSpec, generate_synthetic
from .estimator import SplitViTClassifier
from .fusion import FusionMLPClassifier, train_fusion
from .persistence import load_weights, save_weights
from .pruning import PruneSpec, SubModel, prune_pipeline
from .simulator import Fleet, FleetTemplate, RunReport, latency_curve, simulate
from .splitting import InfeasibleBudgetError, SplitRequest, split_loop
from .vit import PRESETS, ViTConfig, ViTWeights, build_random, forward_embedding, forward_logits, preset

__version__ = "0.1.0"

__all__ = [
    "AssignmentPlan",
    "DeviceSpec",
    "SubModelProfile",
    "exact_assign",
    "greedy_assign",
    "objective_value",
    "verify_plan",
    "ConfigError",
    "ExperimentConfig",
    "parse_config",
    "serialize_config",
    "comm_time",
    "feature_payload_bytes",
    "fc_macs",
    "mem_mib",
    "mhsa_macs",
    "model_macs",
    "param_count",
    "SyntheticDatasetSpec",
    "generate_synthetic",
    "SplitViTClassifier",
    "FusionMLPClassifier",
    "train_fusion",
    "load_weights",
    "save_weights",
    "PruneSpec",
    "SubModel",
    "prune_pipeline",
    "Fleet",
    "FleetTemplate",
    "RunReport",
    "latency_curve",
    "simulate",
    "InfeasibleBudgetError",
    "SplitRequest",
    "split_loop",
    "PRESETS",
    "ViTConfig",
    "ViTWeights",
    "build_random",
    "forward_embedding",
    "forward_logits",
    "preset",
]
