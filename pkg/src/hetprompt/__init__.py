"""Prompt tuning for few-shot node classification on heterogeneous graphs.

A frozen, contrastively pre-trained graph encoder is adapted to a labeled
task by training only class tokens, per-type feature tokens, a two-view
neighborhood aggregator and a projection head.
"""
from .encoder import FrozenEncoder, PretrainConfig, pretrain
from .errors import CheckpointError, ConfigError, SplitError
from .hetgraph import HetGraph, Metapath, compose_metapath, neighbor_index
from .synth import ACM_MINI, SplitSpec, SyntheticSpec, generate, split
from .tuner import TuneConfig, baseline_finetune, evaluate, predict, predict_proba, raw_feature_baseline, tune

__all__ = [
    "ACM_MINI", "CheckpointError", "ConfigError", "FrozenEncoder", "HetGraph", "Metapath", "PretrainConfig",
    "SplitError", "SplitSpec", "SyntheticSpec", "TuneConfig", "baseline_finetune", "compose_metapath",
    "evaluate", "generate", "neighbor_index", "predict", "predict_proba", "pretrain", "raw_feature_baseline",
    "split", "tune",
]
