"""Simulator for communication-efficient expert-parallel MoE training.

Models sequence migration and token condensation against token-moving
(Vanilla) and expert-moving (EXT, HYT) baselines.
"""
from .config import (BatchState, ClusterConfig, LossModel, ModelConfig, SequenceRecord, SimConfig,
                     TokenRecord, WorkloadSpec, default_placement, load_config, validate)
from .engine import STRATEGIES, run, run_many, simulate_iteration
from .report import summarize
from .workload import gen_batch, load_trace, save_trace

__version__ = "0.1.0"
