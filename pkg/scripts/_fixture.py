"""Shared small configuration used by the experiment scripts."""
from luffy_sim.config import ClusterConfig, LossModel, ModelConfig, SimConfig, WorkloadSpec

BASE = SimConfig(
    model=ModelConfig(num_blocks=4, d_model=64, d_hidden=32, experts_per_layer=8, top_k=2),
    cluster=ClusterConfig(num_devices=8),
    workload=WorkloadSpec(batch_size=32, length_min=16, length_max=64, bias_concentration=0.1,
                          cluster_tightness=0.9, seed=0),
    loss=LossModel(l_ini=10.0, l_final=2.0, kappa=0.05),
)
