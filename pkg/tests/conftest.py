import pytest
from hypothesis import settings

from luffy_sim.config import ClusterConfig, LossModel, ModelConfig, SimConfig, WorkloadSpec

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def small_cfg():
    """Four devices, short sequences: fast enough for per-test simulation."""
    return SimConfig(
        model=ModelConfig(num_blocks=3, d_model=16, d_hidden=32, experts_per_layer=4, top_k=2),
        cluster=ClusterConfig(num_devices=4, compute_speed=1e6, link_bandwidth=1e4),
        workload=WorkloadSpec(batch_size=12, length_min=4, length_max=20, seed=3),
        loss=LossModel(l_ini=10.0, l_final=2.0, kappa=0.5),
    )


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
