import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from luffy_sim.config import ClusterConfig, ModelConfig, WorkloadSpec
from luffy_sim.workload import (CapacityError, TraceError, embedding_matrix, evolve_block, gen_batch,
                                load_trace, pairwise_normalized_cosine, regate, save_trace,
                                sequence_expert_counts)

MODEL = ModelConfig(d_model=32, experts_per_layer=8, top_k=2)
CLUSTER = ClusterConfig(num_devices=4)

# chi-square critical value for 7 degrees of freedom at p = 0.001
CHI2_7DF_P001 = 24.322


def test_same_seed_same_batch():
    spec = WorkloadSpec(batch_size=6, seed=11)
    assert gen_batch(MODEL, CLUSTER, spec) == gen_batch(MODEL, CLUSTER, spec)
    assert gen_batch(MODEL, CLUSTER, spec) != gen_batch(MODEL, CLUSTER, WorkloadSpec(batch_size=6, seed=12))


@given(st.integers(0, 2**63), st.integers(1, 4))
def test_gates_are_valid(seed, k):
    model = ModelConfig(d_model=8, experts_per_layer=6, top_k=k)
    batch = gen_batch(model, CLUSTER, WorkloadSpec(batch_size=3, length_min=1, length_max=6, seed=seed))
    for t in batch.tokens:
        experts = [e for e, _ in t.gates]
        weights = [w for _, w in t.gates]
        assert len(experts) == k == len(set(experts))
        assert all(0 <= e < 6 for e in experts)
        assert abs(sum(weights) - 1) < 1e-12 and all(w > 0 for w in weights)
    assert len({t.token_id for t in batch.tokens}) == len(batch.tokens)


def test_lengths_in_range():
    for shape in ("uniform", "bimodal"):
        batch = gen_batch(MODEL, CLUSTER, WorkloadSpec(batch_size=50, length_min=3, length_max=9,
                                                       length_shape=shape))
        assert all(3 <= s.length <= 9 for s in batch.sequences)


def test_large_concentration_is_uniform():
    spec = WorkloadSpec(batch_size=1000, length_min=16, length_max=16, bias_concentration=1e6, seed=5)
    batch = gen_batch(ModelConfig(d_model=4, experts_per_layer=8, top_k=1), CLUSTER, spec)
    counts = sequence_expert_counts(batch, 8).sum(axis=0)
    expected = counts.sum() / 8
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < CHI2_7DF_P001


def test_small_concentration_concentrates():
    """Lower concentration activates no more distinct experts per sequence on average."""
    model = ModelConfig(d_model=4, experts_per_layer=8, top_k=1)

    def mean_distinct(alpha):
        vals = []
        for seed in range(20):
            b = gen_batch(model, CLUSTER, WorkloadSpec(batch_size=20, length_min=16, length_max=16,
                                                       bias_concentration=alpha, seed=seed))
            vals.append((sequence_expert_counts(b, 8) > 0).sum(axis=1).mean())
        return float(np.mean(vals))

    means = [mean_distinct(a) for a in (0.01, 0.1, 1.0, 100.0)]
    assert means == sorted(means)


def test_cluster_tightness_gives_similar_pairs():
    spec = WorkloadSpec(batch_size=20, cluster_count=1, cluster_tightness=0.9, drift=0.0, seed=2)
    batch = gen_batch(MODEL, CLUSTER, spec)
    top1 = np.array([t.gates[0][0] for t in batch.tokens])
    sim = pairwise_normalized_cosine(embedding_matrix(batch))
    same = (top1[:, None] == top1[None, :]) & ~np.eye(top1.size, dtype=bool)
    assert same.sum() > 1000
    assert (sim[same] >= 0.75).mean() >= 0.9


def test_evolve_without_drift_is_identity():
    batch = gen_batch(MODEL, CLUSTER, WorkloadSpec(batch_size=4))
    out = evolve_block(batch, 1, 0.0)
    assert out.tokens == batch.tokens and out.block_index == 1


def test_rotation_preserves_cosines():
    batch = gen_batch(MODEL, CLUSTER, WorkloadSpec(batch_size=4))
    out = evolve_block(batch, 1, 0.0, rotate=True)
    before = pairwise_normalized_cosine(embedding_matrix(batch))
    after = pairwise_normalized_cosine(embedding_matrix(out))
    assert not np.allclose(embedding_matrix(batch), embedding_matrix(out))
    assert np.max(np.abs(before - after)) < 1e-12


def test_small_drift_keeps_similar_pairs_similar():
    batch = gen_batch(MODEL, CLUSTER, WorkloadSpec(batch_size=16, seed=4))
    out = evolve_block(batch, 1, 0.05, seed=4)
    before = pairwise_normalized_cosine(embedding_matrix(batch))
    after = pairwise_normalized_cosine(embedding_matrix(out))
    iu = np.triu_indices(before.shape[0], k=1)
    similar = before[iu] > 0.8
    assert similar.sum() > 100
    assert (np.abs(after[iu] - before[iu])[similar] < 0.2).mean() >= 0.9


def test_evolve_rejects_negative_drift():
    with pytest.raises(ValueError):
        evolve_block(gen_batch(MODEL, CLUSTER, WorkloadSpec(batch_size=1)), 1, -0.1)


def test_regate_fraction_and_validity():
    batch = gen_batch(MODEL, CLUSTER, WorkloadSpec(batch_size=30, seed=9))
    assert regate(batch, 1, 0.0, 2).tokens == batch.tokens
    out = regate(batch, 1, 0.5, 2, seed=9)
    changed = np.mean([a.gates != b.gates for a, b in zip(batch.tokens, out.tokens)])
    assert 0.2 < changed < 0.6
    assert regate(batch, 1, 0.5, 2, seed=9) == out


def test_capacity_error():
    with pytest.raises(CapacityError):
        gen_batch(MODEL, ClusterConfig(num_devices=2, device_capacity=5),
                  WorkloadSpec(batch_size=4, length_min=10, length_max=10))


def test_trace_round_trip(tmp_path):
    batch = gen_batch(MODEL, CLUSTER, WorkloadSpec(batch_size=5), loss_initial=7.5, loss_prev=3.25)
    path = tmp_path / "t.jsonl"
    save_trace(batch, path)
    assert load_trace(path) == batch


def test_trace_errors(tmp_path):
    path = tmp_path / "t.jsonl"
    path.write_text("")
    with pytest.raises(TraceError):
        load_trace(path)
    save_trace(gen_batch(MODEL, CLUSTER, WorkloadSpec(batch_size=3)), path)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(TraceError) as info:
        load_trace(path)
    assert info.value.line is not None
    lines = text.splitlines()
    rec = json.loads(lines[1])
    rec["tokens"][0]["gates"] = [[0, 0.5]]
    path.write_text("\n".join([lines[0], json.dumps(rec)] + lines[2:]) + "\n")
    with pytest.raises(TraceError):
        load_trace(path)
    with pytest.raises(TraceError):
        load_trace(tmp_path / "missing.jsonl")
