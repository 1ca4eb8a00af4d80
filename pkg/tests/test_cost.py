from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from luffy_sim.config import ModelConfig
from luffy_sim.cost import (ContentionModel, all_to_all_time, attention_time, expert_time,
                            expert_transfer_bytes)


def attention_oracle(B, L, d, P):
    """Exact rational evaluation, rounded once."""
    return float(Fraction(3 * B * L * d * d + 2 * B * L * L * d) / Fraction(P))


@pytest.mark.parametrize("args,expected", [
    ((0, 7, 8, 1), 0.0),
    ((1, 1, 1, 1), 5.0),
    ((2, 4, 8, 1), 2048.0),
])
def test_attention_examples(args, expected):
    assert attention_time(*args) == expected


dims = st.tuples(st.integers(0, 64), st.integers(0, 512), st.integers(1, 1024),
                 st.floats(1e-3, 1e9, allow_nan=False))


@given(dims)
def test_attention_matches_closed_form(args):
    assert attention_time(*args) == attention_oracle(*args)


@given(dims)
def test_attention_linear_in_batch(args):
    B, L, d, P = args
    assert attention_time(2 * B, L, d, P) == 2 * attention_time(B, L, d, P)


@given(dims)
def test_attention_quadratic_in_length(args):
    B, L, d, P = args
    # T(B, 2L) = 2*T_proj + 4*T_dot
    assert attention_time(B, 2 * L, d, P) == pytest.approx(
        float(Fraction(2 * 3 * B * L * d * d + 4 * 2 * B * L * L * d) / Fraction(P)), rel=1e-15)


@given(dims)
def test_doubling_speed_halves_time(args):
    B, L, d, P = args
    assert attention_time(B, L, d, 2 * P) == pytest.approx(attention_time(B, L, d, P) / 2, rel=1e-15)
    m = ModelConfig(d_model=d)
    assert expert_time(B * L, m, 2 * P, 2) == pytest.approx(expert_time(B * L, m, P, 2) / 2, rel=1e-15)


def test_contention_calibration():
    c = ContentionModel(0.44)
    assert c.factor(1) == 1.0
    assert c.factor(3) == pytest.approx(1.88, abs=1e-12)
    assert c.factor(2) == pytest.approx(1.44, abs=1e-12)
    with pytest.raises(ValueError):
        c.factor(0)
    with pytest.raises(ValueError):
        ContentionModel(-0.1)


def test_expert_time_formula():
    m = ModelConfig(d_model=4, d_hidden=8)
    assert expert_time(10, m, 2.0, 1) == 4 * 10 * 4 * 8 / 2.0
    assert expert_time(10, m, 2.0, 3) == pytest.approx(4 * 10 * 4 * 8 / 2.0 * 1.88)
    assert expert_time(0, m, 2.0, 1) == 0.0


def test_expert_transfer_bytes():
    assert expert_transfer_bytes(ModelConfig(d_model=768, d_hidden=3072, bytes_per_scalar=4)) == 18_874_368
    assert expert_transfer_bytes(ModelConfig(d_model=1, d_hidden=1, bytes_per_scalar=4)) == 8
    fp16 = expert_transfer_bytes(ModelConfig(d_model=768, d_hidden=3072, bytes_per_scalar=2))
    assert fp16 * 2 == 18_874_368


def test_all_to_all_examples():
    assert all_to_all_time(np.zeros((3, 3)), 100.0) == 0.0
    assert all_to_all_time(np.array([[0, 100], [100, 0]]), 100.0) == 2.0
    assert all_to_all_time(np.diag([5, 7, 9]), 1.0) == 0.0
    with pytest.raises(ValueError):
        all_to_all_time(np.zeros((2, 3)), 1.0)


def test_all_to_all_latency_per_peer():
    m = np.array([[0, 100, 0], [0, 0, 0], [0, 0, 0]])
    # device 0 sends 100 bytes to one peer
    assert all_to_all_time(m, 100.0, latency_ms=0.5) == 1.5


matrices = st.integers(1, 5).flatmap(
    lambda n: st.lists(st.integers(0, 10_000), min_size=n * n, max_size=n * n).map(
        lambda xs: np.array(xs, dtype=np.int64).reshape(n, n)))


@given(matrices, st.data())
def test_all_to_all_monotone(m, data):
    n = m.shape[0]
    i = data.draw(st.integers(0, n - 1))
    j = data.draw(st.integers(0, n - 1))
    bumped = m.copy()
    bumped[i, j] += data.draw(st.integers(0, 5000))
    assert all_to_all_time(bumped, 3.0) >= all_to_all_time(m, 3.0)


@given(matrices)
def test_all_to_all_brute_force(m):
    n = m.shape[0]
    worst = 0.0
    for g in range(n):
        vol = sum(m[g, k] for k in range(n) if k != g) + sum(m[k, g] for k in range(n) if k != g)
        worst = max(worst, vol / 7.0)
    assert all_to_all_time(m, 7.0) == pytest.approx(worst, rel=1e-12)
