"""Analytic cost models for attention, expert compute and all-to-all traffic."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig


def attention_time(B: int, L: int, d: int, P: float) -> float:
    """Modeled time of one attention layer for ``B`` sequences padded to length ``L``.

    Three ``d x d`` projections (Q, K, V) cost ``3*B*L*d^2`` operations and the
    score/value products cost ``2*B*L^2*d``; softmax is ignored. Returns
    milliseconds when ``P`` is in operations per millisecond.
    """
    if B == 0:
        return 0.0
    ops = 3 * B * L * d * d + 2 * B * L * L * d
    # exact integer ratio, rounded once (int / float would round ops first)
    num, den = float(P).as_integer_ratio()
    return ops * den / num


@dataclass(frozen=True)
class ContentionModel:
    """Linear slowdown when several active experts share one device."""

    alpha: float = 0.44

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")

    def factor(self, n: int) -> float:
        if n < 1:
            raise ValueError("co-located expert count must be >= 1")
        return 1.0 + self.alpha * (n - 1)


def expert_flops(tokens: int, model: ModelConfig) -> int:
    # two projections, multiply-accumulate counted as 2 ops each
    return 4 * tokens * model.d_model * model.d_hidden


def expert_time(tokens: int, model: ModelConfig, P: float, co_located_active: int,
                contention: ContentionModel = ContentionModel()) -> float:
    return expert_flops(tokens, model) / P * contention.factor(co_located_active)


def expert_transfer_bytes(model: ModelConfig) -> int:
    """Bytes needed to ship one expert (two ``d_model x d_hidden`` matrices)."""
    return 2 * model.d_model * model.d_hidden * model.bytes_per_scalar


def traffic_matrix(num_devices: int) -> np.ndarray:
    return np.zeros((num_devices, num_devices), dtype=np.int64)


def off_diagonal_bytes(traffic: np.ndarray) -> int:
    return int(traffic.sum() - np.trace(traffic))


def all_to_all_time(traffic: np.ndarray, link_bandwidth: float, latency_ms: float = 0.0) -> float:
    """Bandwidth-bound all-to-all time: the busiest device's send+receive volume.

    ``traffic[src, dst]`` holds bytes; the diagonal is intra-device and free.
    ``latency_ms`` is charged once per distinct peer a device talks to.
    """
    traffic = np.asarray(traffic)
    if traffic.ndim != 2 or traffic.shape[0] != traffic.shape[1]:
        raise ValueError(f"traffic matrix must be square, got shape {traffic.shape}")
    if traffic.size == 0:
        return 0.0
    off = traffic.astype(np.float64, copy=True)
    np.fill_diagonal(off, 0.0)
    volume = off.sum(axis=1) + off.sum(axis=0)
    bandwidth = np.broadcast_to(np.asarray(link_bandwidth, dtype=np.float64), volume.shape)
    per_device = volume / bandwidth
    if latency_ms:
        peers = (off > 0).sum(axis=1) + (off > 0).sum(axis=0)
        per_device = per_device + latency_ms * peers
    return float(per_device.max())


@dataclass
class Dispatch:
    """Every gate copy of one block: where it starts, where it is computed.

    Arrays are aligned, one entry per (token, expert) copy. ``kept`` is False
    for copies elided by condensation; ``rep`` indexes the copy whose expert
    output stands in for it (itself when kept).
    """

    token: np.ndarray
    seq: np.ndarray
    expert: np.ndarray
    weight: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    kept: np.ndarray
    rep: np.ndarray

    @property
    def num_copies(self) -> int:
        return int(self.token.size)

    @property
    def dispatched(self) -> int:
        return int(self.kept.sum())

    @property
    def condensed(self) -> int:
        return self.num_copies - self.dispatched

    def traffic(self, num_devices: int, token_bytes: int) -> np.ndarray:
        m = traffic_matrix(num_devices)
        np.add.at(m, (self.src[self.kept], self.dst[self.kept]), token_bytes)
        return m

    def device_load(self, num_devices: int, num_experts: int) -> np.ndarray:
        """[device, expert] number of kept copies computed there."""
        load = np.zeros((num_devices, num_experts), dtype=np.int64)
        np.add.at(load, (self.dst[self.kept], self.expert[self.kept]), 1)
        return load
