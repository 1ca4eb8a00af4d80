"""Sequence migration: choose where each sequence is reassembled after the combine phase.

Each sequence first gets a candidate set of the ``q`` devices that would pull
the fewest expert outputs over the network; it is then placed on the
candidate whose attention cost grows least, subject to device capacity.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .config import BatchState, ClusterConfig, ModelConfig
from .cost import attention_time, traffic_matrix

Copy = Tuple[int, int]  # (token_id, expert_id)


class MigrationError(RuntimeError):
    pass


@dataclass
class DeviceLoad:
    device_id: int
    B: int = 0
    L: int = 0
    resident_tokens: int = 0

    def add(self, length: int) -> None:
        self.B += 1
        self.L = max(self.L, length)
        self.resident_tokens += length


@dataclass
class MigrationPlan:
    assignment: Dict[int, int]
    combine_traffic: np.ndarray
    chosen_f: Dict[int, int]
    candidates: Dict[int, List[int]] = field(default_factory=dict)
    loads: List[DeviceLoad] = field(default_factory=list)

    def migrated(self, current: Mapping[int, int]) -> int:
        return sum(1 for s, d in self.assignment.items() if current[s] != d)


def combine_traffic(copies: Sequence[Copy], dst: int, output_locations: Mapping[Hashable, Optional[int]],
                    token_bytes: int) -> int:
    """Bytes pulled to ``dst`` to reassemble a sequence from its expert outputs.

    ``output_locations`` maps each copy to the device holding its output, or to
    None when the copy was condensed and is rebuilt locally.
    """
    total = 0
    for copy in copies:
        if copy not in output_locations:
            raise KeyError(f"no output location for token copy {copy}")
        loc = output_locations[copy]
        if loc is not None and loc != dst:
            total += token_bytes
    return total


def traffic_table(copy_seq: np.ndarray, copy_loc: np.ndarray, num_seqs: int, num_devices: int,
                  token_bytes: int) -> np.ndarray:
    """f[i, j] for all sequences at once; ``copy_seq`` are sequence indices of located copies."""
    counts = np.zeros((num_seqs, num_devices), dtype=np.int64)
    np.add.at(counts, (copy_seq, copy_loc), 1)
    return (counts.sum(axis=1, keepdims=True) - counts) * token_bytes


def candidate_set(f_row: Sequence[float], q: int) -> List[int]:
    """The ``q`` devices with least traffic, ordered by (traffic, device id)."""
    if q < 1:
        raise ValueError("q must be >= 1")
    order = sorted(range(len(f_row)), key=lambda j: (f_row[j], j))
    return order[:q]


def cost_growth(length: int, load: DeviceLoad, d: int, P: float) -> float:
    """Extra attention time on ``load``'s device if a sequence of ``length`` joins it."""
    after = attention_time(load.B + 1, max(load.L, length), d, P)
    return after - attention_time(load.B, load.L, d, P)


def _pick(options, s, f, objective):
    sign = 1.0 if objective == "min" else -1.0
    return min(options, key=lambda j: (sign * s[j], f[j], j))


def plan_from_traffic(seq_ids: Sequence[int], lengths: Sequence[int], f: np.ndarray, q: int,
                      capacity: int, d: int, P: float, objective: str = "min",
                      ) -> Tuple[Dict[int, int], Dict[int, List[int]], List[DeviceLoad]]:
    """Greedy placement over precomputed traffic ``f[i, j]`` (row i <-> seq_ids[i])."""
    if objective not in ("min", "max"):
        raise ValueError("objective must be 'min' or 'max'")
    num_devices = f.shape[1]
    loads = [DeviceLoad(j) for j in range(num_devices)]
    order = sorted(range(len(seq_ids)), key=lambda i: (-lengths[i], seq_ids[i]))
    assignment: Dict[int, int] = {}
    candidates: Dict[int, List[int]] = {}
    for i in order:
        sid, length = seq_ids[i], lengths[i]
        row = f[i].tolist()
        H = candidate_set(row, q)
        candidates[sid] = H
        feasible = [j for j in range(num_devices) if loads[j].resident_tokens + length <= capacity]
        if not feasible:
            over = {j: loads[j].resident_tokens for j in range(num_devices)}
            raise MigrationError(
                f"sequence {sid} (length {length}) fits no device: capacity {capacity}, "
                f"resident tokens {over}")
        s = {j: cost_growth(length, loads[j], d, P) for j in feasible}
        in_h = [j for j in H if j in s]
        j_star = _pick(in_h or feasible, s, row, objective)
        assignment[sid] = j_star
        loads[j_star].add(length)
    return assignment, candidates, loads


def plan_migration(batch: BatchState, output_locations: Mapping[Copy, Optional[int]], q: int,
                   cluster: ClusterConfig, model: ModelConfig, objective: str = "min",
                   capacity: Optional[int] = None) -> MigrationPlan:
    """Assign every sequence of ``batch`` a device for the combine phase."""
    G = cluster.num_devices
    token_bytes = model.token_bytes
    if capacity is None:
        capacity = cluster.effective_capacity(batch.num_tokens)
    seq_index = {s.seq_id: i for i, s in enumerate(batch.sequences)}
    copy_seq, copy_loc = [], []
    for t in batch.tokens:
        for e, _ in t.gates:
            if (t.token_id, e) not in output_locations:
                raise KeyError(f"no output location for token copy {(t.token_id, e)}")
            loc = output_locations[(t.token_id, e)]
            if loc is None:
                continue
            copy_seq.append(seq_index[t.seq_id])
            copy_loc.append(loc)
    copy_seq_a = np.asarray(copy_seq, dtype=np.int64)
    copy_loc_a = np.asarray(copy_loc, dtype=np.int64)
    f = traffic_table(copy_seq_a, copy_loc_a, len(batch.sequences), G, token_bytes)
    seq_ids = [s.seq_id for s in batch.sequences]
    lengths = [s.length for s in batch.sequences]
    assignment, candidates, loads = plan_from_traffic(
        seq_ids, lengths, f, q, capacity, model.d_model, cluster.compute_speed, objective)
    dest = np.array([assignment[sid] for sid in seq_ids], dtype=np.int64)
    combine = traffic_matrix(G)
    np.add.at(combine, (copy_loc_a, dest[copy_seq_a]), token_bytes)
    chosen_f = {sid: int(f[i, assignment[sid]]) for i, sid in enumerate(seq_ids)}
    return MigrationPlan(assignment=assignment, combine_traffic=combine, chosen_f=chosen_f,
                         candidates=candidates, loads=loads)
