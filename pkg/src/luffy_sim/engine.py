"""Per-iteration simulation of expert-parallel MoE training under several strategies."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from .condense import (CondensationMap, HistoryStore, adaptive_threshold, apply_condensation,
                       condense_group, fast_measure, update_history)
from .config import BatchState, LossModel, SimConfig, parse_threshold_mode
from .cost import (ContentionModel, Dispatch, all_to_all_time, attention_time, expert_time,
                   expert_transfer_bytes, off_diagonal_bytes, traffic_matrix)
from .migration import MigrationError, plan_from_traffic, traffic_table
from .report import BlockReport, ComparisonSummary, IterationReport, summarize
from .workload import embedding_matrix, evolve_block, gen_batch, regate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Strategy:
    name: str
    condense: bool = False
    migrate: bool = False
    transfer: Optional[str] = None  # None, "ext" or "hyt"


STRATEGIES: Dict[str, Strategy] = {
    "vanilla": Strategy("vanilla"),
    "ext": Strategy("ext", transfer="ext"),
    "hyt": Strategy("hyt", transfer="hyt"),
    "luffy": Strategy("luffy", condense=True, migrate=True),
    "luffy-migrate": Strategy("luffy-migrate", migrate=True),
    "luffy-condense": Strategy("luffy-condense", condense=True),
}


def get_strategy(name: str | Strategy) -> Strategy:
    if isinstance(name, Strategy):
        return name
    try:
        return STRATEGIES[name]
    except KeyError:
        raise ValueError(f"unknown strategy {name!r}; choose from {', '.join(STRATEGIES)}") from None


# ---------------------------------------------------------------------------
# controller tables
# ---------------------------------------------------------------------------


@dataclass
class LocationTables:
    token_to_sequence: Dict[int, int] = field(default_factory=dict)
    # (token, expert) -> device holding the expert output; None when condensed
    token_to_device: Dict[Tuple[int, int], Optional[int]] = field(default_factory=dict)
    sequence_to_device: Dict[int, int] = field(default_factory=dict)

    @classmethod
    def from_batch(cls, batch: BatchState) -> "LocationTables":
        return cls(token_to_sequence={t.token_id: t.seq_id for t in batch.tokens},
                   sequence_to_device={s.seq_id: s.home_device for s in batch.sequences})

    def record_outputs(self, dispatch: Dispatch) -> None:
        self.token_to_device = {
            (t, e): (d if k else None) for t, e, d, k in
            zip(dispatch.token.tolist(), dispatch.expert.tolist(), dispatch.dst.tolist(),
                dispatch.kept.tolist())}

    def problems(self) -> List[str]:
        out = []
        for token, seq in self.token_to_sequence.items():
            if seq not in self.sequence_to_device:
                out.append(f"token {token} belongs to unplaced sequence {seq}")
        for (token, _), _dev in self.token_to_device.items():
            if token not in self.token_to_sequence:
                out.append(f"output for unknown token {token}")
        return out


# ---------------------------------------------------------------------------
# expert-moving baselines
# ---------------------------------------------------------------------------


def source_counts(dispatch: Dispatch, num_devices: int, num_experts: int) -> np.ndarray:
    """[device, expert] gate copies originating on each device."""
    counts = np.zeros((num_devices, num_experts), dtype=np.int64)
    np.add.at(counts, (dispatch.src, dispatch.expert), 1)
    return counts


def strategy_ext(counts: np.ndarray, placement: Mapping[int, int], token_bytes: int,
                 expert_bytes: int) -> Set[Tuple[int, int]]:
    """Copy expert ``e`` to device ``g`` whenever shipping g's tokens would cost more."""
    out = set()
    G, E = counts.shape
    for g in range(G):
        for e in range(E):
            if placement[e] != g and counts[g, e] * token_bytes > expert_bytes:
                out.add((g, e))
    return out


def strategy_hyt(counts: np.ndarray, placement: Mapping[int, int], token_bytes: int,
                 expert_bytes: int, top_m: int) -> Set[Tuple[int, int]]:
    """Replicate only the ``top_m`` experts with most remote inbound copies."""
    G, E = counts.shape
    inbound = [sum(int(counts[g, e]) for g in range(G) if placement[e] != g) for e in range(E)]
    popular = sorted(range(E), key=lambda e: (-inbound[e], e))[:top_m]
    return {(g, e) for e in popular for g in range(G)
            if placement[e] != g and counts[g, e] * token_bytes > expert_bytes}


# ---------------------------------------------------------------------------
# one iteration
# ---------------------------------------------------------------------------


def iteration_threshold(batch: BatchState, threshold_mode: str) -> float:
    fixed = parse_threshold_mode(threshold_mode)
    if fixed is not None:
        return fixed
    return adaptive_threshold(batch.loss_initial, batch.loss_prev)


def _attention_ms(seq_dev: np.ndarray, lengths: np.ndarray, num_devices: int, d: int,
                  P: float) -> float:
    worst = 0.0
    for j in range(num_devices):
        here = lengths[seq_dev == j]
        if here.size:
            worst = max(worst, attention_time(int(here.size), int(here.max()), d, P))
    return worst


def _expert_ms(load: np.ndarray, cfg: SimConfig, contention: ContentionModel) -> float:
    worst = 0.0
    for g in range(load.shape[0]):
        tokens = int(load[g].sum())
        if tokens:
            active = int((load[g] > 0).sum())
            worst = max(worst, expert_time(tokens, cfg.model, cfg.cluster.compute_speed, active,
                                           contention))
    return worst


def _build_dispatch(batch: BatchState, seq_pos: Mapping[int, int], seq_dev: np.ndarray,
                    placement: Mapping[int, int]) -> Dispatch:
    token, seq, expert, weight = [], [], [], []
    for t in batch.tokens:
        for e, w in t.gates:
            token.append(t.token_id)
            seq.append(seq_pos[t.seq_id])
            expert.append(e)
            weight.append(w)
    seq_a = np.asarray(seq, dtype=np.int64)
    expert_a = np.asarray(expert, dtype=np.int64)
    place = np.array([placement[e] for e in range(max(placement) + 1)], dtype=np.int64)
    n = seq_a.size
    return Dispatch(token=np.asarray(token, dtype=np.int64), seq=seq_a, expert=expert_a,
                    weight=np.asarray(weight), src=seq_dev[seq_a], dst=place[expert_a],
                    kept=np.ones(n, dtype=bool), rep=np.arange(n))


def _condense(batch: BatchState, dispatch: Dispatch, history: HistoryStore, h: float,
              cfg: SimConfig, block: int) -> Tuple[Dispatch, int]:
    emb = embedding_matrix(batch)
    row_of = batch.token_index()
    rows = np.array([row_of[t] for t in dispatch.token.tolist()], dtype=np.int64)
    maps: Dict[Tuple[int, int], CondensationMap] = {}
    graphs = []
    evals = 0
    keys = dispatch.src * (int(dispatch.expert.max()) + 1) + dispatch.expert
    for key in np.unique(keys).tolist():
        members = np.flatnonzero(keys == key)
        group = (int(dispatch.src[members[0]]), int(dispatch.expert[members[0]]))
        graph = fast_measure(dispatch.token[members], emb[rows[members]], history, cfg.S1, cfg.S2,
                             block=block, key=group)
        evals += graph.cosine_evals
        maps[group] = condense_group(graph, h)
        graphs.append(graph)
    # single-writer merge once every group is finalized
    update_history(graphs, history, block)
    return apply_condensation(dispatch, maps), evals


def simulate_iteration(batch: BatchState, strategy: str | Strategy, cfg: SimConfig,
                       iteration: int = 0, seed: Optional[int] = None) -> IterationReport:
    """Simulate every block of one training iteration and return its cost breakdown."""
    strat = get_strategy(strategy)
    model, cluster = cfg.model, cfg.cluster
    G, E = cluster.num_devices, model.experts_per_layer
    P, d = cluster.compute_speed, model.d_model
    tb, eb = model.token_bytes, expert_transfer_bytes(model)
    placement = cluster.placement(E)
    contention = ContentionModel(cfg.alpha)
    seed = cfg.workload.seed if seed is None else seed
    capacity = cluster.effective_capacity(batch.num_tokens)
    h = iteration_threshold(batch, cfg.threshold_mode)
    history = HistoryStore(cfg.history_max_age)

    seq_ids = [s.seq_id for s in batch.sequences]
    seq_pos = {sid: i for i, sid in enumerate(seq_ids)}
    lengths = np.array([s.length for s in batch.sequences], dtype=np.int64)
    tables = LocationTables.from_batch(batch)
    seq_dev = np.array([tables.sequence_to_device[s] for s in seq_ids], dtype=np.int64)

    report = IterationReport(iteration=iteration, strategy=strat.name, seed=seed, threshold=h)
    state = batch
    for b in range(model.num_blocks):
        if b > 0:
            state = regate(state, b, cfg.workload.regate_prob, model.top_k, seed)
        rep = BlockReport(block=b)
        rep.attention_ms = _attention_ms(seq_dev, lengths, G, d, P) * model.train_multiplier

        dispatch = _build_dispatch(state, seq_pos, seq_dev, placement)
        rep.total_copies = dispatch.num_copies
        transfers = traffic_matrix(G)
        if strat.transfer is not None:
            counts = source_counts(dispatch, G, E)
            if strat.transfer == "ext":
                moves = strategy_ext(counts, placement, tb, eb)
            else:
                moves = strategy_hyt(counts, placement, tb, eb, cfg.hyt_top_m)
            if moves:
                local = np.array([(int(s), int(e)) in moves for s, e in
                                  zip(dispatch.src.tolist(), dispatch.expert.tolist())])
                dispatch.dst = np.where(local, dispatch.src, dispatch.dst)
                for g, e in moves:
                    transfers[placement[e], g] += eb
        if strat.condense:
            dispatch, rep.cosine_evals = _condense(state, dispatch, history, h, cfg, b)

        dispatch_m = dispatch.traffic(G, tb)
        rep.dispatch_bytes = off_diagonal_bytes(dispatch_m)
        rep.expert_transfer_bytes = off_diagonal_bytes(transfers)
        rep.condensed_copies = dispatch.condensed
        rep.dispatched_copies = dispatch.dispatched
        rep.expert_ms = _expert_ms(dispatch.device_load(G, E), cfg, contention) * \
            model.train_multiplier
        tables.record_outputs(dispatch)

        kept = dispatch.kept
        if strat.migrate:
            f = traffic_table(dispatch.seq[kept], dispatch.dst[kept], len(seq_ids), G, tb)
            assignment, _, _ = plan_from_traffic(seq_ids, lengths.tolist(), f, cfg.q, capacity, d,
                                                 P, cfg.migration_objective)
            new_dev = np.array([assignment[s] for s in seq_ids], dtype=np.int64)
        else:
            new_dev = seq_dev
        combine_m = traffic_matrix(G)
        np.add.at(combine_m, (dispatch.dst[kept], new_dev[dispatch.seq[kept]]), tb)
        rep.combined_copies = int(kept.sum())
        rep.combine_bytes = off_diagonal_bytes(combine_m)
        rep.migrated_sequences = int((new_dev != seq_dev).sum())
        seq_dev = new_dev
        tables.sequence_to_device = {s: int(seq_dev[i]) for i, s in enumerate(seq_ids)}

        bw, lat = cluster.link_bandwidth, cfg.latency_ms
        # expert copies travel in the dispatch window, sharing its links with the tokens
        rep.comm_ms = (all_to_all_time(dispatch_m + transfers, bw, lat)
                       + all_to_all_time(combine_m, bw, lat))
        report.blocks.append(rep)
        if b + 1 < model.num_blocks:
            state = evolve_block(state, b + 1, cfg.workload.drift, seed)
    return report


# ---------------------------------------------------------------------------
# multi-iteration runs
# ---------------------------------------------------------------------------

_MASK64 = 0xFFFFFFFFFFFFFFFF


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def iteration_seed(seed: int, t: int) -> int:
    """Seed of iteration ``t``: ``seed XOR splitmix64(t)``."""
    return (seed & _MASK64) ^ splitmix64(t)


def iteration_batch(cfg: SimConfig, t: int, seed: int, loss: LossModel,
                    trace: Optional[BatchState] = None) -> Tuple[BatchState, int]:
    s = iteration_seed(seed, t)
    # l_t is the loss reached entering iteration t; l_0 is the initial loss
    prev = loss.loss(t)
    if trace is not None:
        return replace(trace, loss_initial=loss.l_ini, loss_prev=prev, block_index=0), s
    spec = replace(cfg.workload, seed=s)
    return gen_batch(cfg.model, cfg.cluster, spec, loss_initial=loss.l_ini, loss_prev=prev), s


@dataclass
class RunResult:
    reports: List[IterationReport]
    summary: ComparisonSummary
    baseline: List[IterationReport] = field(default_factory=list)


def run_many(cfg: SimConfig, strategies: Sequence[str], num_iterations: int,
             seed: Optional[int] = None, trace: Optional[BatchState] = None,
             ) -> Dict[str, List[IterationReport]]:
    """Run several strategies on identical per-iteration batches."""
    if num_iterations < 1:
        raise ValueError("num_iterations must be >= 1")
    seed = cfg.workload.seed if seed is None else seed
    out: Dict[str, List[IterationReport]] = {get_strategy(s).name: [] for s in strategies}
    for t in range(num_iterations):
        batch, s = iteration_batch(cfg, t, seed, cfg.loss, trace)
        for name in out:
            rep = simulate_iteration(batch, name, cfg, iteration=t, seed=s)
            log.info("iter %d %s: comp %.2f ms comm %.2f ms", t, name, rep.computation_ms,
                     rep.communication_ms)
            out[name].append(rep)
    return out


def run(num_iterations: int, loss_model: LossModel, strategy: str, cfg: SimConfig,
        seed: Optional[int] = None, trace: Optional[BatchState] = None) -> RunResult:
    """Run ``strategy`` for several iterations; Vanilla runs alongside for speedups."""
    cfg = replace(cfg, loss=loss_model)
    name = get_strategy(strategy).name
    names = ["vanilla"] if name == "vanilla" else ["vanilla", name]
    runs = run_many(cfg, names, num_iterations, seed, trace)
    return RunResult(reports=runs[name], summary=summarize(runs), baseline=runs["vanilla"])


__all__ = ["Strategy", "STRATEGIES", "LocationTables", "MigrationError", "simulate_iteration",
           "strategy_ext", "strategy_hyt", "run", "run_many", "iteration_seed", "splitmix64"]
