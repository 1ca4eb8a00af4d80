"""Token condensation: similarity graphs per (source device, expert) group.

Pairs of tokens routed to different experts are never materialized; within a
group, prior-block similarity short-circuits obviously similar or dissimilar
pairs and only the uncertain remainder gets a real cosine evaluation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Mapping, Sequence, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .cost import Dispatch

COMPUTED, HISTORY_ONE, HISTORY_ZERO = 0, 1, 2
PROVENANCE = {COMPUTED: "computed", HISTORY_ONE: "history_one", HISTORY_ZERO: "history_zero"}

GroupKey = Tuple[int, int]  # (source_device, expert_id)


def normalized_cosine(u, v) -> float:
    """Cosine similarity rescaled to [0, 1]: (1 + cos) / 2."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"embedding shapes differ: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("normalized_cosine of a zero-norm vector")
    cos = min(1.0, max(-1.0, float(u @ v) / (nu * nv)))
    return (1.0 + cos) / 2.0


def pair_keys(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    return (lo << 32) | hi


class HistoryStore:
    """Similarity of token pairs from earlier blocks, keyed by unordered token-id pair.

    Entries carry the block of their last real measurement; lookups at block
    ``b`` ignore entries measured before ``b - max_age``.
    """

    def __init__(self, max_age: int = 2):
        if max_age < 0:
            raise ValueError("max_age must be >= 0")
        self.max_age = max_age
        self._keys = np.empty(0, dtype=np.int64)
        self._values = np.empty(0, dtype=np.float64)
        self._stamps = np.empty(0, dtype=np.int64)

    def __len__(self) -> int:
        return int(self._keys.size)

    def _find(self, keys: np.ndarray):
        pos = np.searchsorted(self._keys, keys)
        pos_c = np.minimum(pos, max(self._keys.size - 1, 0))
        hit = (pos < self._keys.size) & (self._keys[pos_c] == keys) if self._keys.size else \
            np.zeros(keys.shape, dtype=bool)
        return pos_c, hit

    def lookup(self, keys: np.ndarray, block: int) -> Tuple[np.ndarray, np.ndarray]:
        """Return (values, origin stamps); NaN / -1 where absent or expired."""
        keys = np.asarray(keys, dtype=np.int64)
        values = np.full(keys.shape, np.nan)
        stamps = np.full(keys.shape, -1, dtype=np.int64)
        if not self._keys.size:
            return values, stamps
        pos, hit = self._find(keys)
        fresh = hit & (self._stamps[pos] >= block - self.max_age)
        values[fresh] = self._values[pos[fresh]]
        stamps[fresh] = self._stamps[pos[fresh]]
        return values, stamps

    def get(self, a: int, b: int, block: int) -> float | None:
        v, _ = self.lookup(pair_keys(np.array([a]), np.array([b])), block)
        return None if np.isnan(v[0]) else float(v[0])

    def put(self, a: int, b: int, value: float, block: int) -> None:
        self.write(pair_keys(np.array([a]), np.array([b])), np.array([value]), np.array([block]))

    def write(self, keys: np.ndarray, values: np.ndarray, stamps: np.ndarray) -> None:
        keys = np.asarray(keys, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        stamps = np.asarray(stamps, dtype=np.int64)
        if np.any((values < 0) | (values > 1)):
            raise ValueError("history values must lie in [0, 1]")
        # later writes win: concatenate new after old, keep last occurrence of each key
        all_keys = np.concatenate([self._keys, keys])
        all_vals = np.concatenate([self._values, values])
        all_stamps = np.concatenate([self._stamps, stamps])
        rev = all_keys[::-1]
        uniq, first_rev = np.unique(rev, return_index=True)
        idx = all_keys.size - 1 - first_rev
        self._keys, self._values, self._stamps = uniq, all_vals[idx], all_stamps[idx]

    def evict(self, block: int) -> None:
        keep = self._stamps >= block - self.max_age
        self._keys, self._values, self._stamps = self._keys[keep], self._values[keep], self._stamps[keep]

    def clear(self) -> None:
        self.__init__(self.max_age)


@dataclass
class SimilarityGraph:
    """Complete graph over one group's tokens; edge ``k`` joins rows[k] < cols[k]."""

    key: GroupKey
    nodes: np.ndarray  # token ids, ascending
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    provenance: np.ndarray
    stamps: np.ndarray  # block of the measurement behind each weight
    cosine_evals: int = 0

    @property
    def num_nodes(self) -> int:
        return int(self.nodes.size)

    def edges(self) -> Iterator[Tuple[int, int, float, str]]:
        for r, c, w, p in zip(self.rows.tolist(), self.cols.tolist(), self.weights.tolist(),
                              self.provenance.tolist()):
            yield int(self.nodes[r]), int(self.nodes[c]), w, PROVENANCE[p]

    def weight_matrix(self) -> np.ndarray:
        n = self.num_nodes
        w = np.zeros((n, n))
        w[self.rows, self.cols] = self.weights
        w[self.cols, self.rows] = self.weights
        return w

    def weight(self, a: int, b: int) -> float:
        i, j = np.searchsorted(self.nodes, [a, b])
        return float(self.weight_matrix()[i, j])


def fast_measure(token_ids, embeddings, history: HistoryStore | None, S1: float, S2: float,
                 block: int = 0, key: GroupKey = (0, 0)) -> SimilarityGraph:
    """Build the similarity graph of one group, skipping pairs history already decides.

    A pair whose earlier similarity exceeds ``S1`` gets weight 1, one below
    ``S2`` gets weight 0, everything else is measured with normalized cosine.
    """
    if not 0 <= S2 < S1 <= 1:
        raise ValueError(f"need 0 <= S2 < S1 <= 1, got S1={S1}, S2={S2}")
    token_ids = np.asarray(token_ids, dtype=np.int64)
    emb = np.asarray(embeddings, dtype=np.float64)
    order = np.argsort(token_ids, kind="stable")
    token_ids, emb = token_ids[order], emb[order]
    n = token_ids.size
    rows, cols = np.triu_indices(n, k=1)
    weights = np.empty(rows.size)
    provenance = np.full(rows.size, COMPUTED, dtype=np.int8)
    stamps = np.full(rows.size, block, dtype=np.int64)

    if history is not None and len(history) and rows.size:
        prior, prior_stamp = history.lookup(pair_keys(token_ids[rows], token_ids[cols]), block)
        one = prior > S1
        zero = prior < S2
        provenance[one] = HISTORY_ONE
        provenance[zero] = HISTORY_ZERO
        weights[one] = 1.0
        weights[zero] = 0.0
        shortcut = one | zero
        stamps[shortcut] = prior_stamp[shortcut]
    todo = np.flatnonzero(provenance == COMPUTED)
    if todo.size:
        norms = np.linalg.norm(emb, axis=1)
        if np.any(norms == 0):
            raise ValueError("zero-norm embedding in group")
        unit = emb / norms[:, None]
        r, c = rows[todo], cols[todo]
        if todo.size * 4 > rows.size:  # dense: one matrix product beats gathering row pairs
            cos = (unit @ unit.T)[r, c]
        else:
            cos = np.einsum("ij,ij->i", unit[r], unit[c])
        weights[todo] = (1.0 + np.clip(cos, -1.0, 1.0)) / 2.0
    return SimilarityGraph(key=key, nodes=token_ids, rows=rows, cols=cols, weights=weights,
                           provenance=provenance, stamps=stamps, cosine_evals=int(todo.size))


def adaptive_threshold(l_ini: float, l_prev: float) -> float:
    """Condensation threshold from the normalized loss decrease, in (0, 0.5]."""
    if not l_ini > 0:
        raise ValueError("initial loss must be > 0")
    l_norm = (l_ini - l_prev) / l_ini
    # a loss spike (l_prev > l_ini) is treated as no progress
    l_norm = min(max(l_norm, 0.0), 1.0)
    return 1.0 / (1.0 + math.exp(l_norm))


@dataclass
class CondensationMap:
    """token_to_token for one group: member token -> representative token."""

    key: GroupKey
    mapping: Dict[int, int] = field(default_factory=dict)

    @property
    def representatives(self) -> List[int]:
        return sorted({r for r in self.mapping.values()})

    @property
    def condensed(self) -> int:
        return len(self.mapping) - len(self.representatives)

    def __getitem__(self, token: int) -> int:
        return self.mapping[token]


def _adjacency(graph: SimilarityGraph, h: float) -> np.ndarray:
    n = graph.num_nodes
    adj = np.zeros((n, n), dtype=bool)
    keep = graph.weights >= h
    adj[graph.rows[keep], graph.cols[keep]] = True
    return adj | adj.T


def _greedy_reps(adj: np.ndarray) -> np.ndarray:
    n = adj.shape[0]
    alive = np.ones(n, dtype=bool)
    rep = np.arange(n)
    while alive.any():
        degree = np.where(alive, (adj & alive).sum(axis=1), -1)
        i = int(np.argmax(degree))
        if degree[i] == 0:
            break  # everything left is isolated and maps to itself
        members = adj[i] & alive
        rep[members] = i
        alive[members] = False
        alive[i] = False
    return rep


def _as_map(graph: SimilarityGraph, rep: np.ndarray) -> CondensationMap:
    nodes = graph.nodes.tolist()
    return CondensationMap(key=graph.key, mapping={nodes[j]: nodes[r] for j, r in enumerate(rep.tolist())})


def greedy_condense(graph: SimilarityGraph, h: float) -> CondensationMap:
    """Greedy representative selection on the graph thresholded at ``h``.

    Edges below ``h`` are dropped. The remaining node with the most remaining
    neighbours (lowest token id on ties) becomes a representative and absorbs
    those neighbours; repeat until every node is assigned.
    """
    return _as_map(graph, _greedy_reps(_adjacency(graph, h)))


def _dominating_pair(closed: np.ndarray, degree: np.ndarray):
    """Best pair (u, v) whose closed neighbourhoods cover the component, or None."""
    uncovered = (~closed).astype(np.float32)
    both = uncovered @ uncovered.T  # exact small integer counts
    us, vs = np.nonzero(np.triu(both == 0, k=1))
    if not us.size:
        return None
    score = degree[us] + degree[vs]
    # highest degree sum, then lowest ids
    k = np.lexsort((vs, us, -score))[0]
    return int(us[k]), int(vs[k])


def _level_map(adj: np.ndarray) -> tuple[np.ndarray, int]:
    """Representatives at one threshold level plus a lower bound on any sound map's count.

    Starts from the greedy; a component where the greedy spent three or more
    representatives but two nodes suffice is handed to that pair instead.
    """
    n = adj.shape[0]
    rep = _greedy_reps(adj)
    count, labels = connected_components(csr_matrix(adj), directed=False)
    degree = adj.sum(axis=1)
    size = np.bincount(labels, minlength=count)
    top = np.zeros(count, dtype=np.int64)
    np.maximum.at(top, labels, degree)
    used = np.bincount(labels[rep == np.arange(n)], minlength=count)
    need = np.where((size == 1) | (top == size - 1), 1, 2)
    # a component without a universal node needs two; only check further where the greedy used more
    for c in np.flatnonzero((need == 2) & (used > 2)).tolist():
        idx = np.flatnonzero(labels == c)
        closed = adj[np.ix_(idx, idx)] | np.eye(idx.size, dtype=bool)
        pair = _dominating_pair(closed, degree[idx])
        if pair is None:
            need[c] = max(3, -(-int(size[c]) // (int(top[c]) + 1)))
            continue
        u, v = sorted(pair, key=lambda j: (-degree[idx[j]], idx[j]))
        rep[idx] = np.where(closed[u], idx[u], idx[v])
        rep[idx[v]] = idx[v]
    return rep, int(need.sum())


THRESHOLD_STEP = 100  # thresholds snap up to multiples of 1/THRESHOLD_STEP


def snap_threshold(h: float) -> int:
    """Index k of the smallest ladder level k / THRESHOLD_STEP that is >= h."""
    k = max(math.ceil(h * THRESHOLD_STEP), 0)
    while k / THRESHOLD_STEP < h:
        k += 1
    while k > 0 and (k - 1) / THRESHOLD_STEP >= h:
        k -= 1
    return k


def condense_group(graph: SimilarityGraph, h: float) -> CondensationMap:
    """Condense one group at threshold ``h``, never fewer copies than at a stricter threshold.

    ``h`` snaps up to the ladder of multiples of 0.01. The plain greedy can
    condense fewer copies when the threshold drops (a new weak edge may
    crown a hub that strands nodes which previously paired up), so every
    ladder level from the snapped one up to 1 is a candidate, and the map
    condensing the most copies wins (the lowest level on ties). Each level's
    map is the greedy, repaired where a dominating pair beats it. Every map
    only uses edges of weight >= ``h``.

    Representatives form a dominating set, and dropping edges never shrinks
    the smallest one, so a lower bound on it at one level caps what every
    stricter level can reach; the scan stops once that cap is met.
    """
    n = graph.num_nodes
    best, best_rep = -1, np.arange(n)
    for k in range(snap_threshold(h), THRESHOLD_STEP + 1):
        rep, need = _level_map(_adjacency(graph, k / THRESHOLD_STEP))
        got = n - int((rep == np.arange(n)).sum())
        if got > best:
            best, best_rep = got, rep
        if n - need <= best:
            break
    return _as_map(graph, best_rep)


def update_history(graphs: SimilarityGraph | Sequence[SimilarityGraph], store: HistoryStore,
                   block: int) -> HistoryStore:
    """Record every finalized edge weight for use at the next block.

    Accepts one graph or all graphs of a block (merged in a single write).
    Shortcut weights are written too but keep the stamp of the measurement they
    came from, so a pair is re-measured once that measurement ages out.
    """
    if isinstance(graphs, SimilarityGraph):
        graphs = [graphs]
    graphs = [g for g in graphs if g.rows.size]
    if graphs:
        store.write(np.concatenate([pair_keys(g.nodes[g.rows], g.nodes[g.cols]) for g in graphs]),
                    np.concatenate([g.weights for g in graphs]),
                    np.concatenate([g.stamps for g in graphs]))
    store.evict(block + 1)
    return store


def apply_condensation(dispatch: Dispatch, maps: Mapping[GroupKey, CondensationMap]) -> Dispatch:
    """Drop condensed copies from ``dispatch``; each points at its representative copy."""
    kept = dispatch.kept.copy()
    rep = dispatch.rep.copy()
    index = {(int(s), int(e), int(t)): i for i, (s, e, t) in
             enumerate(zip(dispatch.src.tolist(), dispatch.expert.tolist(), dispatch.token.tolist()))}
    for (src, expert), cmap in maps.items():
        for member, head in cmap.mapping.items():
            if member == head:
                continue
            i = index[(src, expert, member)]
            kept[i] = False
            rep[i] = index[(src, expert, head)]
    return replace(dispatch, kept=kept, rep=rep)
