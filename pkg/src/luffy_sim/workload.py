"""Synthetic MoE batches: biased expert activation, clustered embeddings, trace files."""
from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import (BatchState, ClusterConfig, ModelConfig, SequenceRecord, TokenRecord,
                     WorkloadSpec)

TRACE_FORMAT = "luffy-trace/1"
_MIN_AFFINITY = 1e-30


class CapacityError(RuntimeError):
    pass


class TraceError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys])


def _lengths(rng: np.random.Generator, spec: WorkloadSpec) -> np.ndarray:
    lo, hi = spec.length_min, spec.length_max
    if spec.length_shape == "uniform":
        return rng.integers(lo, hi + 1, size=spec.batch_size)
    # bimodal: short and long modes, each spanning a quarter of the range
    span = max((hi - lo) // 4, 0)
    long_mode = rng.random(spec.batch_size) < 0.5
    offset = rng.integers(0, span + 1, size=spec.batch_size)
    return np.where(long_mode, hi - offset, lo + offset)


def _draw_gates(rng: np.random.Generator, affinity: np.ndarray, n: int, k: int):
    """Gumbel-top-k over log-affinity: top-1 ~ Categorical(affinity).

    Returns (experts[n, k], weights[n, k]) with weights a softmax over the
    selected perturbed scores.
    """
    log_p = np.log(np.maximum(affinity, _MIN_AFFINITY))
    scores = log_p[None, :] + rng.gumbel(size=(n, affinity.size))
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    picked = np.take_along_axis(scores, order, axis=1)
    w = np.exp(picked - picked[:, :1])
    w /= w.sum(axis=1, keepdims=True)
    return order, w


def _gates_tuple(experts_row, weights_row):
    return tuple((int(e), float(w)) for e, w in zip(experts_row, weights_row))


def gen_batch(model: ModelConfig, cluster: ClusterConfig, spec: WorkloadSpec,
              loss_initial: float = 1.0, loss_prev: Optional[float] = None) -> BatchState:
    """Generate a deterministic synthetic batch for ``spec.seed``."""
    problems = spec.problems()
    if problems:
        raise ValueError("; ".join(problems))
    rng = _rng(spec.seed)
    E, k, d = model.experts_per_layer, model.top_k, model.d_model
    centers = rng.standard_normal((E, spec.cluster_count, d))
    centers /= np.linalg.norm(centers, axis=2, keepdims=True)
    lengths = _lengths(rng, spec)

    total = int(lengths.sum())
    if cluster.device_capacity is not None and total > cluster.num_devices * cluster.device_capacity:
        raise CapacityError(
            f"batch has {total} tokens but cluster holds {cluster.num_devices * cluster.device_capacity}")

    tau = spec.cluster_tightness
    sequences: List[SequenceRecord] = []
    tokens: List[TokenRecord] = []
    next_id = 0
    for seq_id, length in enumerate(lengths.tolist()):
        affinity = rng.dirichlet(np.full(E, spec.bias_concentration))
        experts, weights = _draw_gates(rng, affinity, length, k)
        cluster_pick = rng.integers(0, spec.cluster_count, size=length)
        noise = rng.standard_normal((length, d)) / np.sqrt(d)
        emb = np.sqrt(tau) * centers[experts[:, 0], cluster_pick] + np.sqrt(1 - tau) * noise
        ids = tuple(range(next_id, next_id + length))
        next_id += length
        sequences.append(SequenceRecord(seq_id=seq_id, home_device=seq_id % cluster.num_devices,
                                        token_ids=ids,
                                        affinity=tuple(float(x) for x in affinity)))
        for pos, tid in enumerate(ids):
            tokens.append(TokenRecord(token_id=tid, seq_id=seq_id, position=pos,
                                      embedding=tuple(emb[pos].tolist()),
                                      gates=_gates_tuple(experts[pos], weights[pos])))
    return BatchState(sequences=tuple(sequences), tokens=tuple(tokens), block_index=0,
                      loss_initial=loss_initial,
                      loss_prev=loss_initial if loss_prev is None else loss_prev)


def embedding_matrix(batch: BatchState) -> np.ndarray:
    return np.array([t.embedding for t in batch.tokens], dtype=np.float64)


def _with_embeddings(batch: BatchState, emb: np.ndarray, block: int) -> BatchState:
    tokens = tuple(replace(t, embedding=tuple(row)) for t, row in zip(batch.tokens, emb.tolist()))
    return replace(batch, tokens=tokens, block_index=block)


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def evolve_block(batch: BatchState, block: int, drift: float, seed: int = 0,
                 rotate: Optional[bool] = None) -> BatchState:
    """Carry embeddings into ``block``: a shared rotation plus noise of scale ``drift``.

    With ``drift == 0`` and no explicit ``rotate`` the embeddings are returned
    unchanged. The rotation alone preserves every pairwise cosine.
    """
    if drift < 0:
        raise ValueError("drift must be >= 0")
    if rotate is None:
        rotate = drift > 0
    if not rotate and drift == 0:
        return replace(batch, block_index=block)
    emb = embedding_matrix(batch)
    rng = _rng(seed, 0xB10C, block)
    d = emb.shape[1]
    if rotate:
        emb = emb @ random_orthogonal(d, rng)
    if drift > 0:
        scale = drift * np.linalg.norm(emb, axis=1, keepdims=True) / np.sqrt(d)
        emb = emb + scale * rng.standard_normal(emb.shape)
    return _with_embeddings(batch, emb, block)


def regate(batch: BatchState, block: int, prob: float, top_k: int, seed: int = 0) -> BatchState:
    """Re-draw a ``prob`` fraction of gates from each sequence's affinity.

    Sequences without a recorded affinity keep their gates.
    """
    if prob == 0:
        return batch
    rng = _rng(seed, 0x6A7E, block)
    by_seq = {s.seq_id: s for s in batch.sequences}
    flip = rng.random(len(batch.tokens)) < prob
    tokens = list(batch.tokens)
    for i in np.flatnonzero(flip).tolist():
        tok = tokens[i]
        affinity = by_seq[tok.seq_id].affinity
        if affinity is None:
            continue
        experts, weights = _draw_gates(rng, np.asarray(affinity), 1, top_k)
        tokens[i] = replace(tok, gates=_gates_tuple(experts[0], weights[0]))
    return replace(batch, tokens=tuple(tokens))


# ---------------------------------------------------------------------------
# trace files: a header line followed by one JSON record per sequence
# ---------------------------------------------------------------------------


def save_trace(batch: BatchState, path: str | Path) -> None:
    by_id = batch.token_index()
    lines = [json.dumps({"format": TRACE_FORMAT, "block_index": batch.block_index,
                         "loss_initial": batch.loss_initial, "loss_prev": batch.loss_prev})]
    for s in batch.sequences:
        rec = {"seq_id": s.seq_id, "home_device": s.home_device, "tokens": []}
        if s.affinity is not None:
            rec["affinity"] = list(s.affinity)
        for tid in s.token_ids:
            t = batch.tokens[by_id[tid]]
            rec["tokens"].append({"token_id": t.token_id, "position": t.position,
                                  "gates": [[e, w] for e, w in t.gates],
                                  "embedding": list(t.embedding)})
        lines.append(json.dumps(rec))
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_sequence(rec, lineno: int):
    try:
        seq_id = int(rec["seq_id"])
        home = int(rec["home_device"])
        toks = []
        for t in rec["tokens"]:
            toks.append(TokenRecord(
                token_id=int(t["token_id"]), seq_id=seq_id, position=int(t["position"]),
                embedding=tuple(float(x) for x in t["embedding"]),
                gates=tuple((int(e), float(w)) for e, w in t["gates"])))
        affinity = rec.get("affinity")
        if affinity is not None:
            affinity = tuple(float(x) for x in affinity)
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceError(f"malformed sequence record ({exc!r})", lineno) from None
    if not toks:
        raise TraceError(f"sequence {seq_id} has no tokens", lineno)
    for t in toks:
        experts = [e for e, _ in t.gates]
        weights = [w for _, w in t.gates]
        if not experts or len(set(experts)) != len(experts) or min(experts) < 0:
            raise TraceError(f"token {t.token_id} has invalid gate experts {experts}", lineno)
        if min(weights) < 0 or abs(sum(weights) - 1.0) > 1e-6:
            raise TraceError(f"token {t.token_id} gate weights do not sum to 1", lineno)
    seq = SequenceRecord(seq_id=seq_id, home_device=home,
                         token_ids=tuple(t.token_id for t in toks), affinity=affinity)
    return seq, toks


def load_trace(path: str | Path) -> BatchState:
    """Parse a trace file; errors name the first offending line (1-based)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise TraceError(f"cannot read trace {path}: {exc.strerror}") from None
    header = {"block_index": 0, "loss_initial": 1.0, "loss_prev": 1.0}
    sequences: List[SequenceRecord] = []
    tokens: List[TokenRecord] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(rec, dict):
            raise TraceError("record is not an object", lineno)
        if "format" in rec:
            if rec["format"] != TRACE_FORMAT:
                raise TraceError(f"unsupported format {rec['format']!r}", lineno)
            try:
                header = {"block_index": int(rec["block_index"]),
                          "loss_initial": float(rec["loss_initial"]),
                          "loss_prev": float(rec["loss_prev"])}
            except (KeyError, TypeError, ValueError) as exc:
                raise TraceError(f"malformed header ({exc!r})", lineno) from None
            continue
        seq, toks = _parse_sequence(rec, lineno)
        if tokens and len(toks[0].gates) != len(tokens[0].gates):
            raise TraceError("gate count differs from earlier records", lineno)
        sequences.append(seq)
        tokens.extend(toks)
    if not sequences:
        raise TraceError(f"trace {path} holds an empty batch")
    return BatchState(sequences=tuple(sequences), tokens=tuple(tokens), **header)


def sequence_expert_counts(batch: BatchState, experts_per_layer: int) -> np.ndarray:
    """[num_sequences, experts] count of gate copies per expert."""
    index = {s.seq_id: i for i, s in enumerate(batch.sequences)}
    out = np.zeros((len(batch.sequences), experts_per_layer), dtype=np.int64)
    for t in batch.tokens:
        for e, _ in t.gates:
            out[index[t.seq_id], e] += 1
    return out


def pairwise_normalized_cosine(emb: np.ndarray) -> np.ndarray:
    unit = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    return (1.0 + np.clip(unit @ unit.T, -1.0, 1.0)) / 2.0
