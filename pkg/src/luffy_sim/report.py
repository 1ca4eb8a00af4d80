"""Iteration reports, CSV/JSON serialization and strategy comparison tables."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

METRICS = ("attention_ms", "expert_ms", "dispatch_bytes", "combine_bytes",
           "expert_transfer_bytes", "comm_ms", "condensed_copies", "migrated_sequences",
           "cosine_evals")
CSV_HEADER = ("iteration", "block", "strategy") + METRICS
_INT_METRICS = {"dispatch_bytes", "combine_bytes", "expert_transfer_bytes", "condensed_copies",
                "migrated_sequences", "cosine_evals"}

STRATEGY_ORDER = ("vanilla", "ext", "hyt", "luffy", "luffy-migrate", "luffy-condense")


class ReportError(RuntimeError):
    pass


@dataclass
class BlockReport:
    block: int
    attention_ms: float = 0.0
    expert_ms: float = 0.0
    dispatch_bytes: int = 0
    combine_bytes: int = 0
    expert_transfer_bytes: int = 0
    comm_ms: float = 0.0
    condensed_copies: int = 0
    migrated_sequences: int = 0
    cosine_evals: int = 0
    # audit counters, not serialized
    total_copies: int = 0
    dispatched_copies: int = 0
    combined_copies: int = 0

    def metrics(self) -> Dict[str, Any]:
        return {m: getattr(self, m) for m in METRICS}


@dataclass
class IterationReport:
    iteration: int
    strategy: str
    seed: int
    threshold: float
    blocks: List[BlockReport] = field(default_factory=list)

    def total(self, metric: str):
        return sum(getattr(b, metric) for b in self.blocks)

    def totals(self) -> Dict[str, Any]:
        return {m: self.total(m) for m in METRICS}

    @property
    def computation_ms(self) -> float:
        return self.total("attention_ms") + self.total("expert_ms")

    @property
    def communication_ms(self) -> float:
        return self.total("comm_ms")

    @property
    def total_bytes(self) -> int:
        return self.total("dispatch_bytes") + self.total("combine_bytes") + \
            self.total("expert_transfer_bytes")


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, float) else str(int(value))


def csv_text(reports: Sequence[IterationReport]) -> str:
    if not reports:
        raise ReportError("no reports to write")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for rep in reports:
        for b in rep.blocks:
            w.writerow([rep.iteration, b.block, rep.strategy] + [_fmt(getattr(b, m)) for m in METRICS])
        totals = rep.totals()
        w.writerow([rep.iteration, "total", rep.strategy] + [_fmt(totals[m]) for m in METRICS])
    return buf.getvalue()


def to_csv(reports: Sequence[IterationReport], path: str | Path) -> None:
    text = csv_text(reports)
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc}") from exc


def read_csv(path: str | Path) -> List[Dict[str, Any]]:
    """Parse a report CSV back into typed rows (``block`` is an int or ``"total"``)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ReportError(f"cannot read {path}: {exc}") from exc
    rows = []
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise ReportError(f"{path}: unexpected header {reader.fieldnames}")
    for raw in reader:
        row: Dict[str, Any] = {"iteration": int(raw["iteration"]), "strategy": raw["strategy"],
                               "block": raw["block"] if raw["block"] == "total" else int(raw["block"])}
        for m in METRICS:
            row[m] = int(raw[m]) if m in _INT_METRICS else float(raw[m])
        rows.append(row)
    return rows


@dataclass
class StrategySummary:
    strategy: str
    iterations: int
    computation_ms: float
    communication_ms: float
    total_bytes: int
    speedup_computation: float
    speedup_communication: float
    speedup_end_to_end: float


@dataclass
class ComparisonSummary:
    rows: List[StrategySummary]

    def __getitem__(self, strategy: str) -> StrategySummary:
        for r in self.rows:
            if r.strategy == strategy:
                return r
        raise KeyError(strategy)

    @property
    def strategies(self) -> List[str]:
        return [r.strategy for r in self.rows]

    def to_dict(self) -> Dict[str, Any]:
        return {"strategies": [asdict(r) for r in self.rows]}


def _order_key(name: str):
    return (STRATEGY_ORDER.index(name), "") if name in STRATEGY_ORDER else (len(STRATEGY_ORDER), name)


def summarize(reports: Mapping[str, Sequence[IterationReport]]) -> ComparisonSummary:
    """Mean per-iteration costs per strategy and speedups over Vanilla.

    Every strategy must have run the same (iteration, seed) pairs as Vanilla.
    """
    if "vanilla" not in reports:
        raise ReportError("summarize needs vanilla reports as the baseline")
    runs = {name: sorted(reps, key=lambda r: r.iteration) for name, reps in reports.items()}
    base_seeds = [(r.iteration, r.seed) for r in runs["vanilla"]]
    if not base_seeds:
        raise ReportError("vanilla has no reports")
    for name, reps in runs.items():
        seeds = [(r.iteration, r.seed) for r in reps]
        if seeds != base_seeds:
            raise ReportError(f"seed mismatch between vanilla and {name}: {seeds} vs {base_seeds}")

    def means(reps):
        n = len(reps)
        comp = math.fsum(r.computation_ms for r in reps) / n
        comm = math.fsum(r.communication_ms for r in reps) / n
        return comp, comm, sum(r.total_bytes for r in reps)

    v_comp, v_comm, _ = means(runs["vanilla"])
    rows = []
    for name in sorted(runs, key=_order_key):
        comp, comm, nbytes = means(runs[name])
        rows.append(StrategySummary(
            strategy=name, iterations=len(runs[name]), computation_ms=comp, communication_ms=comm,
            total_bytes=nbytes,
            speedup_computation=_ratio(v_comp, comp),
            speedup_communication=_ratio(v_comm, comm),
            speedup_end_to_end=_ratio(v_comp + v_comm, comp + comm)))
    return ComparisonSummary(rows)


def _ratio(base: float, other: float) -> float:
    if other == 0:
        return 1.0 if base == 0 else math.inf
    return base / other


def iteration_dict(rep: IterationReport) -> Dict[str, Any]:
    return {"iteration": rep.iteration, "strategy": rep.strategy, "seed": rep.seed,
            "threshold": rep.threshold,
            "blocks": [dict(block=b.block, **b.metrics()) for b in rep.blocks],
            "totals": rep.totals()}


def to_json(path: str | Path, summary: Optional[ComparisonSummary] = None,
            reports: Iterable[IterationReport] = (), meta: Optional[Dict[str, Any]] = None) -> None:
    doc: Dict[str, Any] = {}
    if meta is not None:
        doc["meta"] = meta
    if summary is not None:
        doc.update(summary.to_dict())
    reps = [iteration_dict(r) for r in reports]
    if reps:
        doc["iterations"] = reps
    try:
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc}") from exc


def format_table(summary: ComparisonSummary) -> str:
    """Plain-text breakdown in the shape of a computation/communication table."""
    lines = [f"{'strategy':<16}{'comp ms':>12}{'comm ms':>12}{'bytes':>16}"
             f"{'comp x':>9}{'comm x':>9}{'e2e x':>9}"]
    for r in summary.rows:
        lines.append(f"{r.strategy:<16}{r.computation_ms:>12.2f}{r.communication_ms:>12.2f}"
                     f"{r.total_bytes:>16d}{r.speedup_computation:>9.2f}"
                     f"{r.speedup_communication:>9.2f}{r.speedup_end_to_end:>9.2f}")
    return "\n".join(lines)
