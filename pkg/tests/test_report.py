import itertools
import random

import pytest

from luffy_sim.report import (CSV_HEADER, BlockReport, IterationReport, ReportError, csv_text,
                              read_csv, summarize, to_csv)


def rep(name, comp, comm, iteration=0, seed=1, blocks=2):
    out = IterationReport(iteration=iteration, strategy=name, seed=seed, threshold=0.5)
    for b in range(blocks):
        out.blocks.append(BlockReport(block=b, attention_ms=comp / blocks, comm_ms=comm / blocks,
                                      dispatch_bytes=10 * (b + 1), combine_bytes=3,
                                      cosine_evals=b))
    return out


def test_header_exact():
    assert ",".join(CSV_HEADER) == ("iteration,block,strategy,attention_ms,expert_ms,dispatch_bytes,"
                                    "combine_bytes,expert_transfer_bytes,comm_ms,condensed_copies,"
                                    "migrated_sequences,cosine_evals")


def test_rows_and_round_trip(tmp_path):
    r = rep("luffy", 3.0, 1.0)
    r.blocks[0].attention_ms = 0.1
    r.blocks[1].attention_ms = 0.2
    path = tmp_path / "r.csv"
    to_csv([r], path)
    rows = read_csv(path)
    assert len(rows) == 3 and rows[-1]["block"] == "total"
    for m in CSV_HEADER[3:]:
        assert rows[-1][m] == sum(row[m] for row in rows[:-1])
        assert rows[-1][m] == r.total(m)


def test_empty_reports_rejected(tmp_path):
    with pytest.raises(ReportError):
        to_csv([], tmp_path / "r.csv")
    with pytest.raises(ReportError):
        to_csv([rep("vanilla", 1, 1)], tmp_path / "missing" / "r.csv")


def test_csv_is_stable():
    assert csv_text([rep("vanilla", 1.0, 2.0)]) == csv_text([rep("vanilla", 1.0, 2.0)])


def test_speedups():
    s = summarize({"vanilla": [rep("vanilla", 4.0, 2.0)], "luffy": [rep("luffy", 4.0, 1.0)]})
    assert s["vanilla"].speedup_computation == s["vanilla"].speedup_communication == 1.0
    assert s["luffy"].speedup_communication == 2.0
    assert s["luffy"].speedup_end_to_end == pytest.approx(6 / 5)


def test_ordering_and_permutation_invariance():
    runs = {"luffy": [rep("luffy", 1, 1)], "ext": [rep("ext", 2, 2)], "vanilla": [rep("vanilla", 3, 3)]}
    base = summarize(runs)
    assert base.strategies == ["vanilla", "ext", "luffy"]
    for perm in itertools.permutations(runs):
        shuffled = {k: runs[k] for k in perm}
        assert summarize(shuffled) == base


def test_iteration_order_irrelevant():
    van = [rep("vanilla", i + 1, 1, iteration=i, seed=i) for i in range(4)]
    lf = [rep("luffy", 1, i + 1, iteration=i, seed=i) for i in range(4)]
    a = summarize({"vanilla": van, "luffy": lf})
    random.Random(0).shuffle(van)
    assert summarize({"vanilla": van, "luffy": lf}) == a


def test_seed_mismatch_rejected():
    with pytest.raises(ReportError):
        summarize({"vanilla": [rep("vanilla", 1, 1, seed=1)], "luffy": [rep("luffy", 1, 1, seed=2)]})
    with pytest.raises(ReportError):
        summarize({"luffy": [rep("luffy", 1, 1)]})
