"""Speedups as the number of experts (and devices) grows."""
import argparse
from dataclasses import replace

from _fixture import BASE
from luffy_sim.engine import run_many
from luffy_sim.report import summarize


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--experts", default="2,4,8,16")
    ap.add_argument("--iters", type=int, default=1)
    args = ap.parse_args()
    print(f"{'experts':>8}{'strategy':>10}{'comp x':>9}{'comm x':>9}{'e2e x':>9}")
    for n in (int(x) for x in args.experts.split(",")):
        cfg = replace(BASE, model=replace(BASE.model, experts_per_layer=n),
                      cluster=replace(BASE.cluster, num_devices=n, expert_placement=None))
        summary = summarize(run_many(cfg, ["vanilla", "ext", "hyt", "luffy"], args.iters))
        for r in summary.rows[1:]:
            print(f"{n:>8}{r.strategy:>10}{r.speedup_computation:>9.2f}"
                  f"{r.speedup_communication:>9.2f}{r.speedup_end_to_end:>9.2f}")


if __name__ == "__main__":
    main()
