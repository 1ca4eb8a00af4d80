"""Computation/communication breakdown for every strategy on one workload."""
import argparse

from _fixture import BASE
from luffy_sim.engine import STRATEGIES, run_many
from luffy_sim.report import format_table, summarize, to_json


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iters", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write the summary here")
    args = ap.parse_args()
    summary = summarize(run_many(BASE, list(STRATEGIES), args.iters, seed=args.seed))
    print(format_table(summary))
    if args.json:
        to_json(args.json, summary)


if __name__ == "__main__":
    main()
