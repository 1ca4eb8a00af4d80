"""How the candidate count q trades attention balance against traffic."""
import argparse
from dataclasses import replace

from _fixture import BASE
from luffy_sim.engine import run_many
from luffy_sim.report import summarize


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--q", default="1,2,4,8")
    ap.add_argument("--iters", type=int, default=1)
    args = ap.parse_args()
    print(f"{'q':>4}{'comp ms':>12}{'comm ms':>12}{'bytes':>14}")
    for q in (int(x) for x in args.q.split(",")):
        r = summarize(run_many(replace(BASE, q=q), ["vanilla", "luffy-migrate"], args.iters))["luffy-migrate"]
        print(f"{q:>4}{r.computation_ms:>12.2f}{r.communication_ms:>12.2f}{r.total_bytes:>14d}")


if __name__ == "__main__":
    main()
