"""Fixed similarity thresholds against the loss-driven one."""
import argparse
from dataclasses import replace

from _fixture import BASE
from luffy_sim.engine import run_many


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--modes", default="fixed:0.9,fixed:0.7,fixed:0.5,adaptive")
    ap.add_argument("--iters", type=int, default=2)
    args = ap.parse_args()
    print(f"{'mode':<12}{'condensed':>11}{'bytes':>12}{'comm ms':>10}")
    for mode in args.modes.split(","):
        reps = run_many(replace(BASE, threshold_mode=mode), ["luffy-condense"], args.iters)["luffy-condense"]
        condensed = sum(r.total("condensed_copies") for r in reps)
        nbytes = sum(r.total_bytes for r in reps)
        comm = sum(r.communication_ms for r in reps) / len(reps)
        print(f"{mode:<12}{condensed:>11d}{nbytes:>12d}{comm:>10.2f}")


if __name__ == "__main__":
    main()
