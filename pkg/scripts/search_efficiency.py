"""Best-so-far curves of model-guided search against random search on the oracle.

    python scripts/search_efficiency.py --seeds 0-4 --trials 500
    python scripts/search_efficiency.py --variants mean,ucb,ei,random --csv curves.csv

Each variant runs once per seed; the table shows median best-at-N over seeds as
a multiple of the exhaustive optimum, plus the fraction of seeds within 5%.
"""
import argparse
import csv
import time

import numpy as np

from loomtune.cli import parse_workloads
from loomtune.explorer import RANDOM, TunerOptions, best_at, check_trace, tune
from loomtune.measure import OracleBackend, oracle_sweep

VARIANTS = {
    "mean": {},
    "ucb": {"acquisition": "ucb"},
    "ei": {"acquisition": "ei"},
    "regression": {"objective": "regression"},
    "random": {"strategy": RANDOM},
    "ga": {"strategy": "ga"},
}


def seed_list(text):
    if "-" in text:
        lo, hi = map(int, text.split("-"))
        return list(range(lo, hi + 1))
    return [int(s) for s in text.split(",")]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workload", default="matmul:128x128x128")
    ap.add_argument("--seeds", type=seed_list, default=seed_list("0-4"))
    ap.add_argument("--trials", type=int, default=500)
    ap.add_argument("--variants", default="mean,random")
    ap.add_argument("--at", default="64,128,250,500")
    ap.add_argument("--csv", help="write per-trial best-so-far for every run")
    args = ap.parse_args()

    w = parse_workloads(args.workload)[0][0]
    t0 = time.perf_counter()
    opt = float(oracle_sweep(w).min())
    print(f"{w.id}: exhaustive optimum {opt:.6g} ({time.perf_counter() - t0:.0f} s sweep)")
    at = [int(n) for n in args.at.split(",")]
    rows = []
    print(f"{'variant':12s}" + "".join(f"{'@' + str(n):>9s}" for n in at) + "   within 5%   time")
    for name in args.variants.split(","):
        t0 = time.perf_counter()
        curves = []
        for s in args.seeds:
            opts = TunerOptions(max_n_trials=args.trials, seed=s, **VARIANTS[name])
            res = tune(w, OracleBackend(), opts)
            if opts.strategy == "model-gbt":
                bad = check_trace(res.trace, opts.b, opts.epsilon, size=res.state.space.size)
                assert not bad, bad[:3]
            curves.append([best_at(res.trace, n) / opt for n in at])
            rows += [{"variant": name, "seed": s, "trial": t["trial"], "best_so_far": t["best_so_far"]}
                     for t in res.trace]
        curves = np.array(curves)
        med = np.median(curves, axis=0)
        frac = np.mean(curves[:, -1] <= 1.05)
        print(f"{name:12s}" + "".join(f"{m:9.3f}" for m in med)
              + f"   {frac:9.0%}   {time.perf_counter() - t0:4.0f} s", flush=True)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=["variant", "seed", "trial", "best_so_far"])
            wr.writeheader()
            wr.writerows(rows)


if __name__ == "__main__":
    main()
