"""Trials needed to reach 1.1x the optimum, with and without a pretrained global model.

    python scripts/transfer_experiment.py
    python scripts/transfer_experiment.py --targets conv2d:14,14,16,32,3,2,1 conv2d:3,3,64,64,3,1,1

The global model is fit on random oracle records from two matmuls and two small
conv2d shapes; each target is then tuned from scratch and with transfer.
"""
import argparse
import math
import time

import numpy as np

from loomtune.cli import parse_workloads
from loomtune.explorer import TunerOptions, trials_to_reach, tune
from loomtune.measure import OracleBackend, oracle_sweep
from loomtune.schedule import define_space
from loomtune.transfer import fit_global, save_global

SOURCES = ["matmul:64x64x64", "matmul:96x96x96", "conv2d:14,14,16,16,3,1,1", "conv2d:7,7,32,32,3,1,1"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sources", nargs="+", default=SOURCES)
    ap.add_argument("--targets", nargs="+", default=["conv2d:7,7,32,64,3,2,1"])
    ap.add_argument("--records", type=int, default=2000, help="random oracle records per source")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--trials", type=int, default=500)
    ap.add_argument("--save", help="write the fitted global model here")
    args = ap.parse_args()

    t0 = time.perf_counter()
    rng = np.random.default_rng(123)
    history = []
    for spec in args.sources:
        w = parse_workloads(spec)[0][0]
        cs = define_space(w)
        idx = rng.choice(cs.size, size=min(args.records, cs.size), replace=False)
        history += OracleBackend().measure(w, [cs.index_to_entity(int(i)) for i in idx], cs)
    g = fit_global(history, seed=0)
    print(f"global model: {len(history)} records, {g.n_trees} trees, {time.perf_counter() - t0:.0f} s")
    if args.save:
        save_global(g, args.save)

    for spec in args.targets:
        w = parse_workloads(spec)[0][0]
        target = 1.1 * float(oracle_sweep(w).min())
        out = {}
        for name, tr in (("scratch", None), ("transfer", g)):
            ns = []
            for s in range(args.seeds):
                res = tune(w, OracleBackend(), TunerOptions(max_n_trials=args.trials, seed=s), transfer=tr)
                n = trials_to_reach(res.trace, target)
                ns.append(math.inf if n is None else n)
            out[name] = ns
        ratio = np.median(out["transfer"]) / np.median(out["scratch"])
        print(f"{w.id}: scratch {out['scratch']}, transfer {out['transfer']}, median ratio {ratio:.3f}",
              flush=True)


if __name__ == "__main__":
    main()
