"""Command-line driver: ``loomtune tune | benchmark | report | db``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .explorer import STRATEGIES, TunerOptions, best_at, check_trace, trials_to_reach, tune
from .features import CONFIG_KNOBS, FLAT_CONTEXT, SCHEMES, featurize_configs
from .measure import WALLCLOCK, MachineModelParams, OracleBackend, WallclockBackend, db_append, db_load, \
    db_path, read_jsonl
from .model import ACQUISITIONS, OBJECTIVES, GBTParams, save
from .schedule import define_space
from .transfer import fit_global, load_global
from .workload import RESNET18_CONV2D, SMALL_SUITE_SCALE, Workload, make_conv2d, make_matmul, resnet18_suite

log = logging.getLogger("loomtune")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
BACKENDS = ("oracle", WALLCLOCK)
# pure-Python execution gets slow beyond this many inner iterations per run
MAX_WALLCLOCK_ITERATIONS = 1 << 24


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    workload: str = "matmul:128x128x128"
    backend: str = "oracle"
    strategy: str = "model-gbt"
    objective: str = "rank"
    acquisition: str = "mean"
    scheme: str = FLAT_CONTEXT
    trials: int = 1000
    b: int = 64
    epsilon: float = 0.05
    lam: float = 2.0
    alpha: float = 0.1
    n_sa: int = 128
    step_sa: int = 500
    kappa: float = 1.0
    n_members: int | None = None
    gbt_depth: int = 6
    gbt_eta: float = 0.1
    gbt_rounds: int = 400
    seed: int = 0
    db: str | None = None
    no_db: bool = False
    save_features: bool = False
    transfer_from: str | None = None
    out: str = "runs"
    jobs: int = 1
    repeats: int = 3
    warmup: int = 1

    def validate(self) -> None:
        if self.trials < 1:
            raise UsageError("budget must be positive")
        choices = {"backend": BACKENDS, "strategy": STRATEGIES, "objective": OBJECTIVES,
                   "acquisition": ACQUISITIONS, "scheme": SCHEMES}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise UsageError(f"{name} must be one of {', '.join(allowed)}, got {getattr(self, name)!r}")
        if self.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        try:
            self.options()
        except ValueError as exc:
            raise UsageError(str(exc)) from exc

    def options(self, seed: int | None = None, strategy: str | None = None, objective: str | None = None,
                acquisition: str | None = None) -> TunerOptions:
        return TunerOptions(
            b=self.b, max_n_trials=self.trials, epsilon=self.epsilon, lam=self.lam, alpha=self.alpha,
            n_sa=self.n_sa, step_sa=self.step_sa, strategy=strategy or self.strategy,
            objective=objective or self.objective, acquisition=acquisition or self.acquisition,
            kappa=self.kappa, n_members=self.n_members, scheme=self.scheme,
            gbt=GBTParams(max_depth=self.gbt_depth, eta=self.gbt_eta, n_rounds=self.gbt_rounds),
            seed=self.seed if seed is None else seed,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_workloads(spec: str) -> tuple[list[Workload], str]:
    """Workload selector grammar; returns the workloads and a note for the summary header."""
    kind, _, arg = spec.partition(":")
    try:
        if kind == "matmul":
            n, m, k = (int(v) for v in arg.lower().split("x"))
            return [make_matmul(n, m, k)], ""
        if kind == "conv2d":
            vals = [int(v) for v in arg.split(",")]
            if len(vals) not in (6, 7):
                raise ValueError("conv2d takes H,W,IC,OC,K,S[,P]")
            return [make_conv2d(*vals)], ""
        if kind == "suite" and arg == "resnet18":
            return resnet18_suite(), f"ResNet-18 conv2d suite ({len(RESNET18_CONV2D)} layers)"
        if kind == "suite" and arg == "resnet18-small":
            return (resnet18_suite(SMALL_SUITE_SCALE),
                    f"ResNet-18 conv2d suite scaled down by {SMALL_SUITE_SCALE} in H, W, IC and OC")
    except ValueError as exc:
        raise UsageError(f"bad workload {spec!r}: {exc}") from exc
    raise UsageError(f"bad workload {spec!r}: expected matmul:NxMxK, conv2d:H,W,IC,OC,K,S[,P], "
                     f"suite:resnet18 or suite:resnet18-small")


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if "run_config" in data:
        data = data["run_config"]
    unknown = set(data) - set(_FIELD_TYPES)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return data


def build_config(args: argparse.Namespace) -> RunConfig:
    merged = load_config(getattr(args, "config", None))
    for name in _FIELD_TYPES:
        v = getattr(args, name, None)
        if v is not None:
            merged[name] = v
    cfg = RunConfig(**merged)
    cfg.validate()
    return cfg


def make_backend(cfg: RunConfig, w: Workload):
    if cfg.backend == "oracle":
        return OracleBackend(MachineModelParams())
    if w.iteration_count > MAX_WALLCLOCK_ITERATIONS:
        raise UsageError(f"{w.id} has {w.iteration_count} iterations; the wallclock backend executes "
                         f"in Python and accepts at most {MAX_WALLCLOCK_ITERATIONS}")
    return WallclockBackend(cfg.repeats, cfg.warmup, parallel=cfg.jobs > 1, jobs=cfg.jobs)


def load_transfer(cfg: RunConfig, target: Workload):
    """Global model from a checkpoint, or fitted on a record file (target records excluded)."""
    if not cfg.transfer_from:
        return None
    path = Path(cfg.transfer_from)
    if not path.exists():
        raise UsageError(f"transfer source {path} does not exist")
    head = path.read_text(encoding="utf-8", errors="replace").lstrip()[:200]
    if head.startswith("{") and '"format"' in head.split("\n", 1)[0]:
        return load_global(path)
    history = [r for r in db_load(path).records if r.workload_id != target.id]
    if not history:
        raise UsageError(f"{path} holds no records from other workloads")
    return fit_global(history, seed=cfg.seed, objective=cfg.objective,
                      params=GBTParams(max_depth=cfg.gbt_depth, eta=cfg.gbt_eta, n_rounds=cfg.gbt_rounds))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o).__name__)


def write_trace(path: Path, header: dict, trace: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"header": header}, sort_keys=True, default=_json_default) + "\n")
        for t in trace:
            fh.write(json.dumps(t, sort_keys=True, default=_json_default) + "\n")


def read_trace(path) -> tuple[dict, list[dict], int]:
    """Header, trial rows and the number of skipped corrupt lines."""
    rows, bad = read_jsonl(path)
    header = {}
    trace = []
    for r in rows:
        if "header" in r:
            header = r["header"]
        elif "trial" in r and "best_so_far" in r:
            trace.append(r)
        else:
            bad += 1
    return header, trace, bad


# ---------------------------------------------------------------------------
# commands


def _tune_one(cfg: RunConfig, w: Workload, out: Path, note: str) -> dict:
    backend = make_backend(cfg, w)
    transfer = load_transfer(cfg, w)
    database = None if cfg.no_db else db_path(cfg.db)
    space = define_space(w)

    def on_batch(records):
        if database is None:
            return
        if cfg.save_features:
            ch = np.array([r.entity.choices for r in records], dtype=np.int64)
            feats = featurize_configs(w, space, ch, cfg.scheme)
            for r, f in zip(records, feats):
                r.features = [float(v) for v in f]
        db_append(database, records)

    t0 = time.perf_counter()
    res = tune(w, backend, cfg.options(), transfer=transfer, on_batch=on_batch)
    wall = time.perf_counter() - t0
    out.mkdir(parents=True, exist_ok=True)
    header = {"run_config": asdict(cfg), "workload": w.to_record(), "backend_id": backend.backend_id,
              "note": note}
    (out / "run_config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    write_trace(out / "trace.jsonl", header, res.trace)
    best = {"workload_id": w.id, "entity": None if res.best_entity is None else res.best_entity.to_record(),
            "cost": res.best_cost if math.isfinite(res.best_cost) else None,
            "values": None if res.best_entity is None else
            {k: (list(v) if isinstance(v, tuple) else v) for k, v in space.values(res.best_entity).items()}}
    (out / "best.json").write_text(json.dumps(best, indent=2, default=_json_default) + "\n")
    if res.state.model is not None and hasattr(res.state.model, "to_record"):
        save(res.state.model, out / "model.json")
    summary = [
        f"workload     {w.id}",
        f"backend      {backend.backend_id}",
        f"strategy     {cfg.strategy} ({cfg.objective}, {cfg.acquisition}, {cfg.scheme})",
        f"best cost    {res.best_cost:.6g}",
        f"trials used  {res.state.n_trials}",
        f"wall time    {wall:.1f} s",
    ]
    if note:
        summary.insert(0, note)
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))
    return best


def cmd_tune(cfg: RunConfig) -> int:
    workloads, note = parse_workloads(cfg.workload)
    root = Path(cfg.out)
    for w in workloads:
        out = root if len(workloads) == 1 else root / w.id
        _tune_one(cfg, w, out, note)
    return EXIT_OK


def cmd_benchmark(cfg: RunConfig, strategies: Sequence[str], seeds: Sequence[int],
                  objectives: Sequence[str], acquisitions: Sequence[str]) -> int:
    workloads, note = parse_workloads(cfg.workload)
    if len(workloads) != 1:
        raise UsageError("benchmark runs on a single workload")
    w = workloads[0]
    for s in strategies:
        if s not in STRATEGIES:
            raise UsageError(f"unknown strategy {s!r}")
    backend = make_backend(cfg, w)
    transfer = load_transfer(cfg, w)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(
        {"run_config": asdict(cfg), "strategies": list(strategies), "seeds": list(seeds),
         "objectives": list(objectives), "acquisitions": list(acquisitions)}, indent=2) + "\n")
    rows = []
    problems = []
    for strategy in strategies:
        model_axes = [(o, a) for o in objectives for a in acquisitions] if strategy == "model-gbt" \
            else [(cfg.objective, cfg.acquisition)]
        for objective, acquisition in model_axes:
            for seed in seeds:
                opts = cfg.options(seed=seed, strategy=strategy, objective=objective, acquisition=acquisition)
                res = tune(w, backend, opts, transfer=transfer if strategy == "model-gbt" else None)
                if strategy == "model-gbt":
                    problems += [f"{strategy}/{objective}/{acquisition}/seed {seed}: {p}"
                                 for p in check_trace(res.trace, opts.b, opts.epsilon, size=res.state.space.size)]
                for t in res.trace:
                    rows.append({"strategy": strategy, "objective": objective, "acquisition": acquisition,
                                 "seed": seed, "trial": t["trial"], "best_so_far": t["best_so_far"]})
                print(f"{strategy:9s} {objective:10s} {acquisition:4s} seed {seed}: "
                      f"best {res.best_cost:.6g} after {res.state.n_trials} trials", flush=True)
    with open(out / "results.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["strategy", "objective", "acquisition", "seed", "trial", "best_so_far"])
        wr.writeheader()
        wr.writerows(rows)
    for p in problems:
        print(f"accounting: {p}", file=sys.stderr)
    print(f"{len(rows)} rows written to {out / 'results.csv'}")
    return EXIT_RUNTIME if problems else EXIT_OK


def summarize_traces(traces: dict[str, list[dict]], at: Sequence[int] = ()) -> list[dict]:
    """Per-run final best, best-at-N and trials to reach the worst run's final best."""
    finals = {k: best_at(t, len(t)) for k, t in traces.items() if t}
    threshold = max(v for v in finals.values() if math.isfinite(v)) if finals else math.inf
    ttt = {k: trials_to_reach(t, threshold) for k, t in traces.items()}
    slowest = max((v for v in ttt.values() if v), default=None)
    out = []
    for k, t in traces.items():
        row = {"run": k, "trials": len(t), "final_best": finals.get(k, math.inf),
               "threshold": threshold, "trials_to_threshold": ttt[k],
               "ratio": (slowest / ttt[k]) if slowest and ttt[k] else None}
        for n in at:
            row[f"best_at_{n}"] = best_at(t, n)
        out.append(row)
    return out


def cmd_report(paths: Sequence[str], csv_path: str | None, at: Sequence[int]) -> int:
    traces = {}
    for p in paths:
        try:
            header, trace, bad = read_trace(p)
        except OSError as exc:
            print(f"error: cannot read trace {p}: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        if bad:
            print(f"warning: skipped {bad} corrupt line(s) in {p}", file=sys.stderr)
        traces[p] = trace
    rows = summarize_traces(traces, at)
    for r in rows:
        best = r["final_best"]
        print(f"{r['run']}: {r['trials']} trials, best {best:.6g}, "
              f"{r['trials_to_threshold']} trials to reach {r['threshold']:.6g}"
              + (f", ratio {r['ratio']:.2f}" if r["ratio"] else ""))
    for n in at:
        vals = [r[f"best_at_{n}"] for r in rows]
        print(f"median best at {n}: {float(np.median(vals)):.6g}")
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["run"])
            wr.writeheader()
            wr.writerows(rows)
    return EXIT_OK


def cmd_db(action: str, path: str | None, workload: str | None, backend: str | None, out: str | None) -> int:
    p = db_path(path)
    if not p.exists():
        print(f"error: database {p} does not exist", file=sys.stderr)
        return EXIT_RUNTIME
    res = db_load(p, workload, backend)
    if res.warnings:
        print(f"warning: skipped {res.warnings} corrupt line(s)", file=sys.stderr)
    if action == "stats":
        counts = {}
        for r in res.records:
            key = (r.workload_id, r.backend_id)
            n, best = counts.get(key, (0, math.inf))
            counts[key] = (n + 1, min(best, r.cost) if r.ok else best)
        print(f"{p}: {len(res.records)} records")
        for (wid, bid), (n, best) in sorted(counts.items()):
            print(f"  {wid:32s} {bid:18s} {n:7d} records, best {best:.6g}")
    else:
        if not out:
            raise UsageError("db export needs --output")
        db_append(out, res.records)
        print(f"{len(res.records)} records written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of RunConfig keys; flags override it")
    p.add_argument("--workload", help="matmul:NxMxK | conv2d:H,W,IC,OC,K,S[,P] | suite:resnet18[-small]")
    p.add_argument("--backend", choices=BACKENDS)
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--objective", choices=OBJECTIVES)
    p.add_argument("--acquisition", choices=ACQUISITIONS)
    p.add_argument("--scheme", choices=SCHEMES)
    p.add_argument("--trials", type=int, help="measurement budget")
    p.add_argument("--b", "--batch", dest="b", type=int, help="configs measured per round")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--lam", type=float, help="SA pool size as a multiple of b")
    p.add_argument("--alpha", type=float, help="diversity weight")
    p.add_argument("--n-sa", dest="n_sa", type=int)
    p.add_argument("--step-sa", dest="step_sa", type=int)
    p.add_argument("--kappa", type=float)
    p.add_argument("--n-members", dest="n_members", type=int)
    p.add_argument("--gbt-depth", dest="gbt_depth", type=int)
    p.add_argument("--gbt-eta", dest="gbt_eta", type=float)
    p.add_argument("--gbt-rounds", dest="gbt_rounds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--db", help="record database (default $LOOMTUNE_DB or ./loomtune_records.jsonl)")
    p.add_argument("--no-db", dest="no_db", action="store_const", const=True, help="do not record measurements")
    p.add_argument("--save-features", dest="save_features", action="store_const", const=True)
    p.add_argument("--transfer-from", dest="transfer_from", help="global model checkpoint or record file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--jobs", type=int, help="worker cap for parallel execution")
    p.add_argument("--repeats", type=int)
    p.add_argument("--warmup", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="loomtune", description="Learned autotuner for tensor loop nests.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _add_run_flags(sub.add_parser("tune", help="tune one workload or a suite"))

    bench = sub.add_parser("benchmark", help="strategy x seed grid, best-so-far table")
    _add_run_flags(bench)
    bench.add_argument("--strategies", default="model-gbt,random,ga")
    bench.add_argument("--seeds", default="0,1,2,3,4")
    bench.add_argument("--objectives", default=None, help="comma list; defaults to --objective")
    bench.add_argument("--acquisitions", default=None, help="comma list; defaults to --acquisition")

    rep = sub.add_parser("report", help="summarise trace files")
    rep.add_argument("traces", nargs="+")
    rep.add_argument("--csv", help="write the comparison table here")
    rep.add_argument("--at", default="", help="comma list of trial counts for best-at-N")

    db = sub.add_parser("db", help="inspect or filter the record database")
    db.add_argument("action", choices=("stats", "export"))
    db.add_argument("--db")
    db.add_argument("--workload-id", dest="workload_id")
    db.add_argument("--backend-id", dest="backend_id")
    db.add_argument("--output")
    return ap


def _int_list(s: str) -> list[int]:
    try:
        return [int(v) for v in s.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated integer list, got {s!r}") from exc


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "tune":
            return cmd_tune(build_config(args))
        if args.command == "benchmark":
            cfg = build_config(args)
            objectives = args.objectives.split(",") if args.objectives else [cfg.objective]
            acquisitions = args.acquisitions.split(",") if args.acquisitions else [cfg.acquisition]
            for o in objectives:
                if o not in OBJECTIVES:
                    raise UsageError(f"unknown objective {o!r}")
            for a in acquisitions:
                if a not in ACQUISITIONS:
                    raise UsageError(f"unknown acquisition {a!r}")
            return cmd_benchmark(cfg, args.strategies.split(","), _int_list(args.seeds), objectives, acquisitions)
        if args.command == "report":
            return cmd_report(args.traces, args.csv, _int_list(args.at))
        return cmd_db(args.action, args.db, args.workload_id, args.backend_id, args.output)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level guard maps failures to the runtime exit code
        log.debug("run failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
