"""Cost measurement backends and the append-only record database.

Two backends produce :class:`Record` objects: wall-clock timing of the executed
loop nest, and a deterministic cache-capacity machine model used by tests and
benchmarks so that results do not depend on the host.
"""
from __future__ import annotations

import json
import logging
import os
import statistics
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .schedule import ANN_UNROLL, ANN_VECTORIZE, ANNOTATIONS, ConfigEntity, ConfigSpace, LoopNest, NestBatch, \
    define_space, execute, lower, lower_batch
from .workload import Workload, make_inputs

log = logging.getLogger(__name__)

DB_ENV = "LOOMTUNE_DB"
DEFAULT_DB = "loomtune_records.jsonl"

OK, FAILED = "ok", "failed"
ORACLE, WALLCLOCK = "oracle", "wallclock"


@dataclass
class Record:
    workload_id: str
    entity: ConfigEntity
    cost: float
    backend_id: str
    repeats: int = 1
    variance: float = 0.0
    timestamp: float = 0.0
    status: str = OK
    features: list | None = None

    def to_record(self) -> dict:
        d = {
            "workload_id": self.workload_id,
            "entity": self.entity.to_record(),
            "cost": self.cost if self.status == OK and np.isfinite(self.cost) else None,
            "backend_id": self.backend_id,
            "repeats": self.repeats,
            "variance": self.variance,
            "timestamp": self.timestamp,
            "status": self.status,
        }
        if self.features is not None:
            d["features"] = list(self.features)
        return d

    def to_line(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)

    @classmethod
    def from_record(cls, d: dict) -> "Record":
        cost = d["cost"]
        return cls(
            workload_id=d["workload_id"],
            entity=ConfigEntity.from_record(d["entity"]),
            cost=float("inf") if cost is None else float(cost),
            backend_id=d["backend_id"],
            repeats=int(d.get("repeats", 1)),
            variance=float(d.get("variance", 0.0)),
            timestamp=float(d.get("timestamp", 0.0)),
            status=d.get("status", OK),
            features=d.get("features"),
        )

    @property
    def ok(self) -> bool:
        return self.status == OK and np.isfinite(self.cost)


# ---------------------------------------------------------------------------
# machine-model oracle


@dataclass(frozen=True)
class MachineModelParams:
    """Storage hierarchy and instruction costs of the analytical machine.

    The register file is the innermost storage level: ``n_registers`` slots, each
    holding one element, or one vector of lanes for a contiguous vectorised access.
    """
    caches: tuple[tuple[int, float], ...] = ((32 * 1024, 1.0), (512 * 1024, 8.0))
    memory_latency: float = 60.0
    flop_cost: float = 0.5
    loop_overhead: float = 0.5
    unroll_bonus: float = 0.9
    vector_width: int = 8
    n_registers: int = 16
    line_bytes: int = 64
    elem_bytes: int = 4
    name: str = "default"

    def __post_init__(self):
        caps = [c for c, _ in self.caches]
        lats = [lat for _, lat in self.caches] + [self.memory_latency]
        if any(b <= a for a, b in zip(caps, caps[1:])):
            raise ValueError("cache capacities must be strictly increasing")
        if any(b <= a for a, b in zip(lats, lats[1:])):
            raise ValueError("cache latencies must be strictly increasing")

    @property
    def backend_id(self) -> str:
        return f"{ORACLE}:{self.name}"

    @property
    def line_elems(self) -> int:
        return max(self.line_bytes // self.elem_bytes, 1)


DEFAULT_MACHINE = MachineModelParams()


def _vector_width(loops, accs, params: MachineModelParams) -> int:
    # the bonus needs unit or zero stride for every access of the innermost loop
    if not loops or loops[-1].annotation != ANN_VECTORIZE:
        return 1
    var = loops[-1].var
    if any(abs(a.stride(var)) > 1 for a in accs):
        return 1
    return min(params.vector_width, loops[-1].extent)


def oracle_cost(nest: LoopNest, params: MachineModelParams = DEFAULT_MACHINE) -> float:
    """Deterministic cost of a nest under the capacity-miss machine model.

    Storage levels are the register file, then each cache. For a level of
    capacity C, walk loops from the innermost outward summing every buffer's
    footprint; the first loop whose working set exceeds C breaks reuse, and
    each iteration of it and its outer loops reloads the footprint of the loops
    nested inside it (in lines, or vectors for registers). If the whole nest
    fits, only compulsory misses are charged. Misses at a level are served with
    the next level's latency; the compute term is flops plus loop overhead.
    """
    loops = nest.loops()
    accs = nest.compute.accesses
    d, nb = len(loops), len(accs)
    ext = [lp.extent for lp in loops]
    strides = [[a.stride(lp.var) for a in accs] for lp in loops]
    total = 1
    for e in ext:
        total *= e
    touch = [[1] * nb for _ in range(d + 1)]
    for q in range(d - 1, -1, -1):
        touch[q] = [t * ext[q] if s else t for t, s in zip(touch[q + 1], strides[q])]
    top = [1] * (d + 1)
    for q in range(d):
        top[q + 1] = top[q] * ext[q]

    width = _vector_width(loops, accs, params)
    lanes = [width if width > 1 and strides[-1][b] == 1 else 1 for b in range(nb)]
    line = params.line_elems
    # lines per element: a resident footprint counts its own contiguous runs, while a
    # streamed one only gains from the innermost loop that moves the buffer
    run0 = [max([ext[q] for q in range(d) if strides[q][b] == 1], default=1) for b in range(nb)]
    stream = []
    for b in range(nb):
        deep = [q for q in range(d) if strides[q][b] != 0]
        stream.append(ext[deep[-1]] if deep and strides[deep[-1]][b] == 1 else 1)

    def reg_set(q):
        return sum(-(-touch[q][b] // lanes[b]) for b in range(nb))

    def byte_set(q):
        return sum(touch[q]) * params.elem_bytes

    levels = [(params.n_registers, reg_set, lambda q, b: lanes[b])]
    for cap, _ in params.caches:
        levels.append((cap, byte_set, lambda q, b: min(line, stream[b] if q else run0[b])))
    lats = [lat for _, lat in params.caches] + [params.memory_latency]

    traffic = 0.0
    for b in range(nb):
        prev, served = float(total), 0.0
        for (cap, wset, gran), lat in zip(levels, lats):
            q_in = 0
            for q in range(d - 1, -1, -1):
                if wset(q) > cap:
                    q_in = q + 1
                    break
            misses = touch[q_in][b] * top[q_in] / gran(q_in, b)
            prev = min(prev, misses)
            traffic += prev * (lat - served)
            served = lat

    overhead = params.loop_overhead
    inner = loops[:-1] if width > 1 or (loops and loops[-1].annotation == ANN_VECTORIZE) else loops
    if inner and inner[-1].annotation == ANN_UNROLL:
        overhead *= params.unroll_bonus
    return total * (params.flop_cost / width + overhead) + traffic


def oracle_cost_batch(batch: NestBatch, params: MachineModelParams = DEFAULT_MACHINE) -> np.ndarray:
    """Vectorised :func:`oracle_cost` over a lowered batch."""
    ext = batch.ext.astype(np.float64)
    B, L = ext.shape
    nb = batch.strides.shape[2]
    rows = np.arange(B)
    total = np.prod(ext, axis=1)
    n = batch.valid.sum(axis=1)
    last = np.maximum(n - 1, 0)
    pos = np.arange(L + 1)[None, :]

    st_last = batch.strides[rows, last, :]
    is_vec = (n > 0) & (batch.ann[rows, last] == ANNOTATIONS.index(ANN_VECTORIZE))
    vect = is_vec & np.all(np.abs(st_last) <= 1, axis=1)
    width = np.where(vect, np.minimum(params.vector_width, batch.ext[rows, last]), 1).astype(np.float64)
    lanes = np.where(vect[:, None] & (st_last == 1), width[:, None], 1.0)

    touch = np.ones((B, L + 1, nb))
    run0 = np.ones((B, nb))
    stream = np.ones((B, nb))
    for b in range(nb):
        sb = np.where(batch.valid, batch.strides[:, :, b], 0)
        te = np.where(sb != 0, ext, 1.0)
        touch[:, :L, b] = np.cumprod(te[:, ::-1], axis=1)[:, ::-1]
        run0[:, b] = np.where(sb == 1, ext, 1.0).max(axis=1)
        moving = sb != 0
        deep = L - 1 - np.argmax(moving[:, ::-1], axis=1)
        stream[:, b] = np.where(moving.any(axis=1) & (sb[rows, deep] == 1), ext[rows, deep], 1.0)
    top = np.concatenate([np.ones((B, 1)), np.cumprod(ext, axis=1)], axis=1)

    reg_set = np.ceil(touch / lanes[:, None, :]).sum(axis=2)
    byte_set = touch.sum(axis=2) * params.elem_bytes
    line = float(params.line_elems)
    levels = [(params.n_registers, reg_set, np.broadcast_to(lanes[:, None, :], touch.shape))]
    for cap, _ in params.caches:
        gran = np.broadcast_to(np.minimum(line, stream)[:, None, :], touch.shape).copy()
        gran[:, 0, :] = np.minimum(line, run0)
        levels.append((cap, byte_set, gran))
    lats = [lat for _, lat in params.caches] + [params.memory_latency]

    traffic = np.zeros(B)
    prev = np.broadcast_to(total[:, None], (B, nb)).copy()
    served = 0.0
    for (cap, wset, gran), lat in zip(levels, lats):
        over = (wset > cap) & (pos < n[:, None])
        has = over.any(axis=1)
        q = L - np.argmax(over[:, ::-1], axis=1)
        q_in = np.where(has, q + 1, 0)
        misses = touch[rows, q_in] * top[rows, q_in][:, None] / gran[rows, q_in]
        prev = np.minimum(prev, misses)
        traffic += prev.sum(axis=1) * (lat - served)
        served = lat

    inner_last = np.where(is_vec, last - 1, last)
    unr = (n > 0) & (inner_last >= 0) & (batch.ann[rows, np.maximum(inner_last, 0)] == ANNOTATIONS.index(ANN_UNROLL))
    overhead = np.where(unr, params.loop_overhead * params.unroll_bonus, params.loop_overhead)
    return total * (params.flop_cost / width + overhead) + traffic


def measure_oracle(w: Workload, ce: ConfigEntity, params: MachineModelParams = DEFAULT_MACHINE,
                   space: ConfigSpace | None = None) -> Record:
    cost = oracle_cost(lower(w, ce, space), params)
    return Record(w.id, ce, float(cost), params.backend_id)


def oracle_sweep(w: Workload, space: ConfigSpace | None = None, params: MachineModelParams = DEFAULT_MACHINE,
                 chunk: int = 65536) -> np.ndarray:
    """Oracle cost of every configuration, indexed by flat config index."""
    space = define_space(w) if space is None else space
    out = np.empty(space.size)
    for lo in range(0, space.size, chunk):
        idx = np.arange(lo, min(lo + chunk, space.size))
        out[idx] = oracle_cost_batch(lower_batch(w, space, space.indices_to_choices(idx)), params)
    return out


# ---------------------------------------------------------------------------
# wall-clock


_MEASURE_LOCK = threading.Lock()


def measure_wallclock(w: Workload, ce: ConfigEntity, repeats: int = 3, warmup: int = 1,
                      parallel: bool = False, jobs: int = 1, space: ConfigSpace | None = None) -> Record:
    """Median of ``repeats`` timed runs after ``warmup`` untimed ones."""
    inputs = make_inputs(w)
    try:
        nest = lower(w, ce, space)
        with _MEASURE_LOCK:
            for _ in range(warmup):
                execute(nest, inputs, parallel=parallel, jobs=jobs)
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                execute(nest, inputs, parallel=parallel, jobs=jobs)
                times.append(time.perf_counter() - t0)
    except Exception as exc:  # noqa: BLE001 - any execution failure becomes a failed record
        log.warning("measurement of %s %s failed: %s", w.id, ce.choices, exc)
        return Record(w.id, ce, float("inf"), WALLCLOCK, repeats, 0.0, time.time(), FAILED)
    var = statistics.pvariance(times) if len(times) > 1 else 0.0
    return Record(w.id, ce, statistics.median(times), WALLCLOCK, repeats, var, time.time())


# ---------------------------------------------------------------------------
# backends used by the tuner: one call measures a whole batch


@dataclass
class OracleBackend:
    params: MachineModelParams = DEFAULT_MACHINE

    @property
    def backend_id(self) -> str:
        return self.params.backend_id

    def measure(self, w: Workload, entities: list[ConfigEntity], space: ConfigSpace | None = None) -> list[Record]:
        if not entities:
            return []
        space = define_space(w) if space is None else space
        choices = np.array([ce.choices for ce in entities], dtype=np.int64)
        costs = oracle_cost_batch(lower_batch(w, space, choices), self.params)
        return [Record(w.id, ce, float(c), self.backend_id) for ce, c in zip(entities, costs)]


@dataclass
class WallclockBackend:
    repeats: int = 3
    warmup: int = 1
    parallel: bool = False
    jobs: int = 1
    backend_id: str = WALLCLOCK

    def measure(self, w: Workload, entities: list[ConfigEntity], space: ConfigSpace | None = None) -> list[Record]:
        return [measure_wallclock(w, ce, self.repeats, self.warmup, self.parallel, self.jobs, space)
                for ce in entities]


# ---------------------------------------------------------------------------
# record database


_DB_LOCK = threading.Lock()


def db_path(path: str | os.PathLike | None = None) -> Path:
    """Explicit path, else $LOOMTUNE_DB, else the default file name in cwd."""
    if path:
        return Path(path)
    return Path(os.environ.get(DB_ENV) or DEFAULT_DB)


def db_append(path, records: Record | Iterable[Record]) -> None:
    if isinstance(records, Record):
        records = [records]
    lines = "".join(r.to_line() + "\n" for r in records)
    with _DB_LOCK, open(path, "a", encoding="utf-8") as fh:
        fh.write(lines)


@dataclass
class LoadResult:
    records: list[Record] = field(default_factory=list)
    warnings: int = 0

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


def read_jsonl(path) -> tuple[list[dict], int]:
    """Parse a line-delimited JSON file, skipping (and counting) corrupt lines."""
    out, bad = [], 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("not an object")
            except ValueError:
                bad += 1
                log.warning("%s:%d: skipping corrupt line", path, lineno)
                continue
            out.append(obj)
    return out, bad


def db_load(path, workload_id: str | None = None, backend_id: str | None = None) -> LoadResult:
    rows, bad = read_jsonl(path)
    res = LoadResult(warnings=bad)
    for d in rows:
        try:
            rec = Record.from_record(d)
        except (KeyError, TypeError, ValueError):
            res.warnings += 1
            continue
        if workload_id is not None and rec.workload_id != workload_id:
            continue
        if backend_id is not None and rec.backend_id != backend_id:
            continue
        res.records.append(rec)
    return res
