"""Schedule spaces, lowering to loop nests, and a loop-nest executor.

A :class:`ConfigSpace` is an ordered list of knobs; a :class:`ConfigEntity` picks
one value per knob. :func:`lower` turns (workload, entity) into a perfect
:class:`LoopNest` whose buffer accesses are affine in the loop variables, and
:func:`execute` runs that nest on real buffers in exactly the loop order given.
"""
from __future__ import annotations

import itertools
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .workload import ACCUM_DTYPES, CONV2D, MATMUL, Workload, check_inputs, store

SPLIT, REORDER, UNROLL, VECTORIZE = "SplitTile", "Reorder", "Unroll", "Vectorize"
NONE, ANN_UNROLL, ANN_VECTORIZE, ANN_PARALLEL = "none", "unroll", "vectorize", "parallel"
ANNOTATIONS = (NONE, ANN_UNROLL, ANN_VECTORIZE, ANN_PARALLEL)

UNROLL_FACTORS = (1, 2, 4, 8, 16)
VECTOR_WIDTH = 8


@dataclass(frozen=True)
class Knob:
    name: str
    kind: str
    domain: tuple

    def __post_init__(self):
        if not self.domain:
            raise ValueError(f"knob {self.name!r} has an empty domain")

    def __len__(self):
        return len(self.domain)


@dataclass(frozen=True)
class ConfigEntity:
    workload_id: str
    choices: tuple[int, ...]

    def to_record(self) -> dict:
        return {"workload_id": self.workload_id, "choices": list(self.choices)}

    def to_line(self) -> str:
        return json.dumps(self.to_record())

    @classmethod
    def from_record(cls, rec: dict) -> "ConfigEntity":
        return cls(rec["workload_id"], tuple(int(c) for c in rec["choices"]))


@dataclass(frozen=True)
class ConfigSpace:
    workload_id: str
    knobs: tuple[Knob, ...]

    def __post_init__(self):
        if not self.knobs:
            raise ValueError("a config space needs at least one knob")
        object.__setattr__(self, "radix", np.array([len(k) for k in self.knobs], dtype=np.int64))

    @property
    def size(self) -> int:
        return int(np.prod([len(k) for k in self.knobs], dtype=object))

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(len(k) for k in self.knobs)

    def knob(self, name: str) -> Knob:
        for k in self.knobs:
            if k.name == name:
                return k
        raise KeyError(name)

    def values(self, ce: ConfigEntity) -> dict:
        self.check(ce)
        return {k.name: k.domain[c] for k, c in zip(self.knobs, ce.choices)}

    def check(self, ce: ConfigEntity) -> None:
        if ce.workload_id != self.workload_id:
            raise ValueError(f"entity for {ce.workload_id!r} used with space of {self.workload_id!r}")
        if len(ce.choices) != len(self.knobs):
            raise ValueError(f"entity has {len(ce.choices)} choices, space has {len(self.knobs)} knobs")
        for c, k in zip(ce.choices, self.knobs):
            if not 0 <= c < len(k):
                raise ValueError(f"choice {c} out of range for knob {k.name!r} ({len(k)} values)")

    # mixed-radix addressing, first knob is the least significant digit
    def index_to_entity(self, idx: int) -> ConfigEntity:
        idx = int(idx)
        if not 0 <= idx < self.size:
            raise IndexError(f"index {idx} outside [0, {self.size})")
        choices = []
        for k in self.knobs:
            idx, c = divmod(idx, len(k))
            choices.append(c)
        return ConfigEntity(self.workload_id, tuple(choices))

    def entity_to_index(self, ce: ConfigEntity) -> int:
        self.check(ce)
        idx = 0
        for c, k in zip(reversed(ce.choices), reversed(self.knobs)):
            idx = idx * len(k) + c
        return idx

    def indices_to_choices(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64).copy()
        out = np.empty((idx.size, len(self.knobs)), dtype=np.int64)
        for j, r in enumerate(self.radix):
            out[:, j] = idx % r
            idx //= r
        return out

    def choices_to_indices(self, choices: np.ndarray) -> np.ndarray:
        choices = np.asarray(choices, dtype=np.int64)
        idx = np.zeros(choices.shape[0], dtype=np.int64)
        for j in range(len(self.knobs) - 1, -1, -1):
            idx = idx * self.radix[j] + choices[:, j]
        return idx

    def entity(self, choices: Sequence[int]) -> ConfigEntity:
        ce = ConfigEntity(self.workload_id, tuple(int(c) for c in choices))
        self.check(ce)
        return ce


def index_to_entity(cs: ConfigSpace, idx: int) -> ConfigEntity:
    return cs.index_to_entity(idx)


def entity_to_index(cs: ConfigSpace, ce: ConfigEntity) -> int:
    return cs.entity_to_index(ce)


def factorizations(n: int, parts: int) -> list[tuple[int, ...]]:
    """All ordered tuples of ``parts`` positive integers whose product is ``n``."""
    if parts == 1:
        return [(n,)]
    out = []
    for d in range(1, n + 1):
        if n % d == 0:
            out.extend((d,) + rest for rest in factorizations(n // d, parts - 1))
    return out


def define_space(w: Workload) -> ConfigSpace:
    p = w.p
    if w.kind == MATMUL:
        knobs = [
            Knob("tile_i", SPLIT, tuple(factorizations(p["N"], 3))),
            Knob("tile_j", SPLIT, tuple(factorizations(p["M"], 3))),
            Knob("tile_k", SPLIT, tuple(factorizations(p["K"], 2))),
            Knob("reorder", REORDER, tuple(itertools.permutations(("i0", "j0", "k0")))),
        ]
    elif w.kind == CONV2D:
        oc, oh, ow = w.output.shape
        knobs = [
            Knob("tile_oc", SPLIT, tuple(factorizations(oc, 3))),
            Knob("tile_oh", SPLIT, tuple(factorizations(oh, 2))),
            Knob("tile_ow", SPLIT, tuple(factorizations(ow, 3))),
            Knob("tile_ic", SPLIT, tuple(factorizations(p["IC"], 2))),
            Knob("reorder", REORDER, tuple(itertools.permutations(("oc0", "oh0", "ow0", "ic0")))),
        ]
    else:
        raise ValueError(f"unsupported workload kind {w.kind!r}")
    knobs.append(Knob("unroll", UNROLL, UNROLL_FACTORS))
    knobs.append(Knob("vectorize", VECTORIZE, (False, True)))
    return ConfigSpace(w.id, tuple(knobs))


def neighbor(cs: ConfigSpace, ce: ConfigEntity, rng: np.random.Generator) -> ConfigEntity:
    """Resample one non-singleton knob to a different value."""
    movable = [j for j, k in enumerate(cs.knobs) if len(k) > 1]
    if not movable:
        return ce
    j = movable[rng.integers(len(movable))]
    new = rng.integers(len(cs.knobs[j]) - 1)
    if new >= ce.choices[j]:
        new += 1
    choices = list(ce.choices)
    choices[j] = int(new)
    return ConfigEntity(ce.workload_id, tuple(choices))


def neighbors(cs: ConfigSpace, choices: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Batched :func:`neighbor` over rows of a choice matrix."""
    movable = np.array([j for j, k in enumerate(cs.knobs) if len(k) > 1], dtype=np.int64)
    out = np.array(choices, dtype=np.int64, copy=True)
    if movable.size == 0:
        return out
    rows = np.arange(out.shape[0])
    j = movable[rng.integers(movable.size, size=out.shape[0])]
    new = rng.integers(0, cs.radix[j] - 1)
    new += new >= out[rows, j]
    out[rows, j] = new
    return out


# ---------------------------------------------------------------------------
# loop nests


@dataclass(frozen=True)
class Access:
    buffer: str
    terms: tuple[tuple[str, int], ...]  # (loop var, stride) with stride != 0
    offset: int = 0

    def stride(self, var: str) -> int:
        for v, c in self.terms:
            if v == var:
                return c
        return 0


@dataclass(frozen=True)
class Compute:
    output: Access
    inputs: tuple[Access, ...]
    op: str = "mac"

    @property
    def accesses(self) -> tuple[Access, ...]:
        return (self.output,) + self.inputs


@dataclass(frozen=True)
class Loop:
    var: str
    extent: int
    annotation: str
    body: "Loop | Compute"
    axis: str = ""
    reduce: bool = False


@dataclass(frozen=True)
class Buffer:
    name: str
    shape: tuple[int, ...]  # storage shape, after padding
    pad: tuple[tuple[int, int], ...] = ()


@dataclass(frozen=True)
class LoopNest:
    workload_id: str
    dtype: str
    root: "Loop | Compute"
    buffers: tuple[Buffer, ...]  # output first, then inputs in workload order

    def loops(self) -> list[Loop]:
        out, node = [], self.root
        while isinstance(node, Loop):
            out.append(node)
            node = node.body
        return out

    @property
    def compute(self) -> Compute:
        node = self.root
        while isinstance(node, Loop):
            node = node.body
        return node

    @property
    def iteration_count(self) -> int:
        n = 1
        for lp in self.loops():
            n *= lp.extent
        return n

    def pretty(self) -> str:
        lines, ind = [], ""
        for lp in self.loops():
            ann = "" if lp.annotation == NONE else f"  # {lp.annotation}"
            lines.append(f"{ind}for {lp.var} in range({lp.extent}):{ann}")
            ind += "  "
        c = self.compute

        def fmt(a: Access) -> str:
            terms = " + ".join(f"{s}*{v}" for v, s in a.terms) or "0"
            return f"{a.buffer}[{terms}{' + ' + str(a.offset) if a.offset else ''}]"

        lines.append(f"{ind}{fmt(c.output)} += {' * '.join(fmt(a) for a in c.inputs)}")
        return "\n".join(lines)


@dataclass(frozen=True)
class Axis:
    name: str
    levels: int
    strides: tuple[int, ...]  # per buffer, stride of the unsplit axis
    knob: str | None = None  # split knob; None means a single fixed level
    extent: int = 1
    reduce: bool = False


@dataclass(frozen=True)
class Skeleton:
    """Declarative shape of a workload's loop nest, shared by scalar and batch lowering."""
    axes: tuple[Axis, ...]
    outer_knob: str
    inner: tuple[str, ...]
    buffers: tuple[Buffer, ...]

    @property
    def vars(self) -> tuple[str, ...]:
        return tuple(f"{a.name}{lvl}" for a in self.axes for lvl in range(a.levels))


def skeleton(w: Workload) -> Skeleton:
    p = w.p
    if w.kind == MATMUL:
        n, m, k = p["N"], p["M"], p["K"]
        return Skeleton(
            axes=(
                Axis("i", 3, (m, k, 0), "tile_i"),
                Axis("j", 3, (1, 0, 1), "tile_j"),
                Axis("k", 2, (0, 1, m), "tile_k", reduce=True),
            ),
            outer_knob="reorder",
            inner=("i1", "j1", "k1", "i2", "j2"),
            buffers=(Buffer("C", (n, m)), Buffer("A", (n, k)), Buffer("B", (k, m))),
        )
    if w.kind == CONV2D:
        ic, ks, s, pad = p["IC"], p["K"], p["S"], p["P"]
        oc, oh, ow = w.output.shape
        hp, wp = p["H"] + 2 * pad, p["W"] + 2 * pad
        return Skeleton(
            axes=(
                Axis("oc", 3, (oh * ow, 0, ic * ks * ks), "tile_oc"),
                Axis("oh", 2, (ow, s * wp, 0), "tile_oh"),
                Axis("ow", 3, (1, s, 0), "tile_ow"),
                Axis("ic", 2, (0, hp * wp, ks * ks), "tile_ic", reduce=True),
                Axis("kh", 1, (0, wp, ks), extent=ks, reduce=True),
                Axis("kw", 1, (0, 1, 1), extent=ks, reduce=True),
            ),
            outer_knob="reorder",
            inner=("oc1", "oh1", "ow1", "ic1", "kh0", "kw0", "oc2", "ow2"),
            buffers=(
                Buffer("O", (oc, oh, ow)),
                Buffer("X", (ic, hp, wp), ((0, 0), (pad, pad), (pad, pad))),
                Buffer("W", (oc, ic, ks, ks)),
            ),
        )
    raise ValueError(f"unsupported workload kind {w.kind!r}")


@dataclass
class NestBatch:
    """A batch of lowered nests as padded arrays, loops compacted to the front.

    ``ext`` is 1 and ``valid`` False on padding positions; ``ann`` indexes ANNOTATIONS.
    """
    vars: np.ndarray  # (B, L) index into skeleton.vars
    ext: np.ndarray  # (B, L)
    ann: np.ndarray  # (B, L)
    strides: np.ndarray  # (B, L, n_buffers)
    reduce: np.ndarray  # (B, L)
    valid: np.ndarray  # (B, L)

    def __len__(self):
        return self.ext.shape[0]


_SK_CACHE: dict = {}


def _tables(w: Workload, space: ConfigSpace):
    key = (w, space)
    hit = _SK_CACHE.get(key)
    if hit is not None:
        return hit
    sk = skeleton(w)
    names = sk.vars
    pos = {v: i for i, v in enumerate(names)}
    knob_pos = {k.name: j for j, k in enumerate(space.knobs)}
    reduce = np.array([a.reduce for a in sk.axes for _ in range(a.levels)])
    outer_knob = space.knob(sk.outer_knob)
    perm = np.array([[pos[v] for v in order] for order in outer_knob.domain], dtype=np.int64)
    inner = np.array([pos[v] for v in sk.inner], dtype=np.int64)
    tiles = {}
    for a in sk.axes:
        if a.knob is not None:
            tiles[a.name] = np.array(space.knob(a.knob).domain, dtype=np.int64).reshape(-1, a.levels)
    unroll = np.array(space.knob("unroll").domain, dtype=np.int64)
    vec = np.array(space.knob("vectorize").domain, dtype=bool)
    hit = (sk, knob_pos, reduce, perm, inner, tiles, unroll, vec)
    _SK_CACHE[key] = hit
    return hit


def lower_batch(w: Workload, space: ConfigSpace, choices: np.ndarray) -> NestBatch:
    """Vectorised lowering of many configurations of one workload."""
    sk, knob_pos, reduce, perm, inner, tiles, unroll, vec = _tables(w, space)
    choices = np.atleast_2d(np.asarray(choices, dtype=np.int64))
    B = choices.shape[0]
    nbuf = len(sk.buffers)
    ext_cols, stride_cols = [], []
    for a in sk.axes:
        if a.knob is None:
            e = np.full((B, 1), a.extent, dtype=np.int64)
        else:
            e = tiles[a.name][choices[:, knob_pos[a.knob]]]
        ext_cols.append(e)
        # stride of level l = axis stride * product of inner level extents
        inner_prod = np.ones((B, a.levels), dtype=np.int64)
        for lvl in range(a.levels - 2, -1, -1):
            inner_prod[:, lvl] = inner_prod[:, lvl + 1] * e[:, lvl + 1]
        stride_cols.append(inner_prod[:, :, None] * np.array(a.strides, dtype=np.int64)[None, None, :])
    ext_var = np.concatenate(ext_cols, axis=1)
    stride_var = np.concatenate(stride_cols, axis=1)

    order = np.concatenate([perm[choices[:, knob_pos[sk.outer_knob]]],
                            np.broadcast_to(inner, (B, inner.size))], axis=1)
    ext = np.take_along_axis(ext_var, order, axis=1)
    # elide extent-1 loops, keeping relative order
    keep = np.argsort(ext == 1, axis=1, kind="stable")
    order = np.take_along_axis(order, keep, axis=1)
    ext = np.take_along_axis(ext, keep, axis=1)
    valid = ext > 1
    strides = np.take_along_axis(stride_var, order[:, :, None], axis=1)
    strides = np.where(valid[:, :, None], strides, 0)
    red = reduce[order] & valid

    L = ext.shape[1]
    n = valid.sum(axis=1)
    rows = np.arange(B)
    ann = np.zeros((B, L), dtype=np.int64)
    vect = vec[choices[:, knob_pos["vectorize"]]] & (n > 0)
    last = np.maximum(n - 1, 0)
    ann[rows[vect], last[vect]] = ANNOTATIONS.index(ANN_VECTORIZE)
    factor = unroll[choices[:, knob_pos["unroll"]]]
    e_rest = np.where(ann == 0, ext, 1)
    rev = np.cumprod(e_rest[:, ::-1], axis=1)[:, ::-1]
    unr = valid & (ann == 0) & (rev <= factor[:, None]) & (factor[:, None] > 1)
    ann[unr] = ANNOTATIONS.index(ANN_UNROLL)
    par = valid[:, 0] & (ann[:, 0] == 0) & ~red[:, 0]
    ann[par, 0] = ANNOTATIONS.index(ANN_PARALLEL)
    return NestBatch(order, ext, ann, strides, red, valid)


def lower(w: Workload, ce: ConfigEntity, space: ConfigSpace | None = None) -> LoopNest:
    """Lower (workload, config) to a perfect loop nest; extent-1 loops are elided."""
    if space is None:
        space = _space_for(w)
    if ce.workload_id != w.id:
        raise ValueError(f"entity for {ce.workload_id!r} does not belong to workload {w.id!r}")
    space.check(ce)
    batch = lower_batch(w, space, np.array([ce.choices]))
    return nest_from_batch(w, batch, 0)


@lru_cache(maxsize=64)
def _space_for(w: Workload) -> ConfigSpace:
    return define_space(w)


def nest_from_batch(w: Workload, batch: NestBatch, row: int) -> LoopNest:
    sk = skeleton(w)
    names = sk.vars
    n = int(batch.valid[row].sum())
    axis_of = [a.name for a in sk.axes for _ in range(a.levels)]
    vars_ = [names[v] for v in batch.vars[row, :n]]
    accs = []
    for b, buf in enumerate(sk.buffers):
        terms = tuple((vars_[k], int(batch.strides[row, k, b])) for k in range(n) if batch.strides[row, k, b])
        accs.append(Access(buf.name, terms))
    node: Loop | Compute = Compute(accs[0], tuple(accs[1:]))
    for k in range(n - 1, -1, -1):
        node = Loop(vars_[k], int(batch.ext[row, k]), ANNOTATIONS[batch.ann[row, k]], node,
                    axis_of[batch.vars[row, k]], bool(batch.reduce[row, k]))
    return LoopNest(w.id, w.dtype, node, sk.buffers)


# ---------------------------------------------------------------------------
# execution


class _Src:
    def __init__(self):
        self.lines: list[str] = []

    def emit(self, depth: int, text: str):
        self.lines.append("    " * depth + text)


def _codegen(nest: LoopNest) -> str:
    loops = nest.loops()
    comp = nest.compute
    accs = comp.accesses
    vectorized = bool(loops) and loops[-1].annotation == ANN_VECTORIZE
    src = _Src()
    src.emit(0, "def kernel(b0, b1, b2, lo, hi):")
    counter = itertools.count()

    def off_expr(base: str, var: str, stride: int) -> str:
        return f"{base} + {stride}*{var}" if stride else base

    def rec(depth: int, pos: int, bases: list[str], env_const: list[int]):
        # bases: python expressions (variable names) holding each buffer's current offset
        if pos == len(loops) or (vectorized and pos == len(loops) - 1):
            emit_body(depth, pos, bases, env_const)
            return
        lp = loops[pos]
        strides = [a.stride(lp.var) for a in accs]
        if lp.annotation == ANN_UNROLL:
            for val in range(lp.extent):
                consts = [c + s * val for c, s in zip(env_const, strides)]
                rec(depth, pos + 1, bases, consts)
            return
        rng = f"range(lo, hi)" if pos == 0 else f"range({lp.extent})"
        var = f"v{pos}"
        src.emit(depth, f"for {var} in {rng}:")
        new_bases = []
        for b, s in enumerate(strides):
            if s:
                name = f"o{b}_{next(counter)}"
                src.emit(depth + 1, f"{name} = {off_expr(bases[b], var, s)}")
                new_bases.append(name)
            else:
                new_bases.append(bases[b])
        rec(depth + 1, pos + 1, new_bases, env_const)

    def idx(b: int, bases: list[str], env_const: list[int]) -> str:
        return f"{bases[b]} + {env_const[b]}" if env_const[b] else bases[b]

    def emit_body(depth: int, pos: int, bases, env_const):
        o, a, c = (idx(b, bases, env_const) for b in range(3))
        if not vectorized:
            src.emit(depth, f"b0[{o}] += b1[{a}] * b2[{c}]")
            return
        lp = loops[pos]
        so, sa, sb = (acc.stride(lp.var) for acc in accs)
        full, tail = divmod(lp.extent, VECTOR_WIDTH)

        def block(d: int, start: str, width: int):
            def sl(buf: str, base: str, s: int) -> str:
                if s == 0:
                    return f"{buf}[{base}]"
                first = f"{base} + {s}*{start}"
                return f"{buf}[{first}:{first} + {s * width}:{s}]"

            prod = f"{sl('b1', a, sa)} * {sl('b2', c, sb)}"
            if so == 0:
                if sa == 0 and sb == 0:
                    src.emit(d, f"b0[{o}] += {width} * ({prod})")
                elif sa == 0 or sb == 0:
                    src.emit(d, f"b0[{o}] += ({prod}).sum()")
                else:
                    src.emit(d, f"b0[{o}] += dot({sl('b1', a, sa)}, {sl('b2', c, sb)})")
            else:
                first = f"{o} + {so}*{start}"
                src.emit(d, f"b0[{first}:{first} + {so * width}:{so}] += {prod}")

        if full == 1 and tail == 0:
            block(depth, "0", VECTOR_WIDTH)
        elif full:
            src.emit(depth, f"for vb in range(0, {full * VECTOR_WIDTH}, {VECTOR_WIDTH}):")
            block(depth + 1, "vb", VECTOR_WIDTH)
        if tail:
            block(depth, str(full * VECTOR_WIDTH), tail)

    rec(1, 0, ["0", "0", "0"], [a.offset for a in accs])
    if len(src.lines) == 1:
        src.emit(1, "pass")
    return "\n".join(src.lines)


@lru_cache(maxsize=256)
def compile_nest(nest: LoopNest):
    code = _codegen(nest)
    ns = {"dot": np.dot}
    exec(compile(code, f"<loopnest {nest.workload_id}>", "exec"), ns)
    return ns["kernel"]


def prepare_buffers(nest: LoopNest, inputs: Sequence[np.ndarray]) -> list[np.ndarray]:
    acc_t = ACCUM_DTYPES[nest.dtype]
    out = [np.zeros(nest.buffers[0].shape, dtype=acc_t)]
    for buf, arr in zip(nest.buffers[1:], inputs):
        arr = np.asarray(arr).astype(acc_t)
        if buf.pad:
            arr = np.pad(arr, buf.pad)
        if tuple(arr.shape) != tuple(buf.shape):
            raise ValueError(f"buffer {buf.name} has shape {arr.shape}, expected {buf.shape}")
        out.append(arr)
    return out



def execute(nest: LoopNest, inputs: Sequence[np.ndarray], parallel: bool = False,
            jobs: int = 4, workload: Workload | None = None) -> np.ndarray:
    """Run the nest on ``inputs`` and return the output tensor.

    With ``parallel=True`` a parallel-annotated outermost loop is split across
    threads; otherwise everything runs sequentially in loop order.
    """
    if workload is not None:
        inputs = check_inputs(workload, inputs)
    bufs = prepare_buffers(nest, inputs)
    loops = nest.loops()
    vectorized = bool(loops) and loops[-1].annotation == ANN_VECTORIZE
    if vectorized:
        flat = [b.reshape(-1) for b in bufs]
    else:
        flat = [b.reshape(-1).tolist() for b in bufs]
    kernel = compile_nest(nest)
    if not loops or (vectorized and len(loops) == 1):
        kernel(*flat, 0, 1)
    else:
        hi = loops[0].extent
        if parallel and loops[0].annotation == ANN_PARALLEL and jobs > 1 and hi > 1:
            bounds = np.linspace(0, hi, min(jobs, hi) + 1).astype(int)
            with ThreadPoolExecutor(max_workers=len(bounds) - 1) as ex:
                list(ex.map(lambda lh: kernel(*flat, *lh), zip(bounds[:-1], bounds[1:])))
        else:
            kernel(*flat, 0, hi)
    out = np.asarray(flat[0], dtype=bufs[0].dtype).reshape(nest.buffers[0].shape)
    return store(out, nest.dtype)
