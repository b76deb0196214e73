"""Tensor operator workloads and the naive reference executor.

A workload is a matmul ``C[i, j] += A[i, k] * B[k, j]`` or a single-batch NCHW
conv2d ``O[oc, oh, ow] += X[ic, oh*S + kh - P, ow*S + kw - P] * W[oc, ic, kh, kw]``
with concrete integer shapes.
"""
from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DTYPES = {"f32": np.float32, "i32": np.int32}
ACCUM_DTYPES = {"f32": np.float64, "i32": np.int64}

MATMUL = "matmul"
CONV2D = "conv2d"
KINDS = (MATMUL, CONV2D)

_MATMUL_KEYS = ("N", "M", "K")
_CONV2D_KEYS = ("H", "W", "IC", "OC", "K", "S", "P")


@dataclass(frozen=True)
class TensorSpec:
    name: str
    shape: tuple[int, ...]
    dtype: str = "f32"

    def __post_init__(self):
        if not self.shape:
            raise ValueError(f"tensor {self.name!r} has an empty shape")
        if any(int(e) < 1 for e in self.shape):
            raise ValueError(f"tensor {self.name!r} has a non-positive extent: {self.shape}")
        if self.dtype not in DTYPES:
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class Workload:
    kind: str
    params: tuple[tuple[str, int], ...]
    inputs: tuple[TensorSpec, ...]
    output: TensorSpec
    dtype: str = "f32"
    id: str = field(default="", compare=False)

    @property
    def p(self) -> dict[str, int]:
        return dict(self.params)

    @property
    def iteration_count(self) -> int:
        p = self.p
        if self.kind == MATMUL:
            return p["N"] * p["M"] * p["K"]
        oc, oh, ow = self.output.shape
        return oc * oh * ow * p["IC"] * p["K"] * p["K"]

    def to_record(self) -> dict:
        return {"kind": self.kind, "params": self.p, "dtype": self.dtype, "id": self.id}

    def to_line(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)


def _format_id(kind: str, p: dict[str, int], dtype: str) -> str:
    if kind == MATMUL:
        base = f"matmul-{p['N']}x{p['M']}x{p['K']}"
    else:
        base = f"conv2d-{p['H']}x{p['W']}x{p['IC']}x{p['OC']}-k{p['K']}s{p['S']}p{p['P']}"
    return base if dtype == "f32" else f"{base}-{dtype}"


def make_matmul(n: int, m: int, k: int, dtype: str = "f32") -> Workload:
    if min(n, m, k) < 1:
        raise ValueError(f"matmul dimensions must be positive, got {(n, m, k)}")
    p = {"N": int(n), "M": int(m), "K": int(k)}
    return Workload(
        kind=MATMUL,
        params=tuple(p.items()),
        inputs=(TensorSpec("A", (n, k), dtype), TensorSpec("B", (k, m), dtype)),
        output=TensorSpec("C", (n, m), dtype),
        dtype=dtype,
        id=_format_id(MATMUL, p, dtype),
    )


def conv2d_out_size(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def make_conv2d(h: int, w: int, ic: int, oc: int, k: int, s: int, p: int | None = None,
                dtype: str = "f32") -> Workload:
    """Single-batch NCHW conv2d without bias. ``p`` defaults to ``k // 2``."""
    if p is None:
        p = k // 2
    if min(h, w, ic, oc, k, s) < 1 or p < 0:
        raise ValueError(f"conv2d parameters must be positive, got {(h, w, ic, oc, k, s, p)}")
    if k > h + 2 * p or k > w + 2 * p:
        raise ValueError(f"kernel {k} larger than padded input {(h + 2 * p, w + 2 * p)}")
    oh, ow = conv2d_out_size(h, k, s, p), conv2d_out_size(w, k, s, p)
    params = {"H": h, "W": w, "IC": ic, "OC": oc, "K": k, "S": s, "P": p}
    params = {key: int(v) for key, v in params.items()}
    return Workload(
        kind=CONV2D,
        params=tuple(params.items()),
        inputs=(TensorSpec("X", (ic, h, w), dtype), TensorSpec("W", (oc, ic, k, k), dtype)),
        output=TensorSpec("O", (oc, oh, ow), dtype),
        dtype=dtype,
        id=_format_id(CONV2D, params, dtype),
    )


# (H, W, IC, OC, K, S) for the conv2d layers of single-batch ResNet-18
RESNET18_CONV2D = [
    (224, 224, 3, 64, 7, 2),
    (56, 56, 64, 64, 3, 1),
    (56, 56, 64, 64, 1, 1),
    (56, 56, 64, 128, 3, 2),
    (56, 56, 64, 128, 1, 2),
    (28, 28, 128, 128, 3, 1),
    (28, 28, 128, 256, 3, 2),
    (28, 28, 128, 256, 1, 2),
    (14, 14, 256, 256, 3, 1),
    (14, 14, 256, 512, 3, 2),
    (14, 14, 256, 512, 1, 2),
    (7, 7, 512, 512, 3, 1),
]

# spatial and channel divisor used by ``suite:resnet18-small``
SMALL_SUITE_SCALE = 4


def resnet18_suite(scale: int = 1) -> list[Workload]:
    """The twelve ResNet-18 conv2d workloads C1..C12, optionally scaled down.

    ``scale`` divides H, W, IC and OC (floored at 1); kernel and stride are kept.
    """
    out = []
    for h, w, ic, oc, k, s in RESNET18_CONV2D:
        h, w = max(h // scale, k), max(w // scale, k)
        ic, oc = max(ic // scale, 1), max(oc // scale, 1)
        out.append(make_conv2d(h, w, ic, oc, k, s, k // 2))
    return out


def from_record(rec: dict) -> Workload:
    kind, p = rec["kind"], rec["params"]
    dtype = rec.get("dtype", "f32")
    if kind == MATMUL:
        w = make_matmul(p["N"], p["M"], p["K"], dtype)
    elif kind == CONV2D:
        w = make_conv2d(p["H"], p["W"], p["IC"], p["OC"], p["K"], p["S"], p["P"], dtype)
    else:
        raise ValueError(f"unknown workload kind {kind!r}")
    if "id" in rec and rec["id"] != w.id:
        raise ValueError(f"workload id {rec['id']!r} does not match params ({w.id!r})")
    return w


def from_line(line: str) -> Workload:
    return from_record(json.loads(line))


_ID_RE = {
    MATMUL: re.compile(r"^matmul-(\d+)x(\d+)x(\d+)(?:-(i32|f32))?$"),
    CONV2D: re.compile(r"^conv2d-(\d+)x(\d+)x(\d+)x(\d+)-k(\d+)s(\d+)p(\d+)(?:-(i32|f32))?$"),
}


def from_id(wid: str) -> Workload:
    m = _ID_RE[MATMUL].match(wid)
    if m:
        return make_matmul(*map(int, m.groups()[:3]), dtype=m.group(4) or "f32")
    m = _ID_RE[CONV2D].match(wid)
    if m:
        return make_conv2d(*map(int, m.groups()[:7]), dtype=m.group(8) or "f32")
    raise ValueError(f"unparseable workload id {wid!r}")


def make_inputs(w: Workload, seed: int = 0) -> list[np.ndarray]:
    """Deterministic input data, one fixed stream per (workload, tensor role)."""
    arrays = []
    for spec in w.inputs:
        key = zlib.crc32(f"{w.id}/{spec.name}/{seed}".encode())
        rng = np.random.default_rng(key)
        if spec.dtype == "i32":
            arrays.append(rng.integers(-8, 9, size=spec.shape).astype(np.int32))
        else:
            arrays.append(rng.uniform(-1.0, 1.0, size=spec.shape).astype(np.float32))
    return arrays


def check_inputs(w: Workload, inputs: Sequence[np.ndarray]) -> list[np.ndarray]:
    if len(inputs) != len(w.inputs):
        raise ValueError(f"{w.id} expects {len(w.inputs)} inputs, got {len(inputs)}")
    out = []
    for spec, arr in zip(w.inputs, inputs):
        arr = np.asarray(arr)
        if tuple(arr.shape) != tuple(spec.shape):
            raise ValueError(f"input {spec.name} has shape {arr.shape}, expected {spec.shape}")
        out.append(arr)
    return out


def store(acc: np.ndarray, dtype: str) -> np.ndarray:
    """Narrow a wide accumulator to the output dtype (i32 wraps on store)."""
    if dtype == "i32":
        return acc.astype(np.int64).astype(np.int32)
    return acc.astype(np.float32)


def reference_execute(w: Workload, inputs: Sequence[np.ndarray]) -> np.ndarray:
    """Evaluate the index expression in its natural reduction order."""
    acc_t = ACCUM_DTYPES[w.dtype]
    a, b = (x.astype(acc_t) for x in check_inputs(w, inputs))
    p = w.p
    if w.kind == MATMUL:
        c = np.zeros((p["N"], p["M"]), dtype=acc_t)
        for k in range(p["K"]):
            c += a[:, k, None] * b[None, k, :]
        return store(c, w.dtype)

    ksz, s, pad = p["K"], p["S"], p["P"]
    oc_n, oh_n, ow_n = w.output.shape
    x = np.pad(a, ((0, 0), (pad, pad), (pad, pad)))
    o = np.zeros((oc_n, oh_n, ow_n), dtype=acc_t)
    for ic in range(p["IC"]):
        for kh in range(ksz):
            for kw in range(ksz):
                window = x[ic, kh:kh + s * (oh_n - 1) + 1:s, kw:kw + s * (ow_n - 1) + 1:s]
                o += b[:, ic, kh, kw, None, None] * window[None, :, :]
    return store(o, w.dtype)
