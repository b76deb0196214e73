"""Loop-context features, context relation features and flat feature vectors.

Per loop ``k`` (outermost first) the context row holds the loop length, a one-hot
annotation, the top-down product (strictly outer loops), the bottom-up product
(this loop and everything inside it) and, for every buffer, its touch count,
reuse ratio (bottom-up / touch count) and stride.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .schedule import (ANNOTATIONS, ANN_PARALLEL, ANN_UNROLL, ANN_VECTORIZE, ConfigEntity, ConfigSpace,
                       LoopNest, NestBatch)

MAX_LOOPS = 16
MAX_BUFFERS = 4
N_THRESHOLDS = 20
THRESHOLDS = 2.0 ** np.arange(1, N_THRESHOLDS + 1)

FLAT_CONTEXT, RELATION, CONFIG_KNOBS, COMBINED = "FlatContext", "Relation", "ConfigKnobs", "Combined"
SCHEMES = (FLAT_CONTEXT, RELATION, CONFIG_KNOBS, COMBINED)

BUFFER_FIELDS = ("touch", "reuse", "stride")
COLUMNS = (
    ["length"] + [f"ann_{a}" for a in ANNOTATIONS] + ["top_down", "bottom_up"]
    + [f"b{b}_{f}" for b in range(MAX_BUFFERS) for f in BUFFER_FIELDS]
)
N_COLUMNS = len(COLUMNS)
_ONE_HOT = np.array([c.startswith("ann_") for c in COLUMNS])
_ANN_COL = {a: 1 + i for i, a in enumerate(ANNOTATIONS)}
TOP_DOWN, BOTTOM_UP = COLUMNS.index("top_down"), COLUMNS.index("bottom_up")


def col(buffer: int, field: str) -> int:
    return 7 + 3 * buffer + BUFFER_FIELDS.index(field)


# (paired column, threshold column) per buffer: touch count vs reuse ratio, touch count vs top-down
RELATION_PAIRS = tuple(
    pair for b in range(MAX_BUFFERS)
    for pair in ((col(b, "reuse"), col(b, "touch")), (TOP_DOWN, col(b, "touch")))
)
N_NEST_SCALARS = 1 + MAX_BUFFERS + 3
RELATION_LENGTH = len(RELATION_PAIRS) * N_THRESHOLDS + N_NEST_SCALARS
FLAT_LENGTH = MAX_LOOPS * N_COLUMNS


@dataclass(frozen=True)
class ContextMatrix:
    Z: np.ndarray
    columns: tuple[str, ...] = tuple(COLUMNS)
    n_buffers: int = 0


@dataclass(frozen=True)
class RelationFeatures:
    R: np.ndarray  # (pair, threshold)
    thresholds: np.ndarray
    pairs: tuple[tuple[int, int], ...] = RELATION_PAIRS


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    scheme: str


def _rows(nest: LoopNest) -> tuple[list[list[float]], int]:
    loops = nest.loops()
    accs = nest.compute.accesses
    if len(accs) > MAX_BUFFERS:
        raise ValueError(f"nest touches {len(accs)} buffers, at most {MAX_BUFFERS} supported")
    n = len(loops)
    ext = [lp.extent for lp in loops]
    strides = [[a.stride(lp.var) for a in accs] for lp in loops]

    bottom = [1] * (n + 1)
    for k in range(n - 1, -1, -1):
        bottom[k] = bottom[k + 1] * ext[k]
    touch = [[1] * len(accs) for _ in range(n + 1)]
    for k in range(n - 1, -1, -1):
        touch[k] = [t * ext[k] if s else t for t, s in zip(touch[k + 1], strides[k])]

    rows = []
    top = 1
    for k, lp in enumerate(loops):
        row = [0.0] * N_COLUMNS
        row[0] = ext[k]
        row[_ANN_COL[lp.annotation]] = 1.0
        row[TOP_DOWN] = top
        row[BOTTOM_UP] = bottom[k]
        for b in range(len(accs)):
            t = touch[k][b]
            base = 7 + 3 * b
            row[base] = t
            row[base + 1] = bottom[k] / t
            row[base + 2] = abs(strides[k][b])
        rows.append(row)
        top *= ext[k]
    return rows, len(accs)


def context_matrix(nest: LoopNest) -> ContextMatrix:
    rows, nb = _rows(nest)
    Z = np.array(rows, dtype=np.float64).reshape(len(rows), N_COLUMNS)
    return ContextMatrix(Z, tuple(COLUMNS), nb)


def relation_values(Z: np.ndarray, pairs: Sequence[tuple[int, int]], thresholds: np.ndarray) -> np.ndarray:
    """``R[p, t] = max{Z[k, i] : Z[k, j] < thresholds[t]}`` with 0 for an empty set."""
    out = np.zeros((len(pairs), len(thresholds)))
    if Z.shape[0] == 0:
        return out
    for p, (i, j) in enumerate(pairs):
        mask = Z[:, j, None] < thresholds[None, :]
        vals = np.where(mask, Z[:, i, None], -np.inf).max(axis=0)
        out[p] = np.where(np.isfinite(vals), vals, 0.0)
    return out


def relation_features(cm: ContextMatrix) -> RelationFeatures:
    R = relation_values(cm.Z, RELATION_PAIRS, THRESHOLDS)
    # pairs on absent buffer slots stay zero
    for p, (_, j) in enumerate(RELATION_PAIRS):
        if (j - 7) // 3 >= cm.n_buffers:
            R[p] = 0.0
    return RelationFeatures(R, THRESHOLDS.copy())


def _log(x):
    return np.log2(1.0 + np.asarray(x, dtype=np.float64))


def flat_context(cm: ContextMatrix) -> np.ndarray:
    Z = cm.Z[:MAX_LOOPS]
    out = np.zeros((MAX_LOOPS, N_COLUMNS))
    out[: Z.shape[0]] = np.where(_ONE_HOT, Z, _log(Z))
    return out.ravel()


def nest_scalars(nest: LoopNest, cm: ContextMatrix) -> np.ndarray:
    loops = nest.loops()
    out = np.zeros(N_NEST_SCALARS)
    out[0] = nest.iteration_count
    if loops:
        for b in range(cm.n_buffers):
            out[1 + b] = cm.Z[0, col(b, "touch")]
    vec = unrolled = parallel = 0
    for lp in loops:
        if lp.annotation == ANN_VECTORIZE:
            vec = lp.extent
        elif lp.annotation == ANN_UNROLL:
            unrolled = max(unrolled, 1) * lp.extent
        elif lp.annotation == ANN_PARALLEL:
            parallel = lp.extent
    out[1 + MAX_BUFFERS:] = (vec, unrolled, parallel)
    return out


def relation_vector(nest: LoopNest, cm: ContextMatrix | None = None) -> np.ndarray:
    cm = context_matrix(nest) if cm is None else cm
    rf = relation_features(cm)
    return np.concatenate([_log(rf.R).ravel(), _log(nest_scalars(nest, cm))])


def knob_vector(space: ConfigSpace, ce: ConfigEntity) -> np.ndarray:
    space.check(ce)
    dims = np.array(space.dims, dtype=np.float64)
    return np.array(ce.choices, dtype=np.float64) / np.maximum(dims - 1, 1)


def scheme_length(scheme: str, space: ConfigSpace | None = None) -> int:
    if scheme == FLAT_CONTEXT:
        return FLAT_LENGTH
    if scheme == RELATION:
        return RELATION_LENGTH
    if scheme == COMBINED:
        return FLAT_LENGTH + RELATION_LENGTH
    if scheme == CONFIG_KNOBS:
        if space is None:
            raise ValueError("ConfigKnobs length depends on the config space")
        return len(space.knobs)
    raise ValueError(f"unknown feature scheme {scheme!r}")


def featurize(source, scheme: str = FLAT_CONTEXT, space: ConfigSpace | None = None) -> FeatureVector:
    """Feature vector of a lowered nest, or of a ConfigEntity for ``ConfigKnobs``."""
    if scheme == CONFIG_KNOBS:
        if not isinstance(source, ConfigEntity) or space is None:
            raise ValueError("ConfigKnobs needs a ConfigEntity and its ConfigSpace")
        return FeatureVector(knob_vector(space, source), scheme)
    if not isinstance(source, LoopNest):
        raise ValueError(f"scheme {scheme!r} featurizes a LoopNest, got {type(source).__name__}")
    cm = context_matrix(source)
    if scheme == FLAT_CONTEXT:
        vals = flat_context(cm)
    elif scheme == RELATION:
        vals = relation_vector(source, cm)
    elif scheme == COMBINED:
        vals = np.concatenate([flat_context(cm), relation_vector(source, cm)])
    else:
        raise ValueError(f"unknown feature scheme {scheme!r}")
    return FeatureVector(vals, scheme)


def featurize_batch(sources: Sequence, scheme: str = FLAT_CONTEXT,
                    space: ConfigSpace | None = None) -> np.ndarray:
    n = len(sources)
    out = np.empty((n, scheme_length(scheme, space)))
    for r, s in enumerate(sources):
        out[r] = featurize(s, scheme, space).values
    return out


# ---------------------------------------------------------------------------
# batched path over NestBatch arrays; agrees with the per-nest functions above


def context_batch(batch: NestBatch) -> np.ndarray:
    """Context matrices for a batch, shape (B, L, N_COLUMNS); padding rows are zero."""
    B, L = batch.ext.shape
    nb = batch.strides.shape[2]
    ext = batch.ext.astype(np.float64)
    Z = np.zeros((B, L, N_COLUMNS))
    Z[:, :, 0] = ext
    Z[np.arange(B)[:, None], np.arange(L)[None, :], 1 + batch.ann] = 1.0
    Z[:, :, TOP_DOWN] = np.cumprod(np.concatenate([np.ones((B, 1)), ext[:, :-1]], axis=1), axis=1)
    bottom = np.cumprod(ext[:, ::-1], axis=1)[:, ::-1]
    Z[:, :, BOTTOM_UP] = bottom
    for b in range(nb):
        te = np.where(batch.strides[:, :, b] != 0, ext, 1.0)
        touch = np.cumprod(te[:, ::-1], axis=1)[:, ::-1]
        base = 7 + 3 * b
        Z[:, :, base] = touch
        Z[:, :, base + 1] = bottom / touch
        Z[:, :, base + 2] = np.abs(batch.strides[:, :, b])
    Z[~batch.valid] = 0.0
    return Z


def flat_context_batch(Z: np.ndarray) -> np.ndarray:
    B, L, _ = Z.shape
    out = np.zeros((B, MAX_LOOPS, N_COLUMNS))
    k = min(L, MAX_LOOPS)
    out[:, :k] = np.where(_ONE_HOT, Z[:, :k], _log(Z[:, :k]))
    return out.reshape(B, -1)


def relation_batch(Z: np.ndarray, batch: NestBatch) -> np.ndarray:
    B = Z.shape[0]
    nb = batch.strides.shape[2]
    valid = batch.valid[:, :, None]
    R = np.zeros((B, len(RELATION_PAIRS), N_THRESHOLDS))
    for p, (i, j) in enumerate(RELATION_PAIRS):
        if (j - 7) // 3 >= nb:
            continue
        mask = (Z[:, :, j, None] < THRESHOLDS[None, None, :]) & valid
        R[:, p] = np.where(mask, Z[:, :, i, None], 0.0).max(axis=1)
    scal = np.zeros((B, N_NEST_SCALARS))
    scal[:, 0] = np.prod(batch.ext.astype(np.float64), axis=1)
    for b in range(nb):
        scal[:, 1 + b] = np.where(batch.valid[:, 0], Z[:, 0, col(b, "touch")], 0.0)
    ext = batch.ext.astype(np.float64)
    ann = batch.ann
    vec_code, unr_code, par_code = (ANNOTATIONS.index(a) for a in (ANN_VECTORIZE, ANN_UNROLL, ANN_PARALLEL))
    scal[:, 1 + MAX_BUFFERS] = np.where(ann == vec_code, ext, 0.0).max(axis=1)
    unr = ann == unr_code
    scal[:, 2 + MAX_BUFFERS] = np.where(unr.any(axis=1), np.prod(np.where(unr, ext, 1.0), axis=1), 0.0)
    scal[:, 3 + MAX_BUFFERS] = np.where(ann == par_code, ext, 0.0).max(axis=1)
    return np.concatenate([_log(R).reshape(B, -1), _log(scal)], axis=1)


def featurize_nest_batch(batch: NestBatch, scheme: str) -> np.ndarray:
    Z = context_batch(batch)
    if scheme == FLAT_CONTEXT:
        return flat_context_batch(Z)
    if scheme == RELATION:
        return relation_batch(Z, batch)
    if scheme == COMBINED:
        return np.concatenate([flat_context_batch(Z), relation_batch(Z, batch)], axis=1)
    raise ValueError(f"scheme {scheme!r} is not defined on loop nests")


def featurize_configs(w, space: ConfigSpace, choices: np.ndarray, scheme: str) -> np.ndarray:
    """Feature matrix for rows of a choice matrix, any scheme."""
    from .schedule import lower_batch

    choices = np.atleast_2d(np.asarray(choices, dtype=np.int64))
    if scheme == CONFIG_KNOBS:
        dims = np.array(space.dims, dtype=np.float64)
        return choices / np.maximum(dims - 1, 1)
    return featurize_nest_batch(lower_batch(w, space, choices), scheme)
