"""Cross-workload transfer: a global model over invariant features plus a local residual.

The global model is trained on historical records from other workloads with the
relation representation, whose length and column meaning do not depend on the
operator or its config space. The local model is fitted on in-domain records with
the global score supplied as a base margin, so the combined score is simply the
sum of the two.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .features import RELATION, featurize_batch, featurize_configs
from .measure import Record
from .model import RANK, GBTModel, GBTParams, load, save, train
from .schedule import ConfigSpace, LoopNest, define_space
from .workload import Workload, from_id

DEFAULT_MAX_SAMPLES = 20000


@dataclass
class TransferModel:
    global_model: GBTModel
    local: GBTModel | None = None
    local_scheme: str = RELATION
    sources: list = field(default_factory=list)

    @property
    def scheme(self) -> str:
        return self.global_model.feature_scheme

    @property
    def objective(self) -> str:
        return self.global_model.objective


def records_matrix(records: Sequence[Record], scheme: str,
                   spaces: dict | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Feature matrix, costs and workload ids for the usable records, in input order."""
    by_wid = defaultdict(list)
    for pos, r in enumerate(records):
        if r.ok:
            by_wid[r.workload_id].append(pos)
    n = sum(len(v) for v in by_wid.values())
    X = None
    y = np.empty(n)
    wids = np.empty(n, dtype=object)
    keep = sorted(p for v in by_wid.values() for p in v)
    slot = {p: i for i, p in enumerate(keep)}
    spaces = {} if spaces is None else spaces
    for wid, positions in by_wid.items():
        w = from_id(wid)
        space = spaces.setdefault(wid, define_space(w))
        choices = np.array([records[p].entity.choices for p in positions], dtype=np.int64)
        F = featurize_configs(w, space, choices, scheme)
        if X is None:
            X = np.empty((n, F.shape[1]))
        elif F.shape[1] != X.shape[1]:
            raise ValueError(f"scheme {scheme!r} gives different lengths across workloads")
        rows = [slot[p] for p in positions]
        X[rows] = F
        y[rows] = [records[p].cost for p in positions]
        wids[rows] = wid
    if X is None:
        X = np.zeros((0, 0))
    return X, y, wids


def fit_global(history: Sequence[Record], scheme: str = RELATION, seed: int = 0, objective: str = RANK,
               params: GBTParams | None = None, max_samples: int = DEFAULT_MAX_SAMPLES) -> GBTModel:
    """Rank (or regression) model over historical records, pairs kept within a workload.

    Histories mixing operator kinds are accepted only with the relation scheme.
    """
    usable = [r for r in history if r.ok]
    if not usable:
        raise ValueError("fit_global needs a non-empty history")
    kinds = {from_id(r.workload_id).kind for r in usable}
    if len(kinds) > 1 and scheme != RELATION:
        raise ValueError(f"history mixes operators {sorted(kinds)}; only the {RELATION!r} scheme "
                         f"is comparable across them, got {scheme!r}")
    rng = np.random.default_rng(seed)
    if len(usable) > max_samples:
        pick = np.sort(rng.choice(len(usable), size=max_samples, replace=False))
        usable = [usable[i] for i in pick]
    X, y, wids = records_matrix(usable, scheme)
    model = train(X, y, objective, params, seed=seed, groups=wids, feature_scheme=scheme)
    model.meta["sources"] = sorted(set(wids.tolist()))
    model.meta["scheme"] = scheme
    return model


def new_transfer(global_model: GBTModel, local_scheme: str | None = None) -> TransferModel:
    return TransferModel(global_model, None, local_scheme or global_model.feature_scheme,
                         list(global_model.meta.get("sources", [])))


def fit_local(tm: TransferModel, in_domain: Sequence[Record], seed: int = 0,
              params: GBTParams | None = None) -> TransferModel:
    """Fit the local term against in-domain costs with the global score as base margin."""
    usable = [r for r in in_domain if r.ok]
    if not usable:
        raise ValueError("fit_local needs at least one in-domain record")
    Xg, y, wids = records_matrix(usable, tm.scheme)
    Xl = Xg if tm.local_scheme == tm.scheme else records_matrix(usable, tm.local_scheme)[0]
    margin = tm.global_model.raw_predict(Xg)
    local = train(Xl, y, tm.objective, params, seed=seed, groups=wids, base_margin=margin,
                  feature_scheme=tm.local_scheme)
    return TransferModel(tm.global_model, local, tm.local_scheme, tm.sources)


# both terms live on a fixed grid so their float64 sum and difference are exact
# (for magnitudes below 2**20), making the additive split hold bit for bit
QUANTUM = 2.0 ** -32


def _fixed(x: np.ndarray) -> np.ndarray:
    return np.round(x / QUANTUM) * QUANTUM


def predict_parts(tm: TransferModel, Xg: np.ndarray, Xl: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Global and local scores on the shared grid; the local part is zero before any local fit."""
    g = _fixed(tm.global_model.raw_predict(Xg))
    if tm.local is None:
        return g, np.zeros_like(g)
    return g, _fixed(tm.local.raw_predict(Xg if Xl is None else Xl))


def predict_transfer_features(tm: TransferModel, Xg: np.ndarray, Xl: np.ndarray | None = None) -> np.ndarray:
    g, loc = predict_parts(tm, Xg, Xl)
    return g + loc


def predict_transfer(tm: TransferModel, nests: Sequence[LoopNest]) -> np.ndarray:
    """Combined score ``global(x) + local(x)`` for lowered nests (lower is faster)."""
    if not nests:
        return np.zeros(0)
    Xg = featurize_batch(nests, tm.scheme)
    Xl = None
    if tm.local is not None and tm.local_scheme != tm.scheme:
        Xl = featurize_batch(nests, tm.local_scheme)
    return predict_transfer_features(tm, Xg, Xl)


def predict_transfer_configs(tm: TransferModel, w: Workload, space: ConfigSpace, choices: np.ndarray) -> np.ndarray:
    Xg = featurize_configs(w, space, choices, tm.scheme)
    Xl = None
    if tm.local is not None and tm.local_scheme != tm.scheme:
        Xl = featurize_configs(w, space, choices, tm.local_scheme)
    return predict_transfer_features(tm, Xg, Xl)


def save_global(model: GBTModel, path) -> None:
    save(model, path)


def load_global(path) -> GBTModel:
    model = load(path)
    if "scheme" not in model.meta:
        raise ValueError(f"{path} is not a global transfer checkpoint")
    return model
