"""Gradient-boosted regression trees with regression and pairwise-rank objectives.

Trees are grown level-wise with exact greedy splits over presorted feature
columns and second-order leaf weights ``-G / (H + lambda)``. Each tree is a
complete binary heap of depth ``max_depth`` stored as flat arrays, so a model is
a handful of ``(n_trees, n_nodes)`` matrices and prediction is a single numba
kernel. Ensembles of bootstrap members supply the spread used by UCB and EI.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numba
import numpy as np
from scipy.special import ndtr

REGRESSION, RANK = "regression", "rank"
OBJECTIVES = (REGRESSION, RANK)
MEAN, UCB, EI = "mean", "ucb", "ei"
ACQUISITIONS = (MEAN, UCB, EI)

CHECKPOINT_FORMAT = "loomtune-gbt/1"


@dataclass
class GBTParams:
    max_depth: int = 6
    eta: float = 0.1
    n_rounds: int = 400
    reg_lambda: float = 1.0
    min_child_weight: float = 1.0
    min_split_gain: float = 0.0
    early_stop: int = 50
    holdout: float = 0.2
    holdout_min_n: int = 200
    group_size: int = 64

    def __post_init__(self):
        if self.max_depth < 0 or self.n_rounds < 0:
            raise ValueError("max_depth and n_rounds must be non-negative")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")
        if self.group_size < 2:
            raise ValueError("rank groups need at least two samples")


# ---------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True)
def _grow_tree(X, order, grad, hess, rows_mask, max_depth, lam, mcw, min_gain,
               feat, thr, value, leaf):
    """Grow one tree into the heap arrays ``feat/thr/value/leaf`` (pre-zeroed).

    ``order[f]`` lists sample indices sorted by column ``f``; only samples with
    ``rows_mask`` set take part. Returns the leaf index of every sample.
    """
    n, nf = X.shape
    n_nodes = feat.shape[0]
    node_of = np.zeros(n, np.int64)
    for i in range(n):
        if not rows_mask[i]:
            node_of[i] = -1
    G = np.zeros(n_nodes)
    H = np.zeros(n_nodes)
    for i in range(n):
        if node_of[i] == 0:
            G[0] += grad[i]
            H[0] += hess[i]
    active = np.zeros(n_nodes, np.bool_)
    active[0] = True

    GL = np.zeros(n_nodes)
    HL = np.zeros(n_nodes)
    last = np.zeros(n_nodes)
    seen = np.zeros(n_nodes, np.bool_)
    best_gain = np.zeros(n_nodes)
    best_feat = np.full(n_nodes, -1, np.int64)
    best_thr = np.zeros(n_nodes)

    for depth in range(max_depth + 1):
        lo = (1 << depth) - 1
        hi = (1 << (depth + 1)) - 1
        any_active = False
        for j in range(lo, hi):
            if active[j]:
                any_active = True
        if not any_active:
            break
        if depth == max_depth:
            for j in range(lo, hi):
                if active[j]:
                    leaf[j] = True
                    value[j] = -G[j] / (H[j] + lam)
            break

        for j in range(lo, hi):
            best_gain[j] = min_gain
            best_feat[j] = -1
        for f in range(nf):
            for j in range(lo, hi):
                GL[j] = 0.0
                HL[j] = 0.0
                seen[j] = False
            col = order[f]
            for r in range(n):
                i = col[r]
                j = node_of[i]
                if j < lo or not active[j]:
                    continue
                x = X[i, f]
                if seen[j] and x > last[j]:
                    hl = HL[j]
                    hr = H[j] - hl
                    if hl >= mcw and hr >= mcw:
                        gl = GL[j]
                        gr = G[j] - gl
                        gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - G[j] * G[j] / (H[j] + lam)
                        if gain > best_gain[j]:
                            best_gain[j] = gain
                            best_feat[j] = f
                            t = 0.5 * (last[j] + x)
                            if not (t > last[j] and t < x):
                                t = x
                            best_thr[j] = t
                GL[j] += grad[i]
                HL[j] += hess[i]
                last[j] = x
                seen[j] = True

        for j in range(lo, hi):
            if not active[j]:
                continue
            if best_feat[j] < 0:
                leaf[j] = True
                value[j] = -G[j] / (H[j] + lam)
                active[j] = False
            else:
                feat[j] = best_feat[j]
                thr[j] = best_thr[j]
                active[2 * j + 1] = True
                active[2 * j + 2] = True
                active[j] = False
        for i in range(n):
            j = node_of[i]
            if j < lo or j >= hi or leaf[j]:
                continue
            c = 2 * j + 1 if X[i, feat[j]] < thr[j] else 2 * j + 2
            node_of[i] = c
            G[c] += grad[i]
            H[c] += hess[i]
    return node_of


@numba.njit(cache=True)
def _predict_trees(X, feat, thr, value, leaf, n_trees, eta, base, out):
    n = X.shape[0]
    for i in range(n):
        s = 0.0
        for t in range(n_trees):
            j = 0
            while not leaf[t, j]:
                if X[i, feat[t, j]] < thr[t, j]:
                    j = 2 * j + 1
                else:
                    j = 2 * j + 2
            s += value[t, j]
        out[i] = base + eta * s


@numba.njit(cache=True)
def _rank_grad(pred, labels, groups, grad, hess):
    """Pairwise logistic gradients over all pairs inside each index group.

    ``groups`` is a list of index arrays. Each pair is weighted by 1/(m-1) for a
    group of m so a sample's total weight does not grow with the group size.
    Returns the summed (unweighted) pair loss.
    """
    loss = 0.0
    for g in groups:
        m = g.shape[0]
        wt = 1.0 / max(m - 1, 1)
        for a in range(m):
            i = g[a]
            for b in range(a + 1, m):
                j = g[b]
                dc = labels[i] - labels[j]
                if dc == 0.0:
                    continue
                s = 1.0 if dc > 0 else -1.0
                z = -s * (pred[i] - pred[j])
                # sigma(z) and log(1 + e^z) without overflow
                if z >= 0:
                    e = math.exp(-z)
                    p = 1.0 / (1.0 + e)
                    loss += z + math.log1p(e)
                else:
                    e = math.exp(z)
                    p = e / (1.0 + e)
                    loss += math.log1p(e)
                h = wt * p * (1.0 - p)
                p *= wt
                grad[i] += -s * p
                grad[j] += s * p
                hess[i] += h
                hess[j] += h
    return loss


def rank_loss(costs: Sequence[float], scores: Sequence[float]) -> float:
    """Pairwise logistic rank loss summed over unordered pairs (tied costs add log 2)."""
    c = np.asarray(costs, dtype=np.float64)
    f = np.asarray(scores, dtype=np.float64)
    if c.shape != f.shape:
        raise ValueError("costs and scores must have equal length")
    total = 0.0
    for i in range(len(c)):
        for j in range(i + 1, len(c)):
            z = -np.sign(c[i] - c[j]) * (f[i] - f[j])
            total += float(np.logaddexp(0.0, z))
    return total


# ---------------------------------------------------------------------------
# model


@dataclass
class RegressionTree:
    """One tree in heap layout: node ``j`` has children ``2j+1`` (x < thr) and ``2j+2``."""
    feature: np.ndarray
    threshold: np.ndarray
    value: np.ndarray
    is_leaf: np.ndarray

    @property
    def depth(self) -> int:
        idx = np.flatnonzero(self.is_leaf)
        return int(np.floor(np.log2(idx.max() + 1))) if idx.size else 0

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = np.empty(len(X))
        _predict_trees(X, self.feature[None], self.threshold[None], self.value[None],
                       self.is_leaf[None], 1, 1.0, 0.0, out)
        return out


@dataclass
class GBTModel:
    objective: str
    params: GBTParams
    n_features: int
    base_score: float = 0.0
    feature_scheme: str = ""
    feature: np.ndarray = field(default_factory=lambda: np.zeros((0, 1), np.int64))
    threshold: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))
    value: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))
    is_leaf: np.ndarray = field(default_factory=lambda: np.zeros((0, 1), np.bool_))
    data_digest: str = ""
    train_loss: list = field(default_factory=list)
    valid_loss: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def n_trees(self) -> int:
        return int(self.feature.shape[0])

    @property
    def trees(self) -> list[RegressionTree]:
        return [RegressionTree(self.feature[t], self.threshold[t], self.value[t], self.is_leaf[t])
                for t in range(self.n_trees)]

    def raw_predict(self, X) -> np.ndarray:
        X = _as_matrix(X, self.n_features)
        out = np.empty(len(X))
        if len(X):
            _predict_trees(X, self.feature, self.threshold, self.value, self.is_leaf,
                           self.n_trees, self.params.eta, self.base_score, out)
        return out

    def predict(self, X) -> np.ndarray:
        """Scores with lower meaning faster: label-space cost for regression,
        a relative score for rank."""
        raw = self.raw_predict(X)
        return np.expm1(raw) if self.objective == REGRESSION else raw

    def structure(self) -> tuple:
        """Hashable tree structure (split features and thresholds) for comparisons."""
        return (self.feature.tobytes(), self.threshold.tobytes(), self.is_leaf.tobytes())

    def to_record(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "objective": self.objective,
            "params": asdict(self.params),
            "n_features": self.n_features,
            "base_score": self.base_score,
            "feature_scheme": self.feature_scheme,
            "data_digest": self.data_digest,
            "meta": self.meta,
            "trees": [
                {"feature": t.feature.tolist(), "threshold": t.threshold.tolist(),
                 "value": t.value.tolist(), "is_leaf": t.is_leaf.astype(int).tolist()}
                for t in self.trees
            ],
        }

    @classmethod
    def from_record(cls, d: dict) -> "GBTModel":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a model checkpoint (format {d.get('format')!r})")
        params = GBTParams(**d["params"])
        n_nodes = (1 << (params.max_depth + 1)) - 1
        trees = d["trees"]

        def stack(key, dtype):
            if not trees:
                return np.zeros((0, n_nodes), dtype)
            return np.array([t[key] for t in trees], dtype=dtype)

        return cls(objective=d["objective"], params=params, n_features=int(d["n_features"]),
                   base_score=float(d["base_score"]), feature_scheme=d.get("feature_scheme", ""),
                   feature=stack("feature", np.int64), threshold=stack("threshold", np.float64),
                   value=stack("value", np.float64), is_leaf=stack("is_leaf", np.bool_),
                   data_digest=d.get("data_digest", ""), meta=d.get("meta", {}))


def _as_matrix(X, n_features: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(0 if X.size == 0 else 1, -1) if X.size == 0 else X[None, :]
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got shape {X.shape}")
    if n_features is not None and len(X) and X.shape[1] != n_features:
        raise ValueError(f"feature length {X.shape[1]} does not match model ({n_features})")
    return X


def data_digest(X: np.ndarray, y: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(X, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(y, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


def _partition(idx: np.ndarray, group_ids: np.ndarray | None, size: int, rng) -> list[np.ndarray]:
    """Random partition of ``idx`` into chunks of ``size``, never mixing group ids."""
    out = []
    if group_ids is None:
        buckets = [idx]
    else:
        g = group_ids[idx]
        buckets = [idx[g == u] for u in np.unique(g)]
    for b in buckets:
        p = b[rng.permutation(len(b))] if rng is not None else b
        out.extend(p[s:s + size] for s in range(0, len(p), size) if len(p[s:s + size]) > 1)
    return out


def train(X, costs, objective: str = RANK, params: GBTParams | None = None, seed: int = 0,
          groups: Sequence | None = None, base_margin: np.ndarray | None = None,
          feature_scheme: str = "") -> GBTModel:
    """Fit a boosted ensemble of depth-limited trees.

    Regression fits ``log1p(cost)`` under squared loss starting from the mean.
    Rank fits the pairwise logistic loss over all pairs inside random groups of
    ``params.group_size`` samples, redrawn every round; ``groups`` keeps pairs
    within one label (e.g. workload id). ``base_margin`` is added to the raw
    score while computing gradients but is not part of the returned model.
    """
    params = params or GBTParams()
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    X = _as_matrix(X)
    y = np.asarray(costs, dtype=np.float64)
    n, nf = X.shape
    if n == 0:
        raise ValueError("cannot train on empty data")
    if len(y) != n:
        raise ValueError("features and costs differ in length")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain NaN or infinite values")
    if not np.all(np.isfinite(y)) or np.any(y <= 0):
        raise ValueError("costs must be finite and positive")
    group_ids = None if groups is None else np.asarray(groups)
    margin = np.zeros(n) if base_margin is None else np.asarray(base_margin, dtype=np.float64)

    labels = np.log1p(y) if objective == REGRESSION else y
    base = float(labels.mean()) if objective == REGRESSION else 0.0
    rng = np.random.default_rng(seed)

    # holdout split for early stopping
    train_mask = np.ones(n, np.bool_)
    if params.early_stop > 0 and n >= params.holdout_min_n and params.holdout > 0:
        n_val = int(round(params.holdout * n))
        train_mask[rng.permutation(n)[:n_val]] = False
    valid_idx = np.flatnonzero(~train_mask)
    train_idx = np.flatnonzero(train_mask)
    valid_groups = None
    if objective == RANK and len(valid_idx):
        chunks = _partition(valid_idx, group_ids, params.group_size, rng)
        if chunks:
            valid_groups = numba.typed.List(chunks)
        else:
            train_mask[:] = True
            valid_idx = valid_idx[:0]
            train_idx = np.arange(n)

    # constant columns cannot split; skip them
    live = np.flatnonzero(X[train_idx].max(axis=0) > X[train_idx].min(axis=0)) if n else np.zeros(0, int)
    Xl = np.ascontiguousarray(X[:, live])
    order = np.ascontiguousarray(np.argsort(Xl, axis=0, kind="stable").T)

    n_nodes = (1 << (params.max_depth + 1)) - 1
    feats, thrs, vals, leafs = [], [], [], []
    pred = np.full(n, base) + margin
    grad, hess = np.zeros(n), np.zeros(n)
    model = GBTModel(objective=objective, params=params, n_features=nf, base_score=base,
                     feature_scheme=feature_scheme, data_digest=data_digest(X, y))
    best_val, best_round, since = np.inf, 0, 0

    def val_loss(p):
        if objective == REGRESSION:
            r = p[valid_idx] - labels[valid_idx]
            return float(np.mean(r * r))
        g, h = np.zeros(n), np.zeros(n)
        return _rank_grad(p, labels, valid_groups, g, h)

    for rnd in range(params.n_rounds):
        grad[:] = 0.0
        hess[:] = 0.0
        if objective == REGRESSION:
            grad[train_idx] = pred[train_idx] - labels[train_idx]
            hess[train_idx] = 1.0
            r = grad[train_idx]
            model.train_loss.append(float(np.mean(r * r)))
        else:
            chunks = numba.typed.List(_partition(train_idx, group_ids, params.group_size, rng))
            if len(chunks) == 0:
                break
            model.train_loss.append(_rank_grad(pred, labels, chunks, grad, hess))
        f = np.zeros(n_nodes, np.int64)
        t = np.zeros(n_nodes)
        v = np.zeros(n_nodes)
        lf = np.zeros(n_nodes, np.bool_)
        if Xl.shape[1] == 0:
            lf[0] = True
            G, Hs = grad[train_idx].sum(), hess[train_idx].sum()
            v[0] = -G / (Hs + params.reg_lambda)
            node_of = np.where(train_mask, 0, -1)
        else:
            node_of = _grow_tree(Xl, order, grad, hess, train_mask, params.max_depth,
                                 params.reg_lambda, params.min_child_weight, params.min_split_gain,
                                 f, t, v, lf)
        f = np.where(lf, 0, live[f] if len(live) else f)
        feats.append(f)
        thrs.append(t)
        vals.append(v)
        leafs.append(lf)
        # update predictions for all samples, including the holdout
        step = np.empty(n)
        _predict_trees(X, f[None], t[None], v[None], lf[None], 1, 1.0, 0.0, step)
        pred += params.eta * step

        if len(valid_idx):
            vl = val_loss(pred)
            model.valid_loss.append(vl)
            if vl < best_val - 1e-12:
                best_val, best_round, since = vl, rnd + 1, 0
            else:
                since += 1
                if since >= params.early_stop:
                    break
        else:
            best_round = rnd + 1

    keep = best_round if len(valid_idx) else len(feats)
    if keep and feats:
        model.feature = np.array(feats[:keep])
        model.threshold = np.array(thrs[:keep])
        model.value = np.array(vals[:keep])
        model.is_leaf = np.array(leafs[:keep])
    else:
        model.feature = np.zeros((0, n_nodes), np.int64)
        model.threshold = np.zeros((0, n_nodes))
        model.value = np.zeros((0, n_nodes))
        model.is_leaf = np.zeros((0, n_nodes), np.bool_)
    model.meta["best_round"] = keep
    return model


def predict_batch(model, X) -> np.ndarray:
    """Batch prediction; an empty batch gives an empty array."""
    X = np.asarray(X, dtype=np.float64)
    if X.size == 0:
        return np.zeros(0)
    return model.predict(X)


def save(model: GBTModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_record()))


def load(path) -> GBTModel:
    return GBTModel.from_record(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# ensembles and acquisition


@dataclass
class EnsembleModel:
    members: list
    acquisition: str = MEAN
    kappa: float = 1.0

    def __post_init__(self):
        if self.acquisition not in ACQUISITIONS:
            raise ValueError(f"unknown acquisition {self.acquisition!r}")
        if not self.members:
            raise ValueError("ensemble needs at least one member")

    @property
    def objective(self) -> str:
        return self.members[0].objective

    def member_predictions(self, X) -> np.ndarray:
        return np.stack([m.predict(X) for m in self.members])

    def predict(self, X) -> np.ndarray:
        return self.member_predictions(X).mean(axis=0)

    def mean_std(self, X) -> tuple[np.ndarray, np.ndarray]:
        P = self.member_predictions(X)
        sd = P.std(axis=0, ddof=1) if len(P) > 1 else np.zeros(P.shape[1])
        # agreeing members give exactly zero spread, not rounding noise
        sd[np.ptp(P, axis=0) == 0] = 0.0
        return P.mean(axis=0), sd


def train_ensemble(X, costs, objective: str = RANK, params: GBTParams | None = None, seed: int = 0,
                   n_members: int = 5, acquisition: str = MEAN, kappa: float = 1.0,
                   groups: Sequence | None = None, feature_scheme: str = "") -> EnsembleModel:
    """Members are trained on bootstrap resamples drawn with seeds derived from ``seed``."""
    X = _as_matrix(X)
    y = np.asarray(costs, dtype=np.float64)
    g = None if groups is None else np.asarray(groups)
    rng = np.random.default_rng(seed)
    members = []
    for k in range(n_members):
        idx = rng.integers(0, len(y), size=len(y))
        members.append(train(X[idx], y[idx], objective, params, seed=seed * 1000 + k,
                             groups=None if g is None else g[idx], feature_scheme=feature_scheme))
    return EnsembleModel(members, acquisition, kappa)


def expected_improvement(mu, sigma, best: float) -> np.ndarray:
    """Expected amount by which a normal(mu, sigma) draw falls below ``best``."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    gap = best - mu
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, gap / sigma, 0.0)
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    ei = gap * ndtr(z) + sigma * pdf
    return np.where(sigma > 0, np.maximum(ei, 0.0), np.maximum(gap, 0.0))


def acquire(ens, X, acquisition: str | None = None, kappa: float | None = None,
            best: float | None = None) -> np.ndarray:
    """Acquisition energies, lower is better.

    ``mean`` is the member average, ``ucb`` is ``mu - kappa * sigma`` and ``ei``
    is the negated expected improvement below ``best`` (defaults to the lowest
    mean in ``X``). A single model is treated as a one-member ensemble.
    """
    if isinstance(ens, GBTModel):
        ens = EnsembleModel([ens])
    kind = acquisition or ens.acquisition
    kappa = ens.kappa if kappa is None else kappa
    if kind not in ACQUISITIONS:
        raise ValueError(f"unknown acquisition {kind!r}")
    if kind != MEAN and len(ens.members) < 2:
        raise ValueError(f"{kind} needs an ensemble of at least two members")
    X = np.asarray(X, dtype=np.float64)
    if X.size == 0:
        return np.zeros(0)
    mu, sd = ens.mean_std(X)
    if kind == MEAN:
        return mu
    if kind == UCB:
        return mu - kappa * sd
    if best is None:
        best = float(mu.min())
    return -expected_improvement(mu, sd, best)
