"""Model-guided search over a config space.

Each round advances a set of persistent simulated-annealing chains under the
current cost model, keeps the best distinct unmeasured configs they visited,
picks a batch that trades predicted cost against knob-value coverage, tops it up
with uniformly random configs, measures the batch and retrains the model.
Random search and a genetic algorithm share the same loop as baselines.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .features import FLAT_CONTEXT, featurize_configs
from .measure import Record
from .model import MEAN, RANK, EnsembleModel, GBTModel, GBTParams, acquire, train, train_ensemble
from .schedule import ConfigEntity, ConfigSpace, define_space, neighbors
from .transfer import TransferModel, fit_local, new_transfer, predict_transfer_configs
from .workload import Workload

log = logging.getLogger(__name__)

MODEL_GBT, RANDOM, GA = "model-gbt", "random", "ga"
STRATEGIES = (MODEL_GBT, RANDOM, GA)

Scorer = Callable[[np.ndarray], np.ndarray]


@dataclass
class TunerOptions:
    b: int = 64
    max_n_trials: int = 1000
    epsilon: float = 0.05
    lam: float = 2.0
    alpha: float = 0.1
    n_sa: int = 128
    step_sa: int = 500
    t0: float = 1.0
    t_min: float = 0.05
    strategy: str = MODEL_GBT
    objective: str = RANK
    acquisition: str = MEAN
    kappa: float = 1.0
    n_members: int | None = None
    scheme: str = FLAT_CONTEXT
    gbt: GBTParams = field(default_factory=GBTParams)
    ga_population: int = 128
    ga_mutation: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.gbt, dict):
            self.gbt = GBTParams(**self.gbt)
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.lam < 1:
            raise ValueError(f"lambda must be at least 1, got {self.lam}")
        if self.b < 1:
            raise ValueError(f"batch size must be positive, got {self.b}")
        if self.max_n_trials < 1:
            raise ValueError("budget must be positive")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")

    @property
    def members(self) -> int:
        if self.n_members is not None:
            return self.n_members
        return 1 if self.acquisition == MEAN else 5

    def to_record(self) -> dict:
        return asdict(self)


@dataclass
class TunerState:
    workload: Workload
    space: ConfigSpace
    chains: np.ndarray
    rng: np.random.Generator
    records: list = field(default_factory=list)
    measured: set = field(default_factory=set)
    model: object = None
    best: tuple = (None, math.inf)
    n_trials: int = 0
    trace: list = field(default_factory=list)

    @property
    def best_entity(self) -> ConfigEntity | None:
        return self.best[0]

    @property
    def best_cost(self) -> float:
        return self.best[1]

    @property
    def unmeasured(self) -> int:
        return self.space.size - len(self.measured)


def new_state(w: Workload, options: TunerOptions, space: ConfigSpace | None = None) -> TunerState:
    space = define_space(w) if space is None else space
    rng = np.random.default_rng(options.seed)
    chains = random_choices(space, options.n_sa, rng)
    return TunerState(w, space, chains, rng)


def random_choices(space: ConfigSpace, n: int, rng: np.random.Generator) -> np.ndarray:
    return np.stack([rng.integers(0, r, size=n) for r in space.radix], axis=1).astype(np.int64)


def sample_unmeasured(space: ConfigSpace, k: int, exclude: set, rng: np.random.Generator) -> list[int]:
    """Up to ``k`` distinct flat indices drawn uniformly from outside ``exclude``."""
    left = space.size - len(exclude)
    if k <= 0 or left <= 0:
        return []
    if left <= max(4 * k, 4096) and space.size <= 1 << 22:
        rest = np.setdiff1d(np.arange(space.size), np.fromiter(exclude, np.int64, len(exclude)))
        return [int(i) for i in rng.permutation(rest)[:k]]
    out, taken = [], set()
    while len(out) < k:
        i = int(rng.integers(space.size))
        if i not in exclude and i not in taken:
            taken.add(i)
            out.append(i)
    return out


# ---------------------------------------------------------------------------
# simulated annealing


def sa_collect(state: TunerState, scorer: Scorer | None, options: TunerOptions) -> list[tuple[ConfigEntity, float]]:
    """Advance the persistent chains and return the best distinct unmeasured configs seen.

    ``scorer`` maps a choice matrix to energies (lower is better); ``None`` is the
    cold start, where every config has equal energy and the chains random-walk.
    Each step divides energy differences by the current spread of the chain
    energies, so the temperature schedule is scale free and keeps working as the
    chains tighten around a basin.
    """
    space, rng, chains = state.space, state.rng, state.chains
    n = chains.shape[0]
    score = scorer if scorer is not None else (lambda c: np.zeros(len(c)))
    E = score(chains)
    scale = 1.0
    seen_idx = [space.choices_to_indices(chains)]
    seen_E = [E.copy()]
    steps = max(options.step_sa, 1)
    for k in range(options.step_sa):
        T = options.t0 * (options.t_min / options.t0) ** (k / max(steps - 1, 1))
        prop = neighbors(space, chains, rng)
        Ep = score(prop)
        sd = float(E.std())
        scale = sd if sd > 0 else scale
        dE = (Ep - E) / scale
        u = rng.random(n)
        with np.errstate(over="ignore"):
            accept = (dE <= 0) | (u < np.exp(-dE / T))
        chains[accept] = prop[accept]
        E[accept] = Ep[accept]
        seen_idx.append(space.choices_to_indices(prop))
        seen_E.append(Ep)

    idx = np.concatenate(seen_idx)
    en = np.concatenate(seen_E)
    uniq, inv = np.unique(idx, return_inverse=True)
    e_u = np.full(len(uniq), np.inf)
    np.minimum.at(e_u, inv, en)
    # tree models predict flat plateaus; break energy ties at random, not by index
    order = np.lexsort((rng.random(len(uniq)), e_u))
    want = int(math.ceil(options.lam * options.b))
    out = []
    for p in order:
        i = int(uniq[p])
        if i in state.measured:
            continue
        out.append((space.index_to_entity(i), float(e_u[p])))
        if len(out) >= want:
            break
    return out


# ---------------------------------------------------------------------------
# diversity-aware batch selection


def coverage(choices: np.ndarray) -> int:
    """Number of distinct values per knob, summed over knobs."""
    choices = np.asarray(choices)
    if choices.size == 0:
        return 0
    return int(sum(len(np.unique(choices[:, j])) for j in range(choices.shape[1])))


def standardize(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return scores
    sd = scores.std()
    return (scores - scores.mean()) / sd if sd > 0 else np.zeros_like(scores)


def diversity_objective(choices: np.ndarray, z: np.ndarray, alpha: float) -> float:
    """``-sum(z) + alpha * coverage`` of a selected set."""
    return float(-np.sum(z) + alpha * coverage(choices))


def greedy_diverse(choices: np.ndarray, z: np.ndarray, k: int, alpha: float) -> list[int]:
    """Greedy maximiser of :func:`diversity_objective`; ties go to the earlier row."""
    choices = np.asarray(choices, dtype=np.int64)
    n = len(choices)
    k = min(k, n)
    if k <= 0:
        return []
    m = choices.shape[1]
    covered = [np.zeros(int(choices[:, j].max()) + 1, np.bool_) for j in range(m)]
    free = np.ones(n, np.bool_)
    picked = []
    for _ in range(k):
        gain = -z.copy()
        if alpha:
            new = np.zeros(n)
            for j in range(m):
                new += ~covered[j][choices[:, j]]
            gain += alpha * new
        gain[~free] = -np.inf
        p = int(np.argmax(gain))
        picked.append(p)
        free[p] = False
        for j in range(m):
            covered[j][choices[p, j]] = True
    return picked


@dataclass
class Selection:
    greedy: list
    random: list
    fill: list

    @property
    def entities(self) -> list[ConfigEntity]:
        return self.greedy + self.fill + self.random


def select_batch(pool: Sequence[tuple[ConfigEntity, float]], b: int, epsilon: float, alpha: float,
                 rng: np.random.Generator, space: ConfigSpace, exclude: set | None = None) -> Selection:
    """Greedy diverse picks from ``pool`` plus ``ceil(epsilon * b)`` uniform random configs.

    If the pool is short of ``b - ceil(epsilon * b)`` the rest is filled with
    random configs, reported separately from the exploration picks.
    """
    exclude = set() if exclude is None else exclude
    n_rand = int(math.ceil(epsilon * b))
    n_greedy = b - n_rand
    pool = list(pool)
    if pool:
        choices = np.array([ce.choices for ce, _ in pool], dtype=np.int64)
        z = standardize(np.array([s for _, s in pool]))
        picked = greedy_diverse(choices, z, n_greedy, alpha)
    else:
        picked = []
    greedy = [pool[p][0] for p in picked]
    taken = set(exclude) | {space.entity_to_index(ce) for ce in greedy}
    short = n_greedy - len(greedy)
    fill_idx = sample_unmeasured(space, short, taken, rng)
    taken.update(fill_idx)
    rand_idx = sample_unmeasured(space, n_rand, taken, rng)
    return Selection(greedy, [space.index_to_entity(i) for i in rand_idx],
                     [space.index_to_entity(i) for i in fill_idx])


def diversity_select(pool: Sequence[tuple[ConfigEntity, float]], b: int, epsilon: float, alpha: float,
                     rng: np.random.Generator, space: ConfigSpace | None = None,
                     exclude: set | None = None) -> list[ConfigEntity]:
    """Batch of at most ``b`` configs: greedy diverse picks, then random exploration picks."""
    if space is None:
        if not pool:
            return []
        space = define_space_for_entity(pool[0][0])
    return select_batch(pool, b, epsilon, alpha, rng, space, exclude).entities


def define_space_for_entity(ce: ConfigEntity) -> ConfigSpace:
    from .workload import from_id

    return define_space(from_id(ce.workload_id))


# ---------------------------------------------------------------------------
# model fitting and scoring


def _training_data(state: TunerState, scheme: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ok = [r for r in state.records if r.ok]
    choices = np.array([r.entity.choices for r in ok], dtype=np.int64).reshape(len(ok), -1)
    y = np.array([r.cost for r in ok])
    return choices, featurize_configs(state.workload, state.space, choices, scheme) if len(ok) else None, y


def fit_model(state: TunerState, options: TunerOptions, transfer: TransferModel | None = None, round_: int = 0):
    """Retrain from scratch on every successful measurement of this session."""
    seed = options.seed * 7919 + round_
    ok = [r for r in state.records if r.ok]
    if transfer is not None:
        return fit_local(transfer, ok, seed=seed, params=options.gbt) if ok else transfer
    if not ok:
        return None
    _, X, y = _training_data(state, options.scheme)
    if options.members > 1:
        return train_ensemble(X, y, options.objective, options.gbt, seed=seed, n_members=options.members,
                              acquisition=options.acquisition, kappa=options.kappa,
                              feature_scheme=options.scheme)
    return train(X, y, options.objective, options.gbt, seed=seed, feature_scheme=options.scheme)


def make_scorer(state: TunerState, model, options: TunerOptions) -> Scorer | None:
    if model is None:
        return None
    w, space = state.workload, state.space
    if isinstance(model, TransferModel):
        return lambda c: predict_transfer_configs(model, w, space, c)
    scheme = options.scheme
    if isinstance(model, EnsembleModel) and options.acquisition != MEAN:
        best = None
        _, X, _ = _training_data(state, scheme)
        if X is not None and len(X):
            best = float(model.predict(X).min())
        kind = options.acquisition
        return lambda c: acquire(model, featurize_configs(w, space, c, scheme), kind, options.kappa, best)
    return lambda c: model.predict(featurize_configs(w, space, c, scheme))


# ---------------------------------------------------------------------------
# proposal strategies


def _propose_model(state: TunerState, options: TunerOptions, b: int) -> tuple[list, list, list]:
    scorer = make_scorer(state, state.model, options)
    pool = sa_collect(state, scorer, options)
    sel = select_batch(pool, b, options.epsilon, options.alpha, state.rng, state.space, state.measured)
    return sel.greedy, sel.fill, sel.random


def _propose_random(state: TunerState, options: TunerOptions, b: int) -> tuple[list, list, list]:
    idx = sample_unmeasured(state.space, b, state.measured, state.rng)
    return [], [], [state.space.index_to_entity(i) for i in idx]


def _propose_ga(state: TunerState, options: TunerOptions, b: int) -> tuple[list, list, list]:
    """Tournament selection, uniform crossover and per-knob mutation over the best measured."""
    space, rng = state.space, state.rng
    ok = sorted((r for r in state.records if r.ok), key=lambda r: r.cost)[:options.ga_population]
    if len(ok) < 2:
        return _propose_random(state, options, b)
    pop = np.array([r.entity.choices for r in ok], dtype=np.int64)
    fit = np.array([r.cost for r in ok])
    taken = set(state.measured)
    out = []
    for _ in range(20 * b):
        if len(out) >= b:
            break
        pa = rng.integers(len(pop), size=2)
        pb = rng.integers(len(pop), size=2)
        a = pop[pa[np.argmin(fit[pa])]]
        c = pop[pb[np.argmin(fit[pb])]]
        child = np.where(rng.random(len(a)) < 0.5, a, c)
        mut = rng.random(len(child)) < options.ga_mutation
        if mut.any():
            child = child.copy()
            child[mut] = [rng.integers(space.radix[j]) for j in np.flatnonzero(mut)]
        i = int(space.choices_to_indices(child[None])[0])
        if i not in taken:
            taken.add(i)
            out.append(space.index_to_entity(i))
    fill = [space.index_to_entity(i) for i in sample_unmeasured(space, b - len(out), taken, rng)]
    return out, fill, []


_PROPOSERS = {MODEL_GBT: _propose_model, RANDOM: _propose_random, GA: _propose_ga}


# ---------------------------------------------------------------------------
# driver


@dataclass
class TuneResult:
    best_entity: ConfigEntity | None
    best_cost: float
    trace: list
    state: TunerState

    def __iter__(self):
        return iter((self.best_entity, self.best_cost, self.trace))


def tune(w: Workload, backend, options: TunerOptions | None = None, history: Sequence[Record] | None = None,
         transfer: TransferModel | GBTModel | None = None,
         on_batch: Callable[[list[Record]], None] | None = None) -> TuneResult:
    """Search until ``options.max_n_trials`` configs are measured or the space is exhausted.

    ``history`` (records of other workloads) or ``transfer`` (a fitted global
    model) turns on transfer: the in-domain model becomes a local residual on top
    of the global score. ``on_batch`` sees every measured batch, e.g. to append
    it to a database.
    """
    options = options or TunerOptions()
    state = new_state(w, options)
    if history and transfer is None and options.strategy == MODEL_GBT:
        from .transfer import fit_global

        transfer = fit_global(history, seed=options.seed, objective=options.objective, params=options.gbt)
    if isinstance(transfer, GBTModel):
        transfer = new_transfer(transfer, options.scheme)
    if transfer is not None and options.strategy == MODEL_GBT:
        state.model = transfer

    propose = _PROPOSERS[options.strategy]
    t_start = time.perf_counter()
    round_ = 0
    while state.n_trials < options.max_n_trials and state.unmeasured > 0:
        b = min(options.b, options.max_n_trials - state.n_trials)
        greedy, fill, rand = propose(state, options, b)
        batch = [(ce, False) for ce in greedy + fill] + [(ce, True) for ce in rand]
        if not batch:
            break
        records = backend.measure(w, [ce for ce, _ in batch], state.space)
        for (ce, is_rand), rec in zip(batch, records):
            idx = state.space.entity_to_index(ce)
            if idx in state.measured:
                raise RuntimeError(f"config {ce.choices} measured twice")
            state.measured.add(idx)
            state.records.append(rec)
            state.n_trials += 1
            if rec.ok and rec.cost < state.best[1]:
                state.best = (ce, rec.cost)
            state.trace.append({
                "trial": state.n_trials,
                "entity": list(ce.choices),
                "cost": rec.cost if rec.ok else None,
                "best_so_far": state.best[1] if np.isfinite(state.best[1]) else None,
                "wall_time": time.perf_counter() - t_start,
                "batch": round_,
                "random": is_rand,
            })
        if on_batch is not None:
            on_batch(records)
        round_ += 1
        if options.strategy == MODEL_GBT and state.n_trials < options.max_n_trials and state.unmeasured > 0:
            state.model = fit_model(state, options, transfer, round_)
        log.info("%s round %d: %d trials, best %.6g", w.id, round_, state.n_trials, state.best[1])
    return TuneResult(state.best[0], state.best[1], state.trace, state)


# ---------------------------------------------------------------------------
# trace helpers shared with the CLI and benchmarks


def best_at(trace: Sequence[dict], n: int) -> float:
    """Best cost after the first ``n`` trials (inf if none succeeded)."""
    vals = [t["best_so_far"] for t in trace[:n] if t["best_so_far"] is not None]
    return float(vals[-1]) if vals else math.inf


def trials_to_reach(trace: Sequence[dict], target: float) -> int | None:
    """First trial whose best-so-far is at or below ``target``."""
    for t in trace:
        if t["best_so_far"] is not None and t["best_so_far"] <= target:
            return int(t["trial"])
    return None


def check_trace(trace: Sequence[dict], b: int, epsilon: float, budget: int | None = None,
                size: int | None = None) -> list[str]:
    """Batch-accounting violations in a model-guided trace (empty when clean).

    Every batch holds exactly ``ceil(epsilon * b_eff)`` random picks where
    ``b_eff`` is the batch's actual size, no config repeats and best-so-far
    never increases.
    """
    problems = []
    seen = set()
    for t in trace:
        key = tuple(t["entity"])
        if key in seen:
            problems.append(f"trial {t['trial']}: config {key} measured twice")
        seen.add(key)
    prev = math.inf
    for t in trace:
        cur = math.inf if t["best_so_far"] is None else t["best_so_far"]
        if cur > prev:
            problems.append(f"trial {t['trial']}: best-so-far increased")
        prev = cur
    batches = {}
    for t in trace:
        batches.setdefault(t["batch"], []).append(t)
    for k, rows in batches.items():
        want = int(math.ceil(epsilon * len(rows)))
        got = sum(bool(r["random"]) for r in rows)
        exhausted = size is not None and len(seen) >= size
        if got != want and not (exhausted and got < want):
            problems.append(f"batch {k}: {got} random picks, expected {want}")
        if len(rows) > b:
            problems.append(f"batch {k}: {len(rows)} configs exceed b={b}")
    return problems
