import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loomtune.explorer import (GA, RANDOM, TunerOptions, best_at, check_trace, coverage, diversity_objective,
                               diversity_select, greedy_diverse, new_state, sa_collect, sample_unmeasured,
                               select_batch, standardize, trials_to_reach, tune)
from loomtune.measure import FAILED, OracleBackend, Record, oracle_sweep
from loomtune.model import GBTParams
from loomtune.schedule import ConfigEntity, ConfigSpace, Knob, define_space
from loomtune.workload import make_conv2d, make_matmul

FAST = dict(n_sa=32, step_sa=60, gbt=GBTParams(n_rounds=40))


def line_space(n):
    return ConfigSpace("line", (Knob("v", "int", tuple(range(n))),))


class LineState:
    """A bare tuner state over a one-knob space for exercising the annealer."""

    def __init__(self, n, n_sa, seed):
        from loomtune.explorer import TunerState, random_choices

        space = line_space(n)
        rng = np.random.default_rng(seed)
        self.state = TunerState(None, space, random_choices(space, n_sa, rng), rng)


def test_coverage_counts_distinct_values():
    assert coverage(np.array([[1, 2], [1, 3]])) == 3
    assert coverage(np.zeros((0, 2))) == 0


def test_alpha_zero_picks_lowest_scores():
    rng = np.random.default_rng(0)
    scores = rng.normal(size=40)
    choices = rng.integers(0, 5, size=(40, 3))
    picked = greedy_diverse(choices, standardize(scores), 19, 0.0)
    assert sorted(picked) == sorted(np.argsort(scores)[:19].tolist())


def test_greedy_ties_go_to_earlier_rows():
    choices = np.array([[0, 0], [0, 0], [0, 0]])
    assert greedy_diverse(choices, np.zeros(3), 2, 1.0) == [0, 1]


def singleton_shifted_check(choices, scores, b, alpha):
    z = standardize(scores)
    shift = -min(diversity_objective(choices[[i]], z[[i]], alpha) for i in range(len(z)))
    shift = max(shift, 0.0)
    # value of a set of size b after shifting every singleton to be non-negative
    val = lambda S: diversity_objective(choices[list(S)], z[list(S)], alpha) + shift * len(S)  # noqa: E731
    greedy = val(greedy_diverse(choices, z, b, alpha))
    best = max(val(S) for S in itertools.combinations(range(len(z)), b))
    return greedy, best


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 9), st.floats(0.0, 3.0))
def test_greedy_near_optimal_on_small_pools(seed, alpha):
    rng = np.random.default_rng(seed)
    choices = rng.integers(0, 4, size=(8, 3))
    scores = rng.normal(size=8)
    greedy, best = singleton_shifted_check(choices, scores, 4, alpha)
    assert greedy >= (1 - 1 / math.e) * best - 1e-9


def test_select_batch_accounting():
    w = make_matmul(16, 16, 16)
    cs = define_space(w)
    rng = np.random.default_rng(1)
    pool = [(cs.index_to_entity(int(i)), float(s)) for i, s in
            zip(rng.choice(cs.size, 128, replace=False), rng.normal(size=128))]
    exclude = set(rng.choice(cs.size, 500, replace=False).tolist()) - {cs.entity_to_index(ce) for ce, _ in pool}
    sel = select_batch(pool, 64, 0.05, 0.1, rng, cs, exclude)
    assert len(sel.random) == math.ceil(0.05 * 64) and len(sel.greedy) == 60 and not sel.fill
    idx = [cs.entity_to_index(ce) for ce in sel.entities]
    assert len(set(idx)) == 64 and not set(idx) & exclude


def test_short_pool_is_filled_randomly():
    cs = define_space(make_matmul(8, 8, 8))
    rng = np.random.default_rng(2)
    pool = [(cs.index_to_entity(i), float(i)) for i in range(5)]
    sel = select_batch(pool, 20, 0.1, 0.5, rng, cs)
    assert len(sel.greedy) == 5 and len(sel.fill) == 13 and len(sel.random) == 2
    assert len({ce.choices for ce in sel.entities}) == 20
    assert len(diversity_select(pool, 20, 0.1, 0.5, np.random.default_rng(2), cs)) == 20


def test_sample_unmeasured_respects_exclusion():
    cs = line_space(50)
    rng = np.random.default_rng(3)
    ex = set(range(0, 50, 2))
    got = sample_unmeasured(cs, 100, ex, rng)
    assert sorted(got) == list(range(1, 50, 2))
    assert sample_unmeasured(cs, 3, set(range(50)), rng) == []


def test_cold_start_random_walk():
    opts = TunerOptions(b=16, **FAST)
    st_ = new_state(make_matmul(32, 32, 32), opts)
    pool = sa_collect(st_, None, opts)
    assert len(pool) == math.ceil(opts.lam * opts.b)
    assert len({ce.choices for ce, _ in pool}) == len(pool)
    assert all(s == 0.0 for _, s in pool)


def test_tiny_space_returns_everything():
    ls = LineState(3, 8, 0)
    pool = sa_collect(ls.state, lambda c: c[:, 0].astype(float), TunerOptions(b=16, n_sa=8, step_sa=20))
    assert sorted(ce.choices[0] for ce, _ in pool) == [0, 1, 2]
    assert [s for _, s in pool] == sorted(s for _, s in pool)


def test_annealing_concentrates_on_unimodal_energy():
    ls = LineState(1024, 128, 5)
    energy = lambda c: np.abs(c[:, 0] - 700.0)  # noqa: E731
    chains_before = ls.state.chains
    sa_collect(ls.state, energy, TunerOptions(n_sa=128, step_sa=500))
    final = ls.state.chains[:, 0]
    assert ls.state.chains is chains_before
    assert np.mean(np.abs(final - 700) <= 5) >= 0.9


def test_chains_persist_across_rounds():
    w = make_matmul(32, 16, 16)
    opts = TunerOptions(b=16, max_n_trials=48, seed=4, **FAST)
    res = tune(w, OracleBackend(), opts)
    assert res.state.chains.shape == (opts.n_sa, len(res.state.space.knobs))
    assert len(res.trace) == 48


def test_whole_space_in_one_batch_finds_optimum():
    w = make_matmul(2, 2, 2)
    cs = define_space(w)
    opts = TunerOptions(b=cs.size, max_n_trials=cs.size, **FAST)
    best, cost, trace = tune(w, OracleBackend(), opts)
    assert len(trace) == cs.size
    assert cost == oracle_sweep(w, cs).min()


@pytest.mark.parametrize("strategy", ["model-gbt", RANDOM, GA])
def test_tune_is_deterministic(strategy):
    w = make_conv2d(7, 7, 8, 8, 3, 1, 1)
    opts = TunerOptions(b=16, max_n_trials=50, seed=9, strategy=strategy, **FAST)
    a = tune(w, OracleBackend(), opts).trace
    b = tune(w, OracleBackend(), opts).trace
    strip = lambda tr: [{k: v for k, v in t.items() if k != "wall_time"} for t in tr]  # noqa: E731
    assert strip(a) == strip(b)
    assert check_trace(a, 16, 0.05 if strategy == "model-gbt" else 0.0) == [] or strategy != "model-gbt"


def test_trace_accounting_with_partial_last_batch():
    w = make_matmul(16, 32, 8)
    opts = TunerOptions(b=20, max_n_trials=70, epsilon=0.1, seed=2, **FAST)
    trace = tune(w, OracleBackend(), opts).trace
    assert len(trace) == 70
    assert check_trace(trace, 20, 0.1) == []
    sizes = np.bincount([t["batch"] for t in trace])
    assert list(sizes) == [20, 20, 20, 10]
    assert [sum(t["random"] for t in trace if t["batch"] == k) for k in range(4)] == [2, 2, 2, 1]
    assert set(trace[0]) == {"trial", "entity", "cost", "best_so_far", "wall_time", "batch", "random"}


def test_check_trace_flags_violations():
    good = [{"trial": i + 1, "entity": [i], "cost": 5.0 - i, "best_so_far": 5.0 - i, "batch": 0,
             "random": i == 0} for i in range(4)]
    assert check_trace(good, 4, 0.25) == []
    dup = good + [dict(good[0], trial=5, batch=1)]
    assert any("twice" in p for p in check_trace(dup, 4, 0.25))
    worse = [dict(t) for t in good]
    worse[3]["best_so_far"] = 9.0
    assert any("increased" in p for p in check_trace(worse, 4, 0.25))
    norand = [dict(t, random=False) for t in good]
    assert any("random picks" in p for p in check_trace(norand, 4, 0.25))


def test_trace_helpers():
    trace = [{"trial": 1, "best_so_far": None}, {"trial": 2, "best_so_far": 4.0}, {"trial": 3, "best_so_far": 2.0}]
    assert best_at(trace, 1) == math.inf and best_at(trace, 2) == 4.0 and best_at(trace, 10) == 2.0
    assert trials_to_reach(trace, 3.0) == 3 and trials_to_reach(trace, 1.0) is None


class FlakyBackend(OracleBackend):
    """Fails every seventh config."""

    def measure(self, w, entities, space=None):
        out = super().measure(w, entities, space)
        for r in out:
            if sum(r.entity.choices) % 7 == 0:
                r.status, r.cost = FAILED, math.inf
        return out


def test_failed_measurements_do_not_abort():
    w = make_matmul(16, 16, 16)
    res = tune(w, FlakyBackend(), TunerOptions(b=16, max_n_trials=64, seed=1, **FAST))
    costs = [t["cost"] for t in res.trace]
    assert any(c is None for c in costs) and len(costs) == 64
    assert res.best_cost == min(c for c in costs if c is not None)
    assert check_trace(res.trace, 16, 0.05) == []


def test_options_validation():
    with pytest.raises(ValueError):
        TunerOptions(epsilon=1.0)
    with pytest.raises(ValueError):
        TunerOptions(lam=0.5)
    with pytest.raises(ValueError):
        TunerOptions(b=0)
    with pytest.raises(ValueError, match="budget must be positive"):
        TunerOptions(max_n_trials=0)
    with pytest.raises(ValueError):
        TunerOptions(strategy="bayes")
    assert TunerOptions(acquisition="ucb").members == 5 and TunerOptions().members == 1


def test_best_matches_records():
    w = make_conv2d(6, 6, 4, 8, 3, 1, 1)
    res = tune(w, OracleBackend(), TunerOptions(b=8, max_n_trials=40, seed=3, **FAST))
    assert res.best_cost == min(r.cost for r in res.state.records)
    assert isinstance(res.best_entity, ConfigEntity)
    assert res.state.n_trials == len(res.state.records) == 40
    assert all(isinstance(r, Record) for r in res.state.records)
