import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loomtune.features import (BOTTOM_UP, COMBINED, CONFIG_KNOBS, FLAT_CONTEXT, FLAT_LENGTH, MAX_LOOPS, RELATION,
                               RELATION_LENGTH, RELATION_PAIRS, THRESHOLDS, TOP_DOWN, col, context_matrix,
                               featurize, featurize_batch, featurize_configs, relation_features, relation_values,
                               scheme_length)
from loomtune.schedule import Access, Compute, Loop, LoopNest, define_space, index_to_entity, lower
from loomtune.workload import make_conv2d, make_matmul

MATMUL = make_matmul(64, 32, 48)
CONV = make_conv2d(14, 14, 16, 32, 3, 1, 1)


def random_nests(w, n, seed):
    cs = define_space(w)
    rng = np.random.default_rng(seed)
    return cs, [lower(w, index_to_entity(cs, int(i)), cs) for i in rng.integers(0, cs.size, size=n)]


def naive_matmul_nest(n):
    w = make_matmul(n, n, n)
    cs = define_space(w)
    ce = cs.entity([cs.knob("tile_i").domain.index((n, 1, 1)), cs.knob("tile_j").domain.index((n, 1, 1)),
                    cs.knob("tile_k").domain.index((n, 1)), 0, 0, 0])
    return lower(w, ce, cs)


def test_naive_matmul_context_of_c_at_k():
    nest = naive_matmul_nest(4)
    cm = context_matrix(nest)
    names = [b.name for b in nest.buffers]
    c = names.index("C")
    k_row = [lp.var for lp in nest.loops()].index(nest.loops()[-1].var)
    assert nest.loops()[-1].axis == "k"
    assert cm.Z[k_row, col(c, "touch")] == 1
    assert cm.Z[k_row, col(c, "reuse")] == 4
    assert cm.Z[k_row, col(c, "stride")] == 0
    # A[i][k] moves with k at stride 1
    assert cm.Z[k_row, col(names.index("A"), "stride")] == 1


def test_outer_and_inner_boundaries():
    cs, nests = random_nests(MATMUL, 20, 0)
    for nest in nests:
        Z = context_matrix(nest).Z
        assert Z[0, TOP_DOWN] == 1
        assert Z[-1, BOTTOM_UP] == Z[-1, 0]


def hand_nest():
    # for a in 0..3: for b in 0..5: O[a] += X[2a + b]
    body = Compute(Access("O", (("a", 1),)), (Access("X", (("a", 2), ("b", 1))),))
    inner = Loop("b", 6, "none", body)
    return LoopNest("hand", "f32", Loop("a", 4, "none", inner), ())


def test_hand_built_nest():
    cm = context_matrix(hand_nest())
    Z = cm.Z
    assert Z.shape[0] == 2
    assert list(Z[:, 0]) == [4, 6]
    assert list(Z[:, TOP_DOWN]) == [1, 4]
    assert list(Z[:, BOTTOM_UP]) == [24, 6]
    assert list(Z[:, col(0, "touch")]) == [4, 1]
    assert list(Z[:, col(1, "touch")]) == [24, 6]
    assert list(Z[:, col(1, "stride")]) == [2, 1]
    assert list(Z[:, col(0, "reuse")]) == [6, 6]


def test_relation_worked_example():
    Z = np.array([[4.0, 100.0], [8.0, 10.0]])
    assert relation_values(Z, [(0, 1)], np.array([32.0]))[0, 0] == 8
    assert relation_values(Z, [(0, 1)], np.array([1.0]))[0, 0] == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10 ** 9), st.booleans())
def test_top_down_times_bottom_up_is_total(seed, conv):
    w = CONV if conv else MATMUL
    cs = define_space(w)
    nest = lower(w, index_to_entity(cs, seed % cs.size), cs)
    Z = context_matrix(nest).Z
    assert np.all(Z[:, TOP_DOWN] * Z[:, BOTTOM_UP] == w.iteration_count)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10 ** 9), st.booleans())
def test_relation_monotone_in_threshold(seed, conv):
    w = CONV if conv else MATMUL
    cs = define_space(w)
    R = relation_features(context_matrix(lower(w, index_to_entity(cs, seed % cs.size), cs))).R
    assert np.all(np.diff(R, axis=1) >= 0)
    assert R.shape == (len(RELATION_PAIRS), len(THRESHOLDS))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10 ** 9), st.integers(0, 10 ** 9))
def test_relation_length_is_operator_invariant(a, b):
    ca, cb = define_space(MATMUL), define_space(CONV)
    va = featurize(lower(MATMUL, index_to_entity(ca, a % ca.size), ca), RELATION)
    vb = featurize(lower(CONV, index_to_entity(cb, b % cb.size), cb), RELATION)
    assert len(va.values) == len(vb.values) == RELATION_LENGTH


def test_flat_context_pads_and_truncates():
    _, mm = random_nests(MATMUL, 10, 1)
    _, cv = random_nests(CONV, 10, 1)
    lengths = {len(featurize(n, FLAT_CONTEXT).values) for n in mm + cv}
    assert lengths == {FLAT_LENGTH}
    # a nest deeper than the cap keeps its outermost loops
    body = Compute(Access("O", (("l0", 1),)), ())
    node = body
    for d in reversed(range(MAX_LOOPS + 4)):
        node = Loop(f"l{d}", 2, "none", node)
    deep = LoopNest("deep", "f32", node, ())
    v = featurize(deep, FLAT_CONTEXT).values
    assert len(v) == FLAT_LENGTH and np.all(np.isfinite(v))
    assert v.reshape(MAX_LOOPS, -1)[0, TOP_DOWN] == 1  # log2(1 + 1)
    assert v.reshape(MAX_LOOPS, -1)[0, 0] == np.log2(3)


def test_featurize_is_deterministic_and_finite():
    cs, nests = random_nests(CONV, 15, 2)
    for scheme in (FLAT_CONTEXT, RELATION, COMBINED):
        for nest in nests:
            a, b = featurize(nest, scheme).values, featurize(nest, scheme).values
            assert np.array_equal(a, b)
            assert np.all(np.isfinite(a)) and np.all(a >= 0)


def test_config_knobs_scheme():
    cs = define_space(MATMUL)
    ce = index_to_entity(cs, cs.size - 1)
    v = featurize(ce, CONFIG_KNOBS, cs).values
    assert len(v) == scheme_length(CONFIG_KNOBS, cs) == len(cs.knobs)
    assert np.all((v >= 0) & (v <= 1))
    with pytest.raises(ValueError):
        featurize(ce, CONFIG_KNOBS)
    with pytest.raises(ValueError):
        featurize(ce, FLAT_CONTEXT)
    with pytest.raises(ValueError):
        featurize(lower(MATMUL, ce, cs), "nonsense")


@pytest.mark.parametrize("w", [MATMUL, CONV, make_conv2d(7, 7, 8, 8, 1, 2, 0)], ids=lambda w: w.id)
@pytest.mark.parametrize("scheme", [FLAT_CONTEXT, RELATION, COMBINED, CONFIG_KNOBS])
def test_batched_features_equal_per_nest(w, scheme):
    cs = define_space(w)
    rng = np.random.default_rng(3)
    idx = rng.integers(0, cs.size, size=40)
    ch = cs.indices_to_choices(idx)
    fast = featurize_configs(w, cs, ch, scheme)
    if scheme == CONFIG_KNOBS:
        slow = featurize_batch([index_to_entity(cs, int(i)) for i in idx], scheme, cs)
    else:
        slow = featurize_batch([lower(w, index_to_entity(cs, int(i)), cs) for i in idx], scheme)
    assert np.array_equal(fast, slow)


def test_permuting_knob_definition_keeps_z():
    # the same nest lowered from a space whose knobs are listed in another order
    from loomtune.schedule import ConfigSpace

    w = MATMUL
    cs = define_space(w)
    perm = list(reversed(range(len(cs.knobs))))
    shuffled = ConfigSpace(cs.workload_id, tuple(cs.knobs[j] for j in perm))
    rng = np.random.default_rng(4)
    for i in rng.integers(0, cs.size, size=10):
        ce = index_to_entity(cs, int(i))
        nest = lower(w, ce, cs)
        Z1 = context_matrix(nest).Z
        # rebuild the nest via a name-keyed lookup on the shuffled space
        values = cs.values(ce)
        ch = [shuffled.knobs[j].domain.index(values[shuffled.knobs[j].name]) for j in range(len(perm))]
        back = cs.entity([ch[perm.index(j)] for j in range(len(perm))])
        Z2 = context_matrix(lower(w, back, cs)).Z
        assert np.array_equal(Z1, Z2)
