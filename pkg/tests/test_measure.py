import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loomtune.measure import (DB_ENV, DEFAULT_MACHINE, FAILED, MachineModelParams, OracleBackend, Record,
                              WallclockBackend, db_append, db_load, db_path, measure_oracle, measure_wallclock,
                              oracle_cost, oracle_cost_batch, oracle_sweep)
from loomtune.schedule import ConfigEntity, define_space, index_to_entity, lower, lower_batch
from loomtune.workload import make_conv2d, make_matmul


def tiling(cs, i, j, k):
    return [cs.knob("tile_i").domain.index(i), cs.knob("tile_j").domain.index(j),
            cs.knob("tile_k").domain.index(k)]


def test_tiny_matmul_cost_by_hand():
    # 8 iterations at flop 0.5 + overhead 0.5; 3 buffers of 4 elements each fit
    # everywhere, so each pays 4 register loads, then 2 two-element runs per cache level
    w = make_matmul(2, 2, 2)
    cs = define_space(w)
    ce = cs.entity(tiling(cs, (2, 1, 1), (2, 1, 1), (2, 1)) + [0, 0, 0])
    expect = 8 * 1.0 + 3 * (4 * 1 + 2 * 7 + 2 * 52)
    assert oracle_cost(lower(w, ce, cs)) == expect


def test_tiny_matmul_reorder_invariant():
    w = make_matmul(2, 2, 2)
    cs = define_space(w)
    ri = cs.knobs.index(cs.knob("reorder"))
    vi = cs.knobs.index(cs.knob("vectorize"))
    idx = np.arange(cs.size)
    ch = cs.indices_to_choices(idx)
    costs = oracle_cost_batch(lower_batch(w, cs, ch))
    scalar_only = ch[:, vi] == cs.knob("vectorize").domain.index(False)
    rest = np.delete(ch, ri, axis=1)
    for key in {tuple(r) for r in rest[scalar_only]}:
        group = costs[scalar_only & np.all(rest == key, axis=1)]
        assert np.all(group == group[0])


def test_tiling_beats_identity_on_large_matmul():
    w = make_matmul(512, 512, 512)
    cs = define_space(w)
    naive = cs.entity(tiling(cs, (512, 1, 1), (512, 1, 1), (512, 1)) + [0, 0, 0])
    tiled = cs.entity(tiling(cs, (16, 8, 4), (16, 4, 8), (32, 16)) + [0, 0, 0])
    assert oracle_cost(lower(w, tiled, cs)) < oracle_cost(lower(w, naive, cs))


@pytest.mark.parametrize("w", [make_matmul(32, 16, 24), make_conv2d(14, 14, 16, 32, 3, 2, 1),
                               make_conv2d(7, 7, 8, 8, 1, 1, 0)], ids=lambda w: w.id)
def test_batched_oracle_matches_scalar(w):
    cs = define_space(w)
    idx = np.random.default_rng(0).integers(0, cs.size, size=300)
    batch = oracle_cost_batch(lower_batch(w, cs, cs.indices_to_choices(idx)))
    scalar = [oracle_cost(lower(w, index_to_entity(cs, int(i)), cs)) for i in idx]
    assert np.array_equal(batch, scalar)


def test_oracle_is_pure():
    w = make_conv2d(7, 7, 8, 16, 3, 1, 1)
    cs = define_space(w)
    ce = index_to_entity(cs, 777)
    a, b = measure_oracle(w, ce, space=cs), measure_oracle(w, ce, space=cs)
    assert a.cost == b.cost and a.timestamp == b.timestamp == 0.0
    assert a.backend_id == DEFAULT_MACHINE.backend_id


def test_sweep_matches_backend():
    w = make_matmul(8, 8, 4)
    cs = define_space(w)
    sweep = oracle_sweep(w, cs, chunk=97)
    recs = OracleBackend().measure(w, [index_to_entity(cs, i) for i in range(cs.size)], cs)
    assert np.array_equal(sweep, [r.cost for r in recs])
    assert np.all(sweep > 0)


@settings(max_examples=30, deadline=None)
@given(st.floats(1.0, 4.0), st.integers(0, 10 ** 9))
def test_slower_caches_never_help(factor, seed):
    w = make_matmul(64, 32, 32)
    cs = define_space(w)
    slow = MachineModelParams(caches=tuple((c, lat * factor) for c, lat in DEFAULT_MACHINE.caches),
                              memory_latency=DEFAULT_MACHINE.memory_latency * factor)
    idx = np.random.default_rng(seed).integers(0, cs.size, size=50)
    batch = lower_batch(w, cs, cs.indices_to_choices(idx))
    assert np.all(oracle_cost_batch(batch, slow) >= oracle_cost_batch(batch))


def test_machine_params_validation():
    with pytest.raises(ValueError):
        MachineModelParams(caches=((1024, 1.0), (512, 8.0)))
    with pytest.raises(ValueError):
        MachineModelParams(caches=((1024, 8.0), (4096, 2.0)))
    with pytest.raises(ValueError):
        MachineModelParams(memory_latency=4.0)


def test_wallclock_sanity():
    w = make_matmul(64, 64, 64)
    cs = define_space(w)
    ce = index_to_entity(cs, 1234)
    a = measure_wallclock(w, ce, repeats=3, warmup=1, space=cs)
    b = measure_wallclock(w, ce, repeats=3, warmup=1, space=cs)
    assert a.ok and a.cost > 0 and a.repeats == 3
    assert max(a.cost, b.cost) <= 3 * min(a.cost, b.cost)


def test_wallclock_failure_is_recorded():
    w = make_matmul(4, 4, 4)
    rec = WallclockBackend(repeats=1, warmup=0).measure(w, [ConfigEntity("matmul-8x8x8", (0,) * 6)])[0]
    assert rec.status == FAILED and not rec.ok
    assert json.loads(rec.to_line())["cost"] is None


def sample_records(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for w in (make_matmul(8, 8, 8), make_conv2d(7, 7, 8, 8, 3, 2, 1)):
        cs = define_space(w)
        for i in rng.integers(0, cs.size, size=n // 2):
            out.append(Record(w.id, index_to_entity(cs, int(i)), float(rng.uniform(1, 9)), "oracle:default",
                              repeats=3, variance=0.25, timestamp=float(i)))
    return out


def test_db_round_trip_and_filter(tmp_path):
    path = tmp_path / "db.jsonl"
    recs = sample_records(20)
    db_append(path, recs)
    back = db_load(path)
    assert back.warnings == 0 and back.records == recs
    conv = db_load(path, workload_id="conv2d-7x7x8x8-k3s2p1")
    assert len(conv) == 10 and all(r.workload_id.startswith("conv2d") for r in conv)
    assert len(db_load(path, backend_id="wallclock")) == 0


def test_db_skips_corrupt_line(tmp_path):
    path = tmp_path / "db.jsonl"
    recs = sample_records(100)
    db_append(path, recs[:50])
    with open(path, "a") as fh:
        fh.write('{"workload_id": "matmul-8x8x8", "entity": \n')
    db_append(path, recs[50:99])
    res = db_load(path)
    assert len(res) == 99 and res.warnings == 1


def test_db_is_append_only(tmp_path):
    path = tmp_path / "db.jsonl"
    recs = sample_records(10)
    db_append(path, recs[:4])
    before = path.read_bytes()
    db_append(path, recs[4])
    db_append(path, recs[5:])
    assert path.read_bytes().startswith(before)
    assert len(db_load(path)) == 10


def test_db_path_resolution(monkeypatch, tmp_path):
    monkeypatch.setenv(DB_ENV, str(tmp_path / "env.jsonl"))
    assert db_path() == tmp_path / "env.jsonl"
    assert db_path(tmp_path / "flag.jsonl") == tmp_path / "flag.jsonl"
    monkeypatch.delenv(DB_ENV)
    assert db_path().name == "loomtune_records.jsonl"


def test_load_missing_file(tmp_path):
    with pytest.raises(OSError):
        db_load(tmp_path / "absent.jsonl")
