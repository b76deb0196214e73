import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loomtune.workload import (CONV2D, MATMUL, RESNET18_CONV2D, conv2d_out_size, from_id, from_line,
                               make_conv2d, make_inputs, make_matmul, reference_execute, resnet18_suite)


def naive_matmul(a, b):
    # independent triple loop over python ints
    n, k = a.shape
    m = b.shape[1]
    out = [[0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0
            for kk in range(k):
                s += int(a[i, kk]) * int(b[kk, j])
            out[i][j] = s
    return np.array(out)


def naive_conv(x, wt, s, p):
    ic, h, w = x.shape
    oc, _, k, _ = wt.shape
    oh, ow = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
    out = np.zeros((oc, oh, ow), dtype=np.int64)
    for o in range(oc):
        for y in range(oh):
            for z in range(ow):
                acc = 0
                for c in range(ic):
                    for dy in range(k):
                        for dz in range(k):
                            yy, zz = y * s + dy - p, z * s + dz - p
                            if 0 <= yy < h and 0 <= zz < w:
                                acc += int(x[c, yy, zz]) * int(wt[o, c, dy, dz])
                out[o, y, z] = acc
    return out


def test_make_matmul_shapes():
    w = make_matmul(3, 5, 7)
    assert w.kind == MATMUL
    assert [t.shape for t in w.inputs] == [(3, 7), (7, 5)]
    assert w.output.shape == (3, 5)
    assert make_matmul(1, 1, 1).output.shape == (1, 1)
    assert make_matmul(1024, 1024, 1024).id == "matmul-1024x1024x1024"


@pytest.mark.parametrize("dims", [(0, 1, 1), (1, -2, 1), (1, 1, 0)])
def test_make_matmul_rejects_non_positive(dims):
    with pytest.raises(ValueError):
        make_matmul(*dims)


def test_identity_matmul():
    w = make_matmul(4, 4, 4, "i32")
    eye = np.eye(4, dtype=np.int32)
    assert np.array_equal(reference_execute(w, [eye, eye]), eye)
    w2 = make_matmul(2, 2, 2, "i32")
    a = np.array([[1, 2], [3, 4]], dtype=np.int32)
    assert np.array_equal(reference_execute(w2, [a, np.eye(2, dtype=np.int32)]), a)


def test_matmul_matches_triple_loop():
    w = make_matmul(3, 3, 3, "i32")
    a, b = make_inputs(w, seed=7)
    assert a.min() >= -8 and a.max() <= 8
    assert np.array_equal(reference_execute(w, [a, b]), naive_matmul(a, b))


def test_conv2d_examples():
    c7 = make_conv2d(28, 28, 128, 256, 3, 2, 1)
    assert c7.output.shape == (256, 14, 14)
    c12 = make_conv2d(7, 7, 512, 512, 3, 1, 1)
    assert c12.output.shape == (512, 7, 7)
    single = make_conv2d(3, 3, 1, 1, 3, 1, 0)
    assert single.output.shape == (1, 1, 1)
    ones = [np.ones((1, 3, 3), np.float32), np.ones((1, 1, 3, 3), np.float32)]
    assert reference_execute(single, ones)[0, 0, 0] == 9.0


def test_conv2d_rejects_oversized_kernel():
    with pytest.raises(ValueError):
        make_conv2d(3, 3, 1, 1, 5, 1, 0)


def test_single_output_conv_is_dot_product():
    w = make_conv2d(3, 3, 2, 1, 3, 1, 0, "i32")
    x, k = make_inputs(w)
    out = reference_execute(w, [x, k])
    assert out[0, 0, 0] == int(np.sum(x.astype(np.int64) * k[0].astype(np.int64)))


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 7), ic=st.integers(1, 3), oc=st.integers(1, 3), k=st.sampled_from([1, 3]),
       s=st.integers(1, 2), p=st.integers(0, 1))
def test_conv_matches_naive(h, ic, oc, k, s, p):
    if k > h + 2 * p:
        return
    w = make_conv2d(h, h, ic, oc, k, s, p, "i32")
    x, wt = make_inputs(w)
    assert np.array_equal(reference_execute(w, [x, wt]), naive_conv(x, wt, s, p))


def test_resnet18_suite():
    suite = resnet18_suite()
    assert len(suite) == 12
    assert suite[0].p == {"H": 224, "W": 224, "IC": 3, "OC": 64, "K": 7, "S": 2, "P": 3}
    assert len({w.id for w in suite}) == 12
    # padding reproduces the network's spatial sizes
    expect = [112, 56, 56, 28, 28, 28, 14, 14, 14, 7, 7, 7]
    assert [w.output.shape[1] for w in suite] == expect
    for w, (h, _, _, _, k, s) in zip(suite, RESNET18_CONV2D):
        p = w.p["P"]
        assert w.output.shape[1] == (h + 2 * p - k) // s + 1
        assert p == (k // 2)


def test_scaled_suite_stays_valid():
    small = resnet18_suite(4)
    assert len(small) == 12
    assert all(w.kind == CONV2D for w in small)
    assert small[6].p["H"] == 7 and small[6].p["IC"] == 32


def test_reference_is_deterministic():
    w = make_conv2d(8, 8, 3, 4, 3, 1, 1)
    x = make_inputs(w, 3)
    assert reference_execute(w, x).tobytes() == reference_execute(w, x).tobytes()


def test_input_shape_mismatch():
    w = make_matmul(2, 3, 4)
    with pytest.raises(ValueError):
        reference_execute(w, [np.zeros((2, 4)), np.zeros((3, 3))])
    with pytest.raises(ValueError):
        reference_execute(w, [np.zeros((2, 4))])


@given(st.one_of(
    st.tuples(st.just("mm"), st.integers(1, 64), st.integers(1, 64), st.integers(1, 64),
              st.sampled_from(["f32", "i32"])),
    st.tuples(st.just("cv"), st.integers(3, 30), st.integers(1, 16), st.integers(1, 16),
              st.sampled_from([1, 3]), st.integers(1, 2), st.sampled_from(["f32", "i32"])),
))
def test_id_round_trip(spec):
    if spec[0] == "mm":
        w = make_matmul(*spec[1:4], dtype=spec[4])
    else:
        _, h, ic, oc, k, s, dt = spec
        w = make_conv2d(h, h, ic, oc, k, s, dtype=dt)
    assert from_id(w.id) == w
    assert from_line(w.to_line()) == w
    assert from_id(w.id).id == w.id


def test_out_size_formula():
    assert conv2d_out_size(224, 7, 2, 3) == 112
    assert conv2d_out_size(56, 1, 2, 0) == 28
