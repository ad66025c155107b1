import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptlab import fast_attention as fa
from promptlab.rng import stream


def naive_attention(Q, K, V):
    n = K.shape[1]
    out = np.zeros((V.shape[0], Q.shape[1]))
    for j in range(Q.shape[1]):
        s = [sum(K[r, i] * Q[r, j] for r in range(K.shape[0])) for i in range(n)]
        top = max(s)
        w = [math.exp(v - top) for v in s]
        tot = sum(w)
        for r in range(V.shape[0]):
            out[r, j] = sum(V[r, i] * w[i] for i in range(n)) / tot
    return out


def test_exact_single_column_and_zero_keys():
    rng = np.random.default_rng(0)
    V = rng.normal(size=(3, 1))
    assert np.allclose(fa.exact_attention(rng.normal(size=(2, 1)), rng.normal(size=(2, 1)), V), V)
    V = rng.normal(size=(3, 5))
    out = fa.exact_attention(rng.normal(size=(2, 5)), np.zeros((2, 5)), V)
    assert np.allclose(out, np.repeat(V.mean(axis=1, keepdims=True), 5, axis=1), atol=1e-15)


def test_exact_matches_naive_and_blocks():
    rng = stream(0, "exact-naive")
    for _ in range(20):
        d, n = int(rng.integers(1, 5)), int(rng.integers(1, 12))
        Q, K, V = (rng.uniform(-2, 2, (d, n)) for _ in range(3))
        ref = naive_attention(Q, K, V)
        assert np.max(np.abs(fa.exact_attention(Q, K, V) - ref)) <= 1e-12
        assert np.max(np.abs(fa.exact_attention(Q, K, V, block=3) - ref)) <= 1e-12


def test_exact_shape_mismatch():
    with pytest.raises(ValueError):
        fa.exact_attention(np.zeros((2, 3)), np.zeros((3, 3)), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        fa.exact_attention(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((1, 4)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 20), st.integers(0, 10 ** 6))
def test_exact_convex_envelope(d, n, seed):
    rng = np.random.default_rng(seed)
    Q, K, V = (rng.uniform(-3, 3, (d, n)) for _ in range(3))
    out = fa.exact_attention(Q, K, V)
    lo = V.min(axis=1, keepdims=True) - 1e-12
    hi = V.max(axis=1, keepdims=True) + 1e-12
    assert np.all(out >= lo) and np.all(out <= hi)


def test_feature_map_examples():
    assert np.array_equal(fa.taylor_feature_map([0.3, -2.0], 0), [1.0])
    a, b = 0.7, -1.3
    assert np.allclose(fa.taylor_feature_map([a, b], 1), [1, a, b])
    x = 1.7
    assert np.allclose(fa.taylor_feature_map([x], 2), [1, x, x * x / math.sqrt(2)])
    rng = stream(1, "scalar-taylor")
    for _ in range(50):
        q, k = rng.uniform(-2, 2, 2)
        ip = fa.taylor_feature_map([q], 2) @ fa.taylor_feature_map([k], 2)
        assert ip == pytest.approx(1 + q * k + (q * k) ** 2 / 2, abs=1e-13)


def test_feature_dim_counts_monomials():
    for d in range(1, 6):
        for g in range(0, 6):
            assert fa.feature_dim(d, g) == fa.taylor_feature_map(np.ones(d), g).size
            count = sum(math.comb(k + d - 1, d - 1) for k in range(g + 1))
            assert fa.feature_dim(d, g) == count


def test_kernel_identity_random_pairs():
    rng = stream(2, "kernel-id")
    total = 0
    for d in (1, 2, 4, 8, 16):
        for g in (0, 1, 2, 4, 7, 10):
            m = fa.feature_dim(d, g)
            pairs = max(4, min(2000, 2_000_000 // m))
            Q = rng.uniform(-1, 1, (d, pairs)) / math.sqrt(d)
            K = rng.uniform(-1, 1, (d, pairs)) / math.sqrt(d)
            ip = np.einsum("mi,mi->i", fa.taylor_features(Q, g), fa.taylor_features(K, g))
            t = np.einsum("di,di->i", Q, K)
            ref = sum(t ** i / math.factorial(i) for i in range(g + 1))
            assert np.all(np.abs(ip - ref) <= 1e-12 * np.maximum(1, np.abs(t) ** g))
            total += pairs
    assert total >= 10_000


def test_partial_sum():
    assert fa.taylor_partial_sum(2.0, 0) == 1
    assert fa.taylor_partial_sum(2.0, 3) == pytest.approx(1 + 2 + 2 + 8 / 6)


def _degree_oracle(R, tol):
    g = 0
    while R ** (g + 1) / math.factorial(g + 1) > tol * math.exp(-R):
        g += 1
    return g


def test_required_degree_examples():
    assert fa.required_degree(0, 1e-6) == 0
    assert fa.required_degree(1, 1e-6) == _degree_oracle(1, 1e-6) == 9
    assert 1 / math.factorial(10) <= 1e-6 * math.exp(-1) < 1 / math.factorial(9)
    for R in (0.1, 0.5, 2, 5, 10):
        for tol in (1e-2, 1e-4, 1e-8):
            assert fa.required_degree(R, tol) == _degree_oracle(R, tol)
    with pytest.raises(ValueError):
        fa.required_degree(-1, 0.1)
    with pytest.raises(ValueError):
        fa.required_degree(1, 1.5)


def test_required_degree_monotone():
    Rs = np.linspace(0, 20, 81)
    for tol in (1e-2, 1e-5, 1e-9):
        gs = [fa.required_degree(R, tol) for R in Rs]
        assert all(a <= b for a, b in zip(gs, gs[1:]))
    for R in (0.5, 3.0):
        gs = [fa.required_degree(R, 10.0 ** -k) for k in range(1, 12)]
        assert all(a <= b for a, b in zip(gs, gs[1:]))


def test_lowrank_matches_exact():
    rng = stream(3, "lowrank")
    for _ in range(10):
        d, n, B = int(rng.integers(1, 5)), int(rng.integers(1, 40)), 0.5
        Q, K, V = (rng.uniform(-B, B, (d, n)) for _ in range(3))
        g = fa.required_degree(d * B * B, 1e-9)
        out = fa.lowrank_attention(Q, K, V, g)
        assert np.max(np.abs(out - fa.exact_attention(Q, K, V))) <= 1e-6
        small = fa.lowrank_attention(Q, K, V, g, block_elems=1)
        assert np.allclose(small, out, atol=1e-13)


def test_lowrank_uniform_cases():
    rng = np.random.default_rng(4)
    Q, K, V = (rng.normal(size=(3, 7)) for _ in range(3))
    avg = np.repeat(V.mean(axis=1, keepdims=True), 7, axis=1)
    for g in (0, 1, 3):
        assert np.allclose(fa.lowrank_attention(Q, np.zeros((3, 7)), V, g), avg, atol=1e-14)
    assert np.allclose(fa.lowrank_attention(Q, K, V, 0), avg, atol=1e-14)


def test_lowrank_degree_too_small():
    Q = np.array([[-5.0]])
    K = np.array([[5.0]])
    with pytest.raises(fa.DegreeTooSmall) as e:
        fa.lowrank_attention(Q, K, np.ones((1, 1)), 1)
    assert e.value.column == 0


def test_lowrank_error_nonincreasing_in_degree():
    rng = stream(5, "mono-deg")
    for _ in range(10):
        d, n, B = 4, 64, 0.7
        Q, K, V = (rng.uniform(-B, B, (d, n)) for _ in range(3))
        Z = fa.exact_attention(Q, K, V)
        g0 = fa.required_degree(d * B * B, 1e-3)
        errs = [np.abs(fa.lowrank_attention(Q, K, V, g) - Z).max() for g in range(g0, g0 + 6)]
        assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


def test_normalizer_positive_on_random_instances():
    rng = stream(6, "positivity")
    for _ in range(1000):
        d, n = int(rng.integers(1, 5)), int(rng.integers(1, 10))
        B = float(rng.uniform(0.1, 1.5))
        Q, K, V = (rng.uniform(-B, B, (d, n)) for _ in range(3))
        fa.lowrank_attention(Q, K, V, fa.required_degree(d * B * B, 0.25))


def test_solve_apti_certified():
    inst = fa.random_instance(256, 8, 0.5, 1e-3, 0)
    Zt, cert = fa.solve_apti(inst)
    assert cert["certified"] and cert["max_err"] <= 1e-3
    assert cert["g"] == fa.required_degree(8 * 0.25, 1e-3 / 4)
    assert cert["m"] == fa.feature_dim(8, cert["g"])
    _, cert = fa.solve_apti(inst, oracle_cutoff=100)
    assert not cert["certified"] and cert["max_err"] is None


def test_solve_apti_zero_values_and_validation():
    rng = np.random.default_rng(7)
    inst = fa.AptiInstance(rng.uniform(-1, 1, (2, 9)), rng.uniform(-1, 1, (2, 9)),
                           np.zeros((2, 9)), 1.0, 1e-3)
    Zt, cert = fa.solve_apti(inst)
    assert np.all(Zt == 0) and cert["max_err"] == 0
    with pytest.raises(ValueError):
        fa.AptiInstance(np.full((1, 2), 2.0), np.zeros((1, 2)), np.zeros((1, 2)), 1.0, 1e-3)
    with pytest.raises(ValueError):
        fa.AptiInstance(np.zeros((1, 2)), np.zeros((1, 3)), np.zeros((1, 3)), 1.0, 1e-3)


def test_large_entry_bound_grows_features():
    # d B^2 = 40
    g = fa.required_degree(40, 1e-3 / 4)
    m = fa.feature_dim(8, g)
    assert g > 60 and m > 2048


def _small_bench(**kw):
    return fa.phase_bench([32, 64], [0.25, 0.5, 1.0], ("fixed", 3), 1e-3, (0,), reps=1, **kw)


def test_phase_bench_records():
    recs = _small_bench()
    assert [(r.n, r.B) for r in recs] == sorted((r.n, r.B) for r in recs)
    low = [r for r in recs if r.method == "lowrank"]
    assert len(low) == 6 and all(r.certified for r in low)
    for n in (32, 64):
        ms = [r.m for r in low if r.n == n]
        assert all(a <= b for a, b in zip(ms, ms[1:]))
    exact = [r for r in recs if r.method == "exact"]
    assert all(r.max_err is None and r.g is None for r in exact)


def test_phase_bench_budget_and_exact_only():
    recs = _small_bench(max_features=10)
    low = [r for r in recs if r.method == "lowrank"]
    assert all(r.wall_time_s is None and r.status.startswith("skipped") for r in low)
    assert fa.crossover(recs, 32) == 0.25
    recs = _small_bench(methods=("exact",))
    assert {r.method for r in recs} == {"exact"}
    with pytest.raises(ValueError):
        fa.phase_bench([], [1.0])


def test_csv_and_jsonl():
    recs = [fa.BenchRecord(8, 2, 0.5, "exact", wall_time_s=0.25),
            fa.BenchRecord(8, 2, 0.5, "lowrank", g=3, m=10, wall_time_s=0.5,
                           max_err=1e-5, certified=True)]
    lines = fa.records_to_csv(recs).splitlines()
    assert lines[0] == "n,d,B,method,g,m,wall_time_s,max_err,certified"
    assert lines[1] == "8,2,0.5,exact,,,0.25,,"
    assert lines[2] == "8,2,0.5,lowrank,3,10,0.5,1e-05,true"
    rows = [json.loads(l) for l in fa.records_to_jsonl(recs).splitlines()]
    assert rows[1]["m"] == 10 and rows[0]["certified"] is None


def test_crossover_and_slope():
    recs = [fa.BenchRecord(100, 2, B, "exact", wall_time_s=1.0) for B in (1, 2, 3)]
    recs += [fa.BenchRecord(100, 2, B, "lowrank", wall_time_s=t) for B, t in ((1, 0.1), (2, 1.5), (3, 9.0))]
    assert fa.crossover(recs, 100) == 2
    assert fa.crossover(recs[:3] + recs[3:4], 100) is None
    ns = [256, 512, 1024]
    assert fa.loglog_slope(ns, [n ** 2 * 1e-9 for n in ns]) == pytest.approx(2.0)


def test_resolve_d():
    assert fa.resolve_d(("fixed", 8), 1000) == 8
    assert fa.resolve_d(("c_log_n", 1.0), 2048) == math.ceil(math.log(2048))
    with pytest.raises(ValueError):
        fa.resolve_d(("log", 1), 10)


def test_random_instance_deterministic():
    a = fa.random_instance(16, 3, 0.5, 1e-3, 4)
    b = fa.random_instance(16, 3, 0.5, 1e-3, 4)
    assert np.array_equal(a.Qp, b.Qp) and np.array_equal(a.Vp, b.Vp)
    assert np.abs(a.Kp).max() <= 0.5
