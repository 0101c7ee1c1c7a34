import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import success_prob_enumerated
from spatial_aloha.graph import E_INV, complete, cycle, random_regular, torus
from spatial_aloha.protocol import (
    ArrivalModel,
    CountOverflowError,
    analytic_drift,
    check_trace_invariants,
    empirical_drift,
    scaled_path,
    simulate,
    simulate_batch,
    step,
    step_mixture,
)


def test_arrival_model_validation():
    with pytest.raises(ValueError, match="mismatch"):
        ArrivalModel.of("zero", 0.5, 1)
    with pytest.raises(ValueError):
        ArrivalModel.of("poisson", 0.0, 4)
    with pytest.raises(ValueError):
        ArrivalModel.of("bernoulli", 1.5, 2)
    with pytest.raises(ValueError):
        ArrivalModel("broadcast", (0.1, 0.2))
    with pytest.raises(ValueError):
        ArrivalModel.of("gamma", 0.1, 2)
    assert ArrivalModel.of("zero", 0.0, 3).prob_all_zero() == 1.0


def test_deterministic_arrivals_pattern():
    arr = ArrivalModel.of("deterministic", 0.25, 2)
    a = arr.draw(np.random.default_rng(0), 8)
    assert a[:, 0].tolist() == [0, 0, 0, 1, 0, 0, 0, 1]
    assert a.sum() == 4
    assert math.isclose(arr.prob_all_zero(), 0.75, abs_tol=1e-3)


def test_arrival_means():
    rng = np.random.default_rng(1)
    for fam in ("poisson", "bernoulli", "broadcast"):
        a = ArrivalModel.of(fam, 0.3, 3).draw(rng, 200_000)
        assert np.allclose(a.mean(axis=0), 0.3, atol=4 * math.sqrt(0.3 / 200_000))
    b = ArrivalModel.of("broadcast", 0.3, 3).draw(rng, 100)
    assert np.all(b == b[:, :1])


def test_step_trivial_cases():
    rng = np.random.default_rng(0)
    g = cycle(4)
    zero = ArrivalModel.of("zero", 0.0, 4)
    w, out = step(np.zeros(4, dtype=int), g, zero, rng)
    assert w.tolist() == [0, 0, 0, 0] and out.attempts.sum() == 0
    for _ in range(20):
        w, out = step([1, 0, 0, 0], g, zero, rng)
        assert out.successes.tolist() == [1, 0, 0, 0]
        assert w.tolist() == [0, 0, 0, 0]
    w, out = step([1], complete(1), zero, rng)
    assert out.attempts.tolist() == [1] and out.successes.tolist() == [1]
    arr = ArrivalModel.of("poisson", 0.5, 4)
    w, out = step(np.zeros(4, dtype=int), g, arr, rng)
    assert np.array_equal(w, out.arrivals)


def test_step_success_law_matches_enumeration():
    g = cycle(4)
    nb = [set(s) for s in g.neighborhoods]
    x = [2, 1, 3, 0]
    zero = ArrivalModel.of("zero", 0.0, 4)
    rng = np.random.default_rng(3)
    n = 20_000
    succ = np.zeros(4)
    att = np.zeros(4)
    for _ in range(n):
        _, out = step(x, g, zero, rng)
        succ += out.successes
        att += out.attempts
    p = success_prob_enumerated(x, nb)
    se = np.sqrt(p * (1 - p) / n) + 1e-12
    assert np.all(np.abs(succ / n - p) <= 4 * se)
    s = g.matrix @ np.array(x, float)
    expect = np.array(x) / np.where(s > 0, s, 1)
    assert np.allclose(att / n, expect, atol=0.02)


def test_analytic_drift_examples():
    g = cycle(4)
    d = analytic_drift([0, 3, 1, 2], g, 0.1)
    assert d[0] == 0.1
    for c in (1, 3, 10):
        v = 3
        expect = 0.1 - (1 / v) * (1 - 1 / (v * c)) ** (v * c - 1)
        assert np.allclose(analytic_drift(np.full(4, c), g, 0.1), expect, rtol=1e-13)


@pytest.mark.parametrize("x", [(0, 0, 0, 0), (5, 0, 2, 1), (4, 4, 4, 4), (1, 0, 1, 0)])
def test_batch_drift_matches_analytic(x):
    g = cycle(4)
    arr = ArrivalModel.of("poisson", 0.1, 4)
    mean, se = empirical_drift(x, g, arr, 40_000, seed=sum(x) + 11)
    assert np.all(np.abs(mean - analytic_drift(x, g, 0.1)) <= 4 * se + 1e-12)


def test_sequential_and_batch_agree_in_law():
    g = torus(3, 3)
    arr = ArrivalModel.of("bernoulli", 0.05, 9)
    a = simulate_batch(g, arr, 200, 400, seed=1, initial=np.full(9, 3), record_slots=[200])
    tot_batch = a.states[:, 0, :].sum(axis=1)
    tot_seq = np.array([simulate(g, arr, 200, seed=s, initial=np.full(9, 3)).states[-1].sum()
                        for s in range(400)])
    diff = tot_batch.mean() - tot_seq.mean()
    se = math.sqrt(tot_batch.var(ddof=1) / 400 + tot_seq.var(ddof=1) / 400)
    assert abs(diff) <= 4 * se


def test_determinism():
    g = cycle(5)
    arr = ArrivalModel.of("poisson", 0.08, 5)
    t1 = simulate(g, arr, 500, seed=42, initial=[3, 0, 1, 0, 2])
    t2 = simulate(g, arr, 500, seed=42, initial=[3, 0, 1, 0, 2])
    for name in ("states", "arrivals", "attempts", "successes"):
        assert np.array_equal(getattr(t1, name), getattr(t2, name))
    t3 = simulate(g, arr, 500, seed=43, initial=[3, 0, 1, 0, 2])
    assert not np.array_equal(t1.states, t3.states)
    b1 = simulate_batch(g, arr, 50, 10, seed=5, record_slots=[10, 50])
    b2 = simulate_batch(g, arr, 50, 10, seed=5, record_slots=[10, 50])
    assert np.array_equal(b1.states, b2.states)


def test_zero_arrivals_absorbed():
    for g in (cycle(4), complete(3), random_regular(6, 3, seed=1)):
        k = g.node_count
        tr = simulate(g, ArrivalModel.of("zero", 0.0, k), 3, seed=0, initial=[1] + [0] * (k - 1))
        assert tr.states[0].sum() == 0
        assert tr.zero_visits >= 1


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), lam=st.floats(0.01, 0.4), k=st.integers(3, 7),
       init=st.lists(st.integers(0, 6), min_size=7, max_size=7))
def test_trace_invariants_property(seed, lam, k, init):
    g = cycle(k)
    tr = simulate(g, ArrivalModel.of("poisson", lam, k), 300, seed=seed, initial=init[:k])
    check_trace_invariants(tr, g)
    assert np.all(tr.successes <= (tr.attempts == 1))
    assert np.all(tr.states >= 0)


def test_invariant_checker_detects_tampering():
    g = cycle(4)
    tr = simulate(g, ArrivalModel.of("poisson", 0.2, 4), 200, seed=3, initial=[2, 2, 2, 2])
    tr.states[50, 0] += 1
    with pytest.raises(AssertionError, match="conservation"):
        check_trace_invariants(tr, g)


def test_mixture_step_and_simulation():
    rng = np.random.default_rng(2)
    arr = ArrivalModel.of("poisson", 0.1, 4)
    w, out = step_mixture(np.zeros(4, dtype=int), [cycle(4), complete(4)], [0.5, 0.5], arr, rng)
    assert np.array_equal(w, out.arrivals)
    from spatial_aloha.graph import GraphMixture

    mix = GraphMixture((cycle(4), complete(4)), (0.5, 0.5))
    tr = simulate(mix, arr, 20_000, seed=9, initial=[3, 3, 3, 3])
    check_trace_invariants(tr, mix)
    freq = tr.graph_index.mean()
    assert abs(freq - 0.5) <= 3 * math.sqrt(0.25 / 20_000)
    single = GraphMixture((cycle(4),), (1.0,))
    t1 = simulate(single, arr, 100, seed=4)
    assert np.all(t1.graph_index == 0)


def test_count_overflow_partial_trace():
    g = cycle(4)
    with pytest.raises(CountOverflowError) as info:
        simulate(g, ArrivalModel.of("poisson", 2.0, 4), 1000, seed=0, count_limit=50)
    tr = info.value.trace
    assert tr is not None and tr.aborted
    assert tr.n_slots < 1000


def test_scaled_path():
    g = cycle(4)
    tr = simulate(g, ArrivalModel.of("zero", 0.0, 4), 100, seed=0, initial=[20, 10, 5, 5])
    times = np.linspace(0, 2, 41)
    x = scaled_path(tr, 40, times)
    assert math.isclose(x[0].sum(), 1.0)
    assert np.all(np.diff(x, axis=0) <= 0)
    with pytest.raises(ValueError):
        scaled_path(tr, 40, [5.0])


def test_scaled_path_increment_bound():
    g = cycle(4)
    arr = ArrivalModel.of("poisson", 0.1, 4)
    tr = simulate(g, arr, 4000, seed=8, initial=[300, 100, 400, 200])
    norm = 1000
    times = np.linspace(0, 4, 401)
    x = scaled_path(tr, norm, times)
    k = 4
    for i in range(len(times) - 1):
        s, t = times[i], times[i + 1]
        lo, hi = math.ceil(norm * s - 1e-9), math.ceil(norm * t - 1e-9)
        arrivals = tr.arrivals[lo:hi].sum() / norm
        inc = np.abs(x[i + 1] - x[i]).sum()
        assert inc <= arrivals + k * (t - s + 1 / norm) + 1e-12


def test_long_run_window_means_stabilise():
    g = cycle(4)
    tr = simulate(g, ArrivalModel.of("poisson", 0.08, 4), 200_000, seed=1, thinning=10)
    tot = tr.states.sum(axis=1).astype(float)
    windows = tot[1:].reshape(4, -1).mean(axis=1)
    assert np.ptp(windows) < 0.5 * windows.mean()
    assert tr.time_avg_total < 5
    assert np.all(tr.throughput > 0.06) and np.all(tr.throughput < 0.1)


def test_trace_exports(tmp_path):
    import json

    tr = simulate(cycle(4), ArrivalModel.of("poisson", 0.1, 4), 30, seed=0, thinning=7)
    tr.to_jsonl(tmp_path / "t.jsonl")
    tr.summary_csv(tmp_path / "s.csv")
    rows = [json.loads(l) for l in (tmp_path / "t.jsonl").read_text().splitlines()]
    assert [r["n"] for r in rows] == [1, 8, 15, 22, 29, 30]
    assert set(rows[0]) == {"n", "W", "N", "S", "A", "graph_index"}
    assert tr.summary()["slots"] == 30
    assert E_INV > 0
