import math

import numpy as np
import pytest

from oracles import E_INV
from spatial_aloha.experiments import (
    boundary_repulsion_check,
    convergence_rate_probe,
    drain_growth_check,
    fluid_limit_convergence,
    lambda_sweep,
    truncation_level,
    tv_distance,
)
from spatial_aloha.fluid import FluidParams, integrate
from spatial_aloha.graph import GraphError, cycle, from_edges, torus
from spatial_aloha.protocol import ArrivalModel, scaled_path, simulate


def tv_oracle(a, b):
    """Exact-state TV without truncation, via Python dictionaries."""
    from collections import Counter

    ca, cb = Counter(map(tuple, a)), Counter(map(tuple, b))
    keys = set(ca) | set(cb)
    return 0.5 * sum(abs(ca[s] / len(a) - cb[s] / len(b)) for s in keys)


def test_tv_distance_against_oracle():
    rng = np.random.default_rng(0)
    a = rng.poisson(1.0, size=(500, 3))
    b = rng.poisson(1.3, size=(700, 3))
    assert math.isclose(tv_distance(a, b), tv_oracle(a, b), abs_tol=1e-12)
    assert tv_distance(a, a) == 0.0
    # truncation can only merge bins, so it never increases the distance
    assert tv_distance(a, b, q=2) <= tv_distance(a, b) + 1e-12
    disjoint = tv_distance(np.zeros((5, 2), int), np.ones((5, 2), int))
    assert disjoint == 1.0


def test_truncation_level():
    states = np.array([[0, 0], [1, 0], [1, 1], [3, 2]] * 25)
    assert truncation_level(states, 0.75) == 2
    assert truncation_level(states, 0.99) == 5


def test_fluid_limit_small_scales():
    rec = fluid_limit_convergence(cycle(4), 0.1, np.ones(4), scales=(50, 500), T=3.0, reps=8, seed=2)
    assert rec.median_distance[1] < rec.median_distance[0]
    assert all(d >= 0 for row in rec.distances for d in row)
    assert rec.norms == [48, 500]  # round(12.5) is 12 under banker's rounding
    with pytest.raises(ValueError):
        fluid_limit_convergence(cycle(4), 0.1, [1, 0, 0, 0], scales=(10,))
    with pytest.raises(ValueError):
        fluid_limit_convergence(cycle(4), 0.1, np.ones(4), scales=(100, 10))


def test_deterministic_arrivals_follow_diagonal():
    g = cycle(4)
    lam = 0.05
    gaps = []
    for s in (400, 4000):
        w0 = np.full(4, s // 4)
        tr = simulate(g, ArrivalModel.of("deterministic", lam, 4), s * 2, seed=1, initial=w0)
        times = np.linspace(0, 2, 21)
        x = scaled_path(tr, s, times)
        z = integrate(np.full(4, 0.25), FluidParams(g, lam, horizon=2), t_eval=times).at(times)
        gaps.append(np.abs(x - z).sum(axis=1).max())
    # service stays random, so the gap shrinks like s^-1/2 rather than 1/s
    assert gaps[1] < gaps[0]
    assert gaps[1] < 0.05


def test_beyond_drain_time_gap_small():
    rec = fluid_limit_convergence(cycle(4), 0.05, np.ones(4), scales=(2000,), T=10.0, reps=4, seed=1)
    assert rec.median_distance[0] < 0.05


def test_lambda_sweep_labels_and_slopes():
    g = cycle(4)
    thr = E_INV / 3
    res = lambda_sweep(g, [0.16, 0.06, thr], slots=30_000, reps=2, seed=3)
    assert res.lam_grid == sorted(res.lam_grid)
    assert res.labels[1].startswith("critical")
    assert abs(res.slope[0]) < 0.01
    assert abs(res.slope[2] - 4 * (0.16 - thr)) < 0.1 * 4 * (0.16 - thr)
    assert math.isclose(res.local_threshold, 5 / 27 * E_INV)
    with pytest.raises(GraphError):
        lambda_sweep(from_edges(3, [(0, 1), (1, 2)]), [0.1], slots=100)


def test_lambda_sweep_small_rate_empties():
    res = lambda_sweep(cycle(4), [0.001], slots=20_000, reps=2, seed=0)
    assert res.time_avg_total[0] < 1
    assert res.return_fraction[0] == 1.0


def test_sweep_growth_from_large_diagonal_start():
    g = cycle(4)
    lam = 0.2
    res = lambda_sweep(g, [lam], slots=100_000, reps=2, seed=5, initial=np.full(4, 2500))
    expect = 4 * (lam - E_INV / 3)
    assert abs(res.slope[0] - expect) <= 0.1 * expect


def test_boundary_repulsion():
    rep = boundary_repulsion_check(cycle(4), 0.1, T=3.0)
    assert rep.all_positive
    assert math.isclose(rep.K1, 19) and math.isclose(rep.K2, 0.05)
    for r in rep.records:
        assert r.first_sample_min > 0
        assert r.lemma_violations == 0 and r.lemma_checks > 0
        assert all(v is None or v > 0 for v in r.envelope.values())
    with pytest.raises(ValueError):
        boundary_repulsion_check(cycle(4), [0.1, 0.0, 0.1, 0.1])


def test_diagonal_symmetry_preserved():
    traj = integrate(np.full(4, 0.25), FluidParams(cycle(4), 0.1, horizon=5), t_eval=np.linspace(0, 5, 11))
    spread = traj.z.max(axis=1) - traj.z.min(axis=1)
    assert np.all(spread < 1e-15)


def test_drain_growth_regimes():
    g = cycle(4)
    rng = np.random.default_rng(0)
    sub = drain_growth_check(g, 0.1, [rng.dirichlet(np.ones(4)) for _ in range(5)])
    assert sub.regime == "subcritical" and sub.all_ok
    sup = drain_growth_check(g, 0.2, [np.full(4, 0.25) * (1 + 0.01 * rng.standard_normal(4))])
    assert sup.regime == "supercritical" and sup.all_ok
    rec = sup.records[0]
    assert rec.growth_rel_error < 0.01 and rec.phi_error < 1e-3
    with pytest.raises(ValueError):
        drain_growth_check(g, E_INV / 3, [np.ones(4)])
    with pytest.raises(ValueError):
        drain_growth_check(g, [0.1, 0.1, 0.1, 0.2], [np.ones(4)])


def test_growth_on_torus_off_diagonal_start():
    # local threshold <= e^-1/V, so every supercritical rate is asserted
    g = torus(3, 3)
    v = 5
    lam = E_INV / v + 0.01
    rep = drain_growth_check(g, lam, [np.linspace(0.5, 1.5, 9)])
    assert rep.regime == "supercritical"
    assert rep.records[0].asserted
    assert rep.records[0].phi_error < 1e-3


def test_rate_probe_small():
    g = cycle(4)
    arr = ArrivalModel.of("poisson", 0.08, 4)
    rep = convergence_rate_probe(g, arr, checkpoints=(50, 2000), reps=400, seed=1,
                                 ref_window=2000, ref_every=100, n_boot=50)
    assert rep.tv[0] > rep.tv[1]
    assert rep.non_increasing
    assert rep.tv[1] < rep.noise_floor + 4 * rep.noise_floor_sd + 0.05


def test_rate_probe_preconditions():
    g = cycle(4)
    with pytest.raises(ValueError, match="hypothesis"):
        convergence_rate_probe(g, ArrivalModel.of("deterministic", 0.0, 4))
    with pytest.raises(ValueError, match="hypothesis"):
        convergence_rate_probe(g, ArrivalModel.of("deterministic", 0.05, 4))
    with pytest.raises(ValueError):
        convergence_rate_probe(g, ArrivalModel.of("poisson", 0.2, 4))


def test_reference_against_itself():
    rng = np.random.default_rng(4)
    ref = rng.poisson(0.5, size=(20_000, 4))
    sub = ref[rng.choice(len(ref), 2000, replace=False)]
    q = truncation_level(ref)
    floor = [tv_distance(ref[rng.choice(len(ref), 2000, replace=False)], ref, q) for _ in range(30)]
    assert tv_distance(sub, ref, q) < np.mean(floor) + 4 * np.std(floor)
