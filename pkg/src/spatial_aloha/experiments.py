"""Experiments tying the simulated chain to the fluid model and the stability theory."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .fluid import FluidParams, fluid_rhs, integrate, phi
from .graph import E_INV, Graph, GraphError, spectral_report
from .protocol import ArrivalModel, simulate_batch

log = logging.getLogger(__name__)


def _symmetric(lam, k):
    arr = np.broadcast_to(np.asarray(lam, dtype=float), (k,))
    if not np.all(arr == arr[0]):
        raise ValueError("a symmetric (equal) arrival rate is required")
    return float(arr[0])


def _require_regular(g: Graph):
    if not g.is_regular:
        raise GraphError(f"{g.name}: a regular graph is required")


@dataclass
class ConvergenceRecord:
    scales: list[float]
    norms: list[int]
    median_distance: list[float]
    distances: list[list[float]]
    flagged: list[int]
    reps: int
    T: float

    def decreasing(self) -> bool:
        d = self.median_distance
        return all(b < a for a, b in zip(d, d[1:]))

    def to_dict(self) -> dict:
        return dict(self.__dict__, decreasing=self.decreasing())


def fluid_limit_convergence(
    g: Graph,
    lam,
    direction,
    scales=(1e2, 1e3, 1e4),
    T: float = 5.0,
    reps: int = 20,
    seed: int | None = 0,
    grid: int = 200,
    arrivals: str = "poisson",
) -> ConvergenceRecord:
    """Sup over a time grid of the L1 gap between ``W(ceil(s t))/s`` and the ODE.

    For each scale the chain starts at ``round(scale * direction)`` and the ODE
    at the same point divided by its mass.
    """
    k = g.node_count
    direction = np.asarray(direction, dtype=float)
    if direction.shape != (k,) or np.any(direction <= 0):
        raise ValueError("direction must be a strictly positive length-K vector")
    direction = direction / direction.sum()
    scales = [float(s) for s in scales]
    if any(b <= a for a, b in zip(scales, scales[1:])):
        raise ValueError("scales must be increasing")
    lam_vec = np.broadcast_to(np.asarray(lam, dtype=float), (k,)).copy()
    arr = ArrivalModel.of(arrivals, lam_vec, k)
    times = np.linspace(0.0, T, grid + 1)
    seeds = np.random.SeedSequence(seed).spawn(len(scales))

    norms, medians, dists, flagged = [], [], [], []
    for scale, ss in zip(scales, seeds):
        w0 = np.rint(scale * direction).astype(np.int64)
        norm = int(w0.sum())
        z0 = w0 / norm
        traj = integrate(z0, FluidParams(g, lam_vec, horizon=T), t_eval=times)
        ode = traj.at(times)
        slot_idx = np.ceil(norm * times - 1e-9).astype(np.int64)
        run = simulate_batch(
            g, arr, int(slot_idx[-1]), reps,
            seed=int(ss.generate_state(1)[0]), initial=w0, record_slots=slot_idx,
        )
        pos = np.searchsorted(run.record_slots, slot_idx)
        paths = run.states[:, pos, :] / norm
        gaps = np.abs(paths - ode[None, :, :]).sum(axis=2).max(axis=1)
        live = ode.sum(axis=1) > 0
        left = np.any(np.any(paths[:, live, :] == 0, axis=2), axis=1)
        norms.append(norm)
        dists.append(gaps.tolist())
        medians.append(float(np.median(gaps)))
        flagged.append(int(left.sum()))
        if left.any():
            log.info("scale %g: %d replications touched the boundary", scale, int(left.sum()))
    return ConvergenceRecord(scales, norms, medians, dists, flagged, reps, T)


@dataclass
class SweepResult:
    lam_grid: list[float]
    time_avg_total: list[float]
    slope: list[float]
    slope_se: list[float]
    return_fraction: list[float]
    labels: list[str]
    global_threshold: float
    local_threshold: float
    slots: int
    reps: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["lambda", "time_avg_total", "slope", "slope_se", "return_fraction", "label"])
            for row in zip(self.lam_grid, self.time_avg_total, self.slope, self.slope_se,
                           self.return_fraction, self.labels):
                writer.writerow(row)


def lambda_sweep(
    g: Graph,
    lam_grid,
    slots: int = 100_000,
    reps: int = 4,
    seed: int | None = 0,
    initial=None,
    arrivals: str = "poisson",
    samples: int = 200,
) -> SweepResult:
    """Empirical stability indicators along a grid of symmetric rates.

    ``slope`` is the least-squares slope of ``|W(n)|`` over the second half of
    the run; ``return_fraction`` is the share of replications that visit
    ``{|W| <= K}`` in that half. No transience claim is made.
    """
    _require_regular(g)
    grid = sorted(float(x) for x in lam_grid)
    rep = spectral_report(g)
    k = g.node_count
    half = slots // 2
    record = np.unique(np.linspace(half, slots, samples).astype(np.int64))
    seeds = np.random.SeedSequence(seed).spawn(len(grid))
    avg, slope, slope_se, ret, labels = [], [], [], [], []
    for lam, ss in zip(grid, seeds):
        arr = ArrivalModel.of(arrivals, lam, k)
        run = simulate_batch(g, arr, slots, reps, seed=int(ss.generate_state(1)[0]),
                             initial=initial, record_slots=record, visit_from=half)
        totals = run.states.sum(axis=2).astype(float)
        x = run.record_slots.astype(float)
        per_rep = np.array([np.polyfit(x, y, 1)[0] for y in totals])
        avg.append(float(run.time_avg_total.mean()))
        slope.append(float(per_rep.mean()))
        slope_se.append(float(per_rep.std(ddof=1) / math.sqrt(reps)) if reps > 1 else float("nan"))
        ret.append(float(run.visited_bounded.mean()))
        if math.isclose(lam, rep.global_threshold, rel_tol=1e-12):
            labels.append("critical - inconclusive")
        elif lam < rep.global_threshold:
            labels.append("below e^-1/V")
        else:
            labels.append("above e^-1/V (growth reported, transience not asserted)")
    return SweepResult(grid, avg, slope, slope_se, ret, labels,
                       rep.global_threshold, rep.local_threshold, slots, reps)


@dataclass
class BoundaryRecord:
    start: list[float]
    first_sample_time: float
    first_sample_min: float
    min_over_run: float
    stays_interior: bool
    lemma_checks: int
    lemma_violations: int
    envelope: dict[float, float | None]
    empty_neighborhood_hit: bool


@dataclass
class BoundaryReport:
    lam: list[float]
    K1: float
    K2: float
    c: float
    records: list[BoundaryRecord]

    @property
    def all_positive(self) -> bool:
        return all(r.stays_interior for r in self.records)

    def to_dict(self) -> dict:
        return {
            "lam": self.lam, "K1": self.K1, "K2": self.K2, "c": self.c,
            "all_positive": self.all_positive,
            "records": [
                dict(r.__dict__, envelope={str(e): v for e, v in r.envelope.items()})
                for r in self.records
            ],
        }


def boundary_repulsion_check(
    g: Graph,
    lam,
    starts=None,
    T: float = 5.0,
    eps_values=(0.05, 0.1, 0.2),
) -> BoundaryReport:
    """Integrate from (near-)boundary starts and measure how fast they leave it.

    Per start: the smallest coordinate at the first sample after 0 and over the
    run (until draining or ``T``); how often a dominated neighbour
    (``z_i > K1 z_j``) fails to grow at rate ``K2``, with ``K1 = 2/lam_* - 1``,
    ``K2 = lam_*/2``; and the ratio ``min_i z_i / eps`` over
    ``[c eps, tau_{1-eps})``, ``c = 1/(K(1-lam_*))``, for each ``eps``.
    """
    k = g.node_count
    lam_vec = np.broadcast_to(np.asarray(lam, dtype=float), (k,)).copy()
    lam_star = float(lam_vec.min())
    if lam_star <= 0:
        raise ValueError("lambda_* = min lambda_i > 0 required")
    k1 = 2.0 / lam_star - 1.0
    k2 = lam_star / 2.0
    c = 1.0 / (k * (1.0 - lam_star))
    if starts is None:
        starts = list(np.eye(k))
    t_eval = np.unique(np.concatenate([np.geomspace(1e-6, min(1.0, T), 60), np.linspace(0, T, 501)]))
    adjacent = [(i, j) for i in range(k) for j in g.open_neighbors(i)]
    records = []
    for z0 in starts:
        z0 = np.asarray(z0, dtype=float)
        traj = integrate(z0, FluidParams(g, lam_vec, horizon=T), t_eval=t_eval)
        mask = traj.t > 0
        if traj.event == "drained":
            mask &= traj.t < traj.event_time
        mins = traj.z[mask].min(axis=1)
        checks = violations = 0
        for z in traj.z[mask]:
            rhs = fluid_rhs(z, g, lam_vec)
            for i, j in adjacent:
                if z[i] > k1 * z[j]:
                    checks += 1
                    if not rhs[j] > k2:
                        violations += 1
        envelope = {}
        for eps in eps_values:
            tau = traj.first_time_below(1.0 - eps)
            tau = traj.t[-1] if tau is None else tau
            window = (traj.t >= c * eps) & (traj.t < tau)
            envelope[float(eps)] = float(traj.z[window].min() / eps) if window.any() else None
        records.append(BoundaryRecord(
            start=z0.tolist(),
            first_sample_time=float(traj.t[mask][0]),
            first_sample_min=float(mins[0]),
            min_over_run=float(mins.min()),
            stays_interior=bool(np.all(mins > 0)),
            lemma_checks=checks,
            lemma_violations=violations,
            envelope=envelope,
            empty_neighborhood_hit=traj.empty_neighborhood_hit,
        ))
    return BoundaryReport(lam_vec.tolist(), k1, k2, c, records)


@dataclass
class DrainGrowthRecord:
    start: list[float]
    regime: str
    drain_time: float | None = None
    drain_bound: float | None = None
    max_norm_rate: float | None = None
    rate_bound: float | None = None
    growth_rel_error: float | None = None
    increment_rel_error: float | None = None
    phi_error: float | None = None
    asserted: bool = True
    ok: bool = True
    observed_phi: list[float] | None = None


@dataclass
class DrainGrowthReport:
    lam: float
    V: int
    regime: str
    records: list[DrainGrowthRecord]

    @property
    def all_ok(self) -> bool:
        return all(r.ok for r in self.records if r.asserted)

    def to_dict(self) -> dict:
        return {"lam": self.lam, "V": self.V, "regime": self.regime, "all_ok": self.all_ok,
                "records": [r.__dict__ for r in self.records]}


def drain_growth_check(
    g: Graph,
    lam,
    starts,
    T: float | None = None,
    drain_level: float = 1e-3,
    drain_margin: float = 10.0,
    rate_tol: float = 1e-3,
    growth_tol: float = 0.01,
    phi_tol: float = 1e-3,
) -> DrainGrowthReport:
    """Check draining below ``e^-1/V`` and linear growth above it.

    Subcritical: ``|z|`` reaches ``drain_level`` by ``2/eps + drain_margin`` and
    ``d/dt sqrt(sum z^2) <= -eps/2 + rate_tol`` at interior samples.
    Supercritical: ``z(T)/T`` within ``growth_tol`` (relative) of
    ``(lam - e^-1/V)`` in every coordinate and ``phi(z(T))`` within ``phi_tol``
    of ``1/V``; only asserted when the diagonal is locally stable or the start
    lies on it.
    """
    _require_regular(g)
    k = g.node_count
    lam = _symmetric(lam, k)
    rep = spectral_report(g, lam)
    V = rep.V
    glob = rep.global_threshold
    if math.isclose(lam, glob, rel_tol=1e-12):
        raise ValueError("lambda equals e^-1/V: neither regime applies")
    sub = lam < glob
    eps = abs(glob - lam)
    if T is None:
        T = 2.0 / eps + drain_margin if sub else 1e3
    records = []
    for z0 in starts:
        z0 = np.asarray(z0, dtype=float)
        traj = integrate(z0, FluidParams(g, lam, horizon=T))
        if sub:
            drain = traj.first_time_below(drain_level)
            interior = np.all(traj.z > 0, axis=1)
            rates = traj.sum_sq_rate[interior] / (2.0 * np.sqrt(traj.sum_sq[interior]))
            max_rate = float(rates.max())
            bound = 2.0 / eps + drain_margin
            ok = drain is not None and drain <= bound and max_rate <= -eps / 2 + rate_tol
            records.append(DrainGrowthRecord(
                z0.tolist(), "subcritical", drain_time=drain, drain_bound=bound,
                max_norm_rate=max_rate, rate_bound=-eps / 2 + rate_tol, ok=bool(ok),
            ))
        else:
            slope = lam - E_INV / V
            t_end = traj.t[-1]
            zt = traj.final
            growth = float(np.max(np.abs(zt / t_end - slope)) / slope)
            incr = float(np.max(np.abs((zt - z0) / t_end - slope)) / slope)
            ph = phi(zt, g)
            ph_err = float(np.max(np.abs(ph - 1.0 / V)))
            on_diag = bool(np.allclose(z0, z0.mean(), rtol=0, atol=1e-12 * z0.mean()))
            asserted = lam > rep.local_threshold or on_diag
            ok = growth <= growth_tol and ph_err <= phi_tol
            records.append(DrainGrowthRecord(
                z0.tolist(), "supercritical", growth_rel_error=growth, increment_rel_error=incr,
                phi_error=ph_err, asserted=asserted, ok=bool(ok), observed_phi=ph.tolist(),
            ))
    return DrainGrowthReport(lam, V, "subcritical" if sub else "supercritical", records)


def _state_codes(states: np.ndarray, q: int) -> np.ndarray:
    """Mixed-radix code of each state with ``|W| <= q``; heavier states get code 0."""
    states = np.asarray(states, dtype=np.int64)
    k = states.shape[1]
    if (q + 1) ** k >= 2**62:
        raise ValueError("truncation level too large for exact state binning")
    codes = states @ ((q + 1) ** np.arange(k, dtype=np.int64)) + 1
    codes[states.sum(axis=1) > q] = 0
    return codes


def _law(codes: np.ndarray, size: int) -> np.ndarray:
    return np.bincount(codes, minlength=size) / len(codes)


def tv_distance(sample_a, sample_b, q: int | None = None) -> float:
    """Total-variation distance between two empirical laws of integer state vectors.

    States with ``|W| <= q`` are binned exactly; heavier states share one bin.
    """
    a = np.asarray(sample_a, dtype=np.int64)
    b = np.asarray(sample_b, dtype=np.int64)
    if q is None:
        q = int(max(a.sum(axis=1).max(), b.sum(axis=1).max()))
    ca, cb = _state_codes(a, q), _state_codes(b, q)
    size = int(max(ca.max(), cb.max())) + 1
    return 0.5 * float(np.abs(_law(ca, size) - _law(cb, size)).sum())


def truncation_level(states, coverage: float = 0.99) -> int:
    totals = np.sort(np.asarray(states).sum(axis=1))
    return int(totals[min(len(totals) - 1, math.ceil(coverage * len(totals)) - 1)])


@dataclass
class RateProbeReport:
    checkpoints: list[int]
    tv: list[float]
    tv_se: list[float]
    noise_floor: float
    noise_floor_sd: float
    truncation: int
    tail_mass: float
    non_increasing: bool
    kendall_tau: float
    reps: int
    reference_size: int
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def convergence_rate_probe(
    g: Graph,
    arr: ArrivalModel,
    checkpoints=(100, 1000, 10_000),
    reps: int = 2000,
    seed: int | None = 0,
    initial=None,
    ref_reps: int | None = None,
    ref_window: int = 5000,
    ref_every: int = 50,
    coverage: float = 0.99,
    n_boot: int = 200,
) -> RateProbeReport:
    """Total-variation distance from the law of ``W(n)`` to a long-run reference law.

    The law at each checkpoint comes from ``reps`` replications started at
    ``initial`` (default ``10`` users per node). The reference pools states of
    an independent batch sampled every ``ref_every`` slots over ``ref_window``
    slots after a burn-in of ``max(checkpoints)``. States are binned exactly up
    to total ``Q`` (covering ``coverage`` of the reference mass).

    ``non_increasing`` allows each step up to ``3`` bootstrap standard errors
    plus the reference tail mass. Only the trend is probed; no rate is certified.
    """
    _require_regular(g)
    k = g.node_count
    if any(r <= 0 for r in arr.rates):
        raise ValueError("hypothesis violation: lambda_i > 0 required")
    if arr.family == "deterministic":
        raise ValueError("hypothesis violation: i.i.d. random arrivals required")
    if arr.prob_all_zero() <= 0:
        raise ValueError("hypothesis violation: P(no arrivals in a slot) > 0 required")
    lam = _symmetric(arr.rates, k)
    if not lam < E_INV / g.V:
        raise ValueError("the probe needs lambda < e^-1/V")
    checkpoints = sorted(int(c) for c in checkpoints)
    if initial is None:
        initial = np.full(k, 10, dtype=np.int64)
    ref_reps = reps if ref_reps is None else ref_reps
    ss_main, ss_ref, ss_boot = np.random.SeedSequence(seed).spawn(3)

    run = simulate_batch(g, arr, checkpoints[-1], reps, seed=int(ss_main.generate_state(1)[0]),
                         initial=initial, record_slots=checkpoints)
    burn = checkpoints[-1]
    ref_slots = list(range(burn + ref_every, burn + ref_window + 1, ref_every))
    ref_run = simulate_batch(g, arr, ref_slots[-1], ref_reps, seed=int(ss_ref.generate_state(1)[0]),
                             record_slots=ref_slots)
    reference = ref_run.states.reshape(-1, k)
    q = truncation_level(reference, coverage)
    tail = float(np.mean(reference.sum(axis=1) > q))

    rng = np.random.default_rng(ss_boot)
    ref_codes = _state_codes(reference, q)
    samples = [_state_codes(run.states[:, c, :], q) for c in range(len(checkpoints))]
    size = int(max(ref_codes.max(), *(c.max() for c in samples))) + 1
    ref_law = _law(ref_codes, size)

    def dist(codes):
        return 0.5 * float(np.abs(_law(codes, size) - ref_law).sum())

    tv, se = [], []
    for codes in samples:
        tv.append(dist(codes))
        boots = [dist(codes[rng.integers(0, reps, reps)]) for _ in range(n_boot)]
        se.append(float(np.std(boots, ddof=1)))
    floor = [dist(ref_codes[rng.choice(len(ref_codes), reps, replace=False)]) for _ in range(n_boot)]
    warnings = []
    support = int(np.count_nonzero(ref_law))
    if support > reps / 5:
        warnings.append(
            f"{support} distinct reference states for {reps} replications: "
            "TV estimates are biased upward; error bands widened by the tail mass"
        )
        log.warning(warnings[-1])
    ok = all(
        tv[i + 1] <= tv[i] + 3.0 * math.hypot(se[i], se[i + 1]) + tail
        for i in range(len(tv) - 1)
    )
    tau = float(stats.kendalltau(checkpoints, tv).statistic) if len(tv) > 1 else float("nan")
    return RateProbeReport(checkpoints, tv, se, float(np.mean(floor)), float(np.std(floor, ddof=1)),
                           q, tail, bool(ok), tau, reps, len(reference), warnings)
