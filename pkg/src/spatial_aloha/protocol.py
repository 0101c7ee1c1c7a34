"""Exact slot-by-slot simulation of the spatial slotted-ALOHA workload chain.

In every slot each user at node ``i`` transmits with probability
``1 / sum_{j in V_i} W_j``; node ``i`` serves one user iff exactly one of its
users transmits and nobody else in ``V_i`` does. Then

    W(n) = W(n-1) + A(n) - S(n).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .graph import Graph, GraphError, GraphMixture

COUNT_LIMIT = 2**62
FAMILIES = ("poisson", "bernoulli", "deterministic", "zero", "broadcast")
_BLOCK = 4096


class CountOverflowError(RuntimeError):
    """A workload count exceeded the configured limit; ``trace`` holds the partial run."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class ArrivalModel:
    """Per-slot arrival law: i.i.d. over slots, independent over nodes
    except ``broadcast`` (one Poisson draw copied to every node).

    ``deterministic`` delivers ``floor((n+1) lam_i) - floor(n lam_i)`` users in
    slot ``n``: a fixed periodic pattern with long-run mean ``lam_i``.
    """

    family: str
    rates: tuple[float, ...]

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown arrival family {self.family!r}; choose from {FAMILIES}")
        rates = tuple(float(r) for r in self.rates)
        object.__setattr__(self, "rates", rates)
        if any(not math.isfinite(r) or r < 0 for r in rates):
            raise ValueError("arrival rates must be finite and nonnegative")
        if self.family == "zero":
            if any(r != 0 for r in rates):
                raise ValueError("the zero arrival model requires lambda = 0 (lambda/model mismatch)")
        elif self.family in ("poisson", "bernoulli", "broadcast") and any(r <= 0 for r in rates):
            raise ValueError("lambda_i > 0 required for stochastic arrival families")
        if self.family == "bernoulli" and any(r > 1 for r in rates):
            raise ValueError("Bernoulli arrival rates must be <= 1")
        if self.family == "broadcast" and len(set(rates)) > 1:
            raise ValueError("broadcast arrivals need one common rate")

    @classmethod
    def of(cls, family: str, lam, k: int) -> "ArrivalModel":
        rates = np.broadcast_to(np.asarray(lam, dtype=float), (k,))
        return cls(family, tuple(rates.tolist()))

    @property
    def k(self) -> int:
        return len(self.rates)

    def draw(self, rng: np.random.Generator, size: int, start: int = 0) -> np.ndarray:
        """Arrival vectors for slots ``start .. start+size-1`` as a (size, K) int64 array."""
        lam = np.asarray(self.rates)
        k = self.k
        if self.family == "poisson":
            return rng.poisson(lam, size=(size, k)).astype(np.int64)
        if self.family == "bernoulli":
            return (rng.random((size, k)) < lam).astype(np.int64)
        if self.family == "broadcast":
            col = rng.poisson(lam[0], size=size).astype(np.int64)
            return np.repeat(col[:, None], k, axis=1)
        if self.family == "zero":
            return np.zeros((size, k), dtype=np.int64)
        n = np.arange(start, start + size, dtype=np.float64)[:, None]
        return (np.floor((n + 1) * lam) - np.floor(n * lam)).astype(np.int64)

    def prob_all_zero(self) -> float:
        """Probability (or, for the periodic model, frequency) of a slot with no arrivals."""
        lam = np.asarray(self.rates)
        if self.family == "poisson":
            return float(np.exp(-lam.sum()))
        if self.family == "bernoulli":
            return float(np.prod(1.0 - lam))
        if self.family == "broadcast":
            return float(np.exp(-lam[0]))
        if self.family == "zero":
            return 1.0
        block = self.draw(np.random.default_rng(0), 10_000)
        return float(np.mean(block.sum(axis=1) == 0))


@dataclass(frozen=True)
class SlotOutcome:
    arrivals: np.ndarray
    attempts: np.ndarray
    successes: np.ndarray
    graph_index: int = 0


def _attempts(w, nbs, rng):
    """Binomial(W_i, 1/sum_{V_i} W) transmission attempts, 0 where W_i = 0."""
    out = [0] * len(w)
    for i, wi in enumerate(w):
        if wi:
            total = 0
            for j in nbs[i]:
                total += w[j]
            out[i] = int(rng.binomial(wi, 1.0 / total))
    return out


def _successes(n, nbs):
    out = [0] * len(n)
    for i, ni in enumerate(n):
        if ni == 1:
            ok = True
            for j in nbs[i]:
                if j != i and n[j]:
                    ok = False
                    break
            if ok:
                out[i] = 1
    return out


def step(w, g: Graph, arr: ArrivalModel, rng: np.random.Generator, slot: int = 0):
    """One slot of the chain: returns ``(W', SlotOutcome)``."""
    w_list = [int(x) for x in np.asarray(w)]
    if any(x < 0 for x in w_list) or len(w_list) != g.node_count:
        raise ValueError("workload must be a length-K vector of nonnegative integers")
    nbs = g.neighbor_lists()
    a = arr.draw(rng, 1, start=slot)[0]
    n = _attempts(w_list, nbs, rng)
    s = _successes(n, nbs)
    new = np.array(w_list, dtype=np.int64) + a - np.array(s, dtype=np.int64)
    return new, SlotOutcome(a, np.array(n, dtype=np.int64), np.array(s, dtype=np.int64))


def step_mixture(w, graphs, probs, arr: ArrivalModel, rng: np.random.Generator, slot: int = 0):
    """Draw ``eta ~ probs`` and run one slot on ``graphs[eta]``."""
    mix = GraphMixture(tuple(graphs), tuple(probs))
    eta = int(rng.choice(len(mix.graphs), p=mix.probs))
    new, out = step(w, mix.graphs[eta], arr, rng, slot)
    return new, SlotOutcome(out.arrivals, out.attempts, out.successes, graph_index=eta)


def analytic_drift(x, g: Graph, lam) -> np.ndarray:
    """Expected one-slot increment ``lam - G(x)`` from state ``x``."""
    from .fluid import g_exact

    x = np.asarray(x, dtype=float)
    return np.broadcast_to(np.asarray(lam, float), x.shape) - g_exact(x, g)


@dataclass
class Trace:
    """Recorded run. ``slots[k]`` is the slot index of row ``k``; ``states[k]`` is
    the workload after that slot. ``initial`` is ``W(0)``."""

    initial: np.ndarray
    slots: np.ndarray
    states: np.ndarray
    arrivals: np.ndarray
    attempts: np.ndarray
    successes: np.ndarray
    graph_index: np.ndarray
    n_slots: int
    thinning: int
    seed: int | None
    time_avg_total: float
    throughput: np.ndarray
    zero_visits: int
    bounded_set: int
    return_times: list[int]
    aborted: bool = False
    metadata: dict = field(default_factory=dict)

    def state_at(self, n: int) -> np.ndarray:
        if n == 0:
            return self.initial
        if n > self.n_slots:
            raise ValueError(f"trace covers {self.n_slots} slots, slot {n} requested")
        if (n - 1) % self.thinning == 0 or n == self.n_slots:
            k = np.searchsorted(self.slots, n)
            if k < len(self.slots) and self.slots[k] == n:
                return self.states[k]
        raise ValueError(f"slot {n} was not recorded (thinning={self.thinning})")

    def totals(self) -> np.ndarray:
        return self.states.sum(axis=1)

    def summary(self) -> dict:
        mean_return = float(np.mean(self.return_times)) if self.return_times else None
        return {
            "slots": self.n_slots,
            "seed": self.seed,
            "time_avg_total": self.time_avg_total,
            "throughput": self.throughput.tolist(),
            "zero_visits": self.zero_visits,
            "bounded_set_level": self.bounded_set,
            "returns_to_bounded_set": len(self.return_times),
            "mean_return_time": mean_return,
            "final_state": (self.states[-1] if len(self.states) else self.initial).tolist(),
            "aborted": self.aborted,
        }

    def rows(self):
        for k in range(len(self.slots)):
            yield {
                "n": int(self.slots[k]),
                "W": self.states[k].tolist(),
                "N": self.attempts[k].tolist(),
                "S": self.successes[k].tolist(),
                "A": self.arrivals[k].tolist(),
                "graph_index": int(self.graph_index[k]),
            }

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.rows():
                fh.write(json.dumps(row) + "\n")

    def summary_csv(self, path) -> None:
        s = self.summary()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["key", "value"])
            for key, val in s.items():
                writer.writerow([key, json.dumps(val)])


def simulate(
    g: Graph | GraphMixture,
    arr: ArrivalModel,
    slots: int,
    seed: int | None = 0,
    initial=None,
    thinning: int = 1,
    count_limit: int = COUNT_LIMIT,
) -> Trace:
    """Run the chain for ``slots`` slots and record every ``thinning``-th slot.

    Arrivals, attempts and (for mixtures) graph choices use separate child
    streams of ``SeedSequence(seed)``, so identical inputs give identical traces.
    Every slot is checked for an independent success set.
    """
    if slots < 1:
        raise ValueError("slots must be >= 1")
    if thinning < 1:
        raise ValueError("thinning must be >= 1")
    k = g.node_count
    if arr.k != k:
        raise ValueError(f"arrival model has {arr.k} rates for a {k}-node graph")
    graphs = g.graphs if isinstance(g, GraphMixture) else (g,)
    probs = g.probs if isinstance(g, GraphMixture) else (1.0,)
    nb_sets = [gg.neighbor_lists() for gg in graphs]

    w = [0] * k if initial is None else [int(x) for x in np.asarray(initial)]
    if len(w) != k or any(x < 0 for x in w):
        raise ValueError("initial workload must be a length-K nonnegative integer vector")
    init = np.array(w, dtype=np.int64)

    ss = np.random.SeedSequence(seed)
    arr_rng, att_rng, mix_rng = (np.random.default_rng(s) for s in ss.spawn(3))

    n_rec = (slots - 1) // thinning + 1 + (1 if (slots - 1) % thinning else 0)
    rec_slots = np.zeros(n_rec, dtype=np.int64)
    rec_w = np.zeros((n_rec, k), dtype=np.int64)
    rec_a = np.zeros((n_rec, k), dtype=np.int64)
    rec_n = np.zeros((n_rec, k), dtype=np.int64)
    rec_s = np.zeros((n_rec, k), dtype=np.int64)
    rec_g = np.zeros(n_rec, dtype=np.int64)

    total = sum(w)
    bound = k
    area = 0
    served = [0] * k
    zero_visits = 0
    return_times = []
    last_in = 0 if total <= bound else None
    r = 0
    aborted = False
    message = ""
    single = len(graphs) == 1

    n = 0
    while n < slots:
        size = min(_BLOCK, slots - n)
        block_a = arr.draw(arr_rng, size, start=n).tolist()
        block_g = [0] * size if single else mix_rng.choice(len(graphs), size=size, p=probs).tolist()
        for b in range(size):
            n += 1
            gi = block_g[b]
            nbs = nb_sets[gi]
            att = _attempts(w, nbs, att_rng)
            suc = _successes(att, nbs)
            a = block_a[b]
            for i in range(k):
                if suc[i]:
                    for j in nbs[i]:
                        if j != i and suc[j]:
                            raise AssertionError(f"adjacent nodes {i + 1},{j + 1} both served in slot {n}")
                    served[i] += 1
                w[i] += a[i] - suc[i]
            total = sum(w)
            area += total
            if total == 0:
                zero_visits += 1
            if total <= bound:
                if last_in is not None and n - last_in > 1:
                    return_times.append(n - last_in)
                last_in = n
            if (n - 1) % thinning == 0 or n == slots:
                rec_slots[r] = n
                rec_w[r] = w
                rec_a[r] = a
                rec_n[r] = att
                rec_s[r] = suc
                rec_g[r] = gi
                r += 1
            if total > count_limit and max(w) > count_limit:
                aborted = True
                message = f"workload count exceeded {count_limit} at slot {n}; run aborted"
                break
        if aborted:
            if r == 0 or rec_slots[r - 1] != n:
                rec_slots[r], rec_w[r], rec_a[r], rec_n[r], rec_s[r], rec_g[r] = n, w, a, att, suc, gi
                r += 1
            break

    done = n
    trace = Trace(
        initial=init,
        slots=rec_slots[:r],
        states=rec_w[:r],
        arrivals=rec_a[:r],
        attempts=rec_n[:r],
        successes=rec_s[:r],
        graph_index=rec_g[:r],
        n_slots=done,
        thinning=thinning,
        seed=seed,
        time_avg_total=area / done,
        throughput=np.array(served) / done,
        zero_visits=zero_visits,
        bounded_set=bound,
        return_times=return_times,
        aborted=aborted,
        metadata={"graph": getattr(g, "name", "mixture"), "arrivals": arr.family},
    )
    if aborted:
        trace.metadata["error"] = message
        raise CountOverflowError(message, trace)
    return trace


def scaled_path(trace: Trace, norm: float, times) -> np.ndarray:
    """Fluid-scaled path ``W(ceil(norm * t)) / norm`` at the requested times."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if norm <= 0:
        raise ValueError("norm must be positive")
    if np.any(times < 0):
        raise ValueError("times must be nonnegative")
    idx = np.ceil(norm * times - 1e-9).astype(np.int64)
    need = int(idx.max())
    if need > trace.n_slots:
        raise ValueError(f"trace too short: {need} slots required, {trace.n_slots} available")
    return np.array([trace.state_at(int(n)) for n in idx], dtype=float) / norm


@dataclass
class BatchRun:
    """Vectorised replications sharing one stream; states recorded at ``record_slots``."""

    record_slots: np.ndarray
    states: np.ndarray  # (reps, len(record_slots), K)
    time_avg_total: np.ndarray
    visited_bounded: np.ndarray  # per rep: hit {|W| <= K} after ``visit_from``
    visit_from: int
    seed: int | None


def simulate_batch(
    g: Graph,
    arr: ArrivalModel,
    slots: int,
    reps: int,
    seed: int | None = 0,
    initial=None,
    record_slots=None,
    visit_from: int = 0,
) -> BatchRun:
    """Run ``reps`` independent copies of the chain in lock-step with numpy.

    Replications share a single generator, so a batch is reproducible as a
    whole from ``(seed, reps)``. Used by the replication-heavy experiments.
    """
    k = g.node_count
    a_mat = g.matrix.astype(np.int64)
    if initial is None:
        w = np.zeros((reps, k), dtype=np.int64)
    else:
        w = np.broadcast_to(np.asarray(initial, dtype=np.int64), (reps, k)).copy()
    if np.any(w < 0):
        raise ValueError("initial workload must be nonnegative")
    rec = np.array(sorted(set(int(s) for s in (record_slots if record_slots is not None else [slots]))))
    if rec.size and (rec.min() < 0 or rec.max() > slots):
        raise ValueError("record slots must lie in [0, slots]")
    out = np.zeros((reps, rec.size, k), dtype=np.int64)
    ss = np.random.SeedSequence(seed)
    arr_rng, att_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    pos = 0
    if rec.size and rec[0] == 0:
        out[:, 0] = w
        pos = 1
    area = np.zeros(reps)
    visited = np.zeros(reps, dtype=bool)
    n = 0
    while n < slots:
        size = min(_BLOCK, slots - n)
        arrivals = np.stack([arr.draw(arr_rng, size, start=n) for _ in range(reps)], axis=1) \
            if arr.family == "deterministic" else arr.draw(arr_rng, size * reps).reshape(size, reps, k)
        for b in range(size):
            n += 1
            tot = w @ a_mat
            p = np.zeros(w.shape)
            np.divide(1.0, tot, out=p, where=tot > 0)
            att = att_rng.binomial(w, p)
            suc = (att == 1) & ((att @ a_mat) == 1)
            w += arrivals[b] - suc
            totals = w.sum(axis=1)
            area += totals
            if n >= visit_from:
                visited |= totals <= k
            if pos < rec.size and rec[pos] == n:
                out[:, pos] = w
                pos += 1
    return BatchRun(rec, out, area / max(slots, 1), visited, visit_from, seed)


def empirical_drift(x, g: Graph, arr: ArrivalModel, reps: int, seed: int | None = 0):
    """Monte-Carlo mean and standard error of ``W(1) - W(0)`` from state ``x``."""
    run = simulate_batch(g, arr, 1, reps, seed=seed, initial=x, record_slots=[1])
    inc = run.states[:, 0, :] - np.asarray(x, dtype=np.int64)
    return inc.mean(axis=0), inc.std(axis=0, ddof=1) / math.sqrt(reps)


def check_trace_invariants(trace: Trace, g: Graph | GraphMixture) -> None:
    """Raise AssertionError if any recorded slot breaks conservation or the success rule.

    Conservation across consecutive rows is only checkable with ``thinning == 1``.
    """
    graphs = g.graphs if isinstance(g, GraphMixture) else (g,)
    mats = [gg.matrix.astype(np.int64) for gg in graphs]
    if trace.thinning == 1:
        prev = np.vstack([trace.initial[None, :], trace.states[:-1]])
        bad = np.flatnonzero(np.any(trace.states != prev + trace.arrivals - trace.successes, axis=1))
        if bad.size:
            raise AssertionError(f"conservation broken at slot {int(trace.slots[bad[0]])}")
        over = np.flatnonzero(np.any(trace.attempts > prev, axis=1))
        if over.size:
            raise AssertionError(f"more attempts than users at slot {int(trace.slots[over[0]])}")
    for gi, mat in enumerate(mats):
        rows = trace.graph_index == gi
        att = trace.attempts[rows]
        suc = trace.successes[rows]
        expect = ((att == 1) & ((att @ mat) == 1)).astype(np.int64)
        if np.any(expect != suc):
            raise AssertionError("success indicator disagrees with the success rule")
        open_adj = mat - np.eye(mat.shape[0], dtype=np.int64)
        if np.any((suc @ open_adj) * suc):
            raise AssertionError("two adjacent nodes succeeded in the same slot")
    if np.any(trace.attempts < 0) or np.any(trace.successes > 1):
        raise AssertionError("attempt/success counts out of range")


__all__ = [
    "ArrivalModel",
    "BatchRun",
    "CountOverflowError",
    "GraphError",
    "SlotOutcome",
    "Trace",
    "analytic_drift",
    "check_trace_invariants",
    "empirical_drift",
    "scaled_path",
    "simulate",
    "simulate_batch",
    "step",
    "step_mixture",
]
