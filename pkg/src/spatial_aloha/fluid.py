"""Deterministic fluid model of the workload and its numerical integration."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .graph import E_INV, Graph, GraphError, GraphMixture

log = logging.getLogger(__name__)


def _as_rates(lam, k: int) -> np.ndarray:
    rates = np.broadcast_to(np.asarray(lam, dtype=float), (k,)).copy()
    return rates


def neighborhood_sums(z, g: Graph) -> np.ndarray:
    return g.matrix @ np.asarray(z, dtype=float)


def phi(z, g: Graph) -> np.ndarray:
    """Local share ``phi_i(z) = z_i / sum_{j in V_i} z_j`` (0 where ``z_i = 0``)."""
    z = np.asarray(z, dtype=float)
    s = g.matrix @ z
    out = np.zeros_like(z)
    np.divide(z, s, out=out, where=z > 0)
    return out


def g_tilde(z, g: Graph) -> np.ndarray:
    """Large-workload success probability ``phi_i exp(-sum_{j in V_i} phi_j)``."""
    p = phi(z, g)
    return p * np.exp(-(g.matrix @ p))


def g_exact(x, g: Graph) -> np.ndarray:
    """Exact per-slot success probability of node i at workload ``x``.

    ``G_i(x) = (x_i/s_i)(1 - 1/s_i)^(x_i - 1) prod_{j in V_i, j != i} (1 - 1/s_j)^(x_j)``
    with ``s_i`` the neighbourhood sum; ``G_i = 0`` when ``x_i = 0``.
    """
    x = np.asarray(x, dtype=float)
    s = g.matrix @ x
    k = len(x)
    # log(1 - 1/s_j); -inf at s_j == 1, unused where s_j == 0
    log_keep = np.full(k, -np.inf)
    big = s > 1.0
    log_keep[big] = np.log1p(-1.0 / s[big])
    if np.any((s > 0) & (s < 1.0) & (x > 0)):
        raise ValueError("g_exact needs every positive neighbourhood sum to be >= 1")

    def power(j, e):
        if e == 0:
            return 0.0
        return e * log_keep[j]

    out = np.zeros(k)
    for i in range(k):
        if x[i] <= 0:
            continue
        logval = math.log(x[i] / s[i]) + power(i, x[i] - 1.0)
        for j in g.neighborhoods[i]:
            if j != i:
                logval += power(j, x[j])
        out[i] = math.exp(logval) if logval > -np.inf else 0.0
    return out


def empty_neighborhoods(z, g: Graph) -> list[int]:
    """Nodes whose whole closed neighbourhood is empty."""
    return [int(i) for i in np.flatnonzero(neighborhood_sums(z, g) <= 0)]


def fluid_rhs(z, g: Graph | GraphMixture, lam) -> np.ndarray:
    """Right-hand side ``lam_i - G~_i(z)`` of the fluid ODE.

    Coordinates whose neighbourhood is entirely empty get ``lam_i`` (the
    continuous extension of the ``z_i = 0`` case).
    """
    if isinstance(g, GraphMixture):
        return fluid_rhs_mixture(z, g.graphs, g.probs, lam)
    z = np.asarray(z, dtype=float)
    return _as_rates(lam, len(z)) - g_tilde(z, g)


def fluid_rhs_mixture(z, graphs, probs, lam) -> np.ndarray:
    mix = GraphMixture(tuple(graphs), tuple(probs))
    z = np.asarray(z, dtype=float)
    if len(z) != mix.node_count:
        raise GraphError("state length does not match the mixture node count")
    served = sum(p * g_tilde(z, g) for p, g in zip(mix.probs, mix.graphs))
    return _as_rates(lam, len(z)) - served


class LyapunovValue(NamedTuple):
    value: float
    bound: float


def throughput_ratio(z, g: Graph) -> float:
    """``sum_i z_i G~_i(z) / sum_k z_k``; at least ``e^-1/V`` on a regular graph."""
    z = np.asarray(z, dtype=float)
    return float(z @ g_tilde(z, g) / z.sum())


def lyapunov_derivative(z, g: Graph, lam: float) -> LyapunovValue:
    """Time derivative of ``sum z_i^2`` along the ODE, with the bound
    ``(lam - e^-1/V) sum z_i``.

    ``value <= bound`` holds whenever ``lam <= e^-1/V``; for larger ``lam`` only
    ``value <= 2 (lam - e^-1/V) sum z_i`` is guaranteed.
    """
    if not g.is_regular:
        raise GraphError("the Lyapunov inequality is only available for regular graphs")
    lam_arr = np.atleast_1d(np.asarray(lam, dtype=float))
    if lam_arr.size > 1 and not np.allclose(lam_arr, lam_arr[0], rtol=0, atol=0):
        raise ValueError("the Lyapunov inequality needs a symmetric arrival rate")
    lam = float(lam_arr[0])
    z = np.asarray(z, dtype=float)
    value = 2.0 * float(z @ (lam - g_tilde(z, g)))
    bound = (lam - E_INV / g.V) * float(z.sum())
    return LyapunovValue(value, bound)


@dataclass
class FluidParams:
    graph: Graph | GraphMixture
    lam: np.ndarray
    h: float | None = None
    h_min: float = 1e-12
    h_max: float = 0.5
    step_tol: float = 1e-6
    zero_tol: float = 1e-6
    horizon: float = 10.0

    def __post_init__(self):
        k = self.graph.node_count
        self.lam = _as_rates(self.lam, k)
        if np.any(self.lam <= 0):
            raise ValueError("lambda_i > 0 required")
        if self.h is None:
            self.h = 1e-3 / k
        if self.h <= 0 or self.h_min <= 0 or self.h_max < self.h_min:
            raise ValueError("step sizes must satisfy 0 < h_min <= h_max, h > 0")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")


class StepSizeError(RuntimeError):
    """Step-doubling control could not meet the tolerance above ``h_min``."""


@dataclass
class FluidTrajectory:
    t: np.ndarray
    z: np.ndarray
    event: str
    event_time: float | None
    sum_sq: np.ndarray
    sum_sq_rate: np.ndarray
    empty_neighborhood_hit: bool = False
    metadata: dict = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.z[-1]

    def at(self, times) -> np.ndarray:
        """Linear interpolation of the path (exact at integration nodes)."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        cols = [np.interp(times, self.t, self.z[:, i]) for i in range(self.z.shape[1])]
        out = np.column_stack(cols)
        # after draining the path stays at zero
        if self.event == "drained":
            out[times >= self.event_time] = 0.0
        return out

    def first_time_below(self, level: float) -> float | None:
        """First time ``|z| <= level``, linearly interpolated between samples."""
        norms = self.z.sum(axis=1)
        idx = np.flatnonzero(norms <= level)
        if idx.size == 0:
            return None
        j = int(idx[0])
        if j == 0:
            return float(self.t[0])
        t0, t1 = self.t[j - 1], self.t[j]
        n0, n1 = norms[j - 1], norms[j]
        if self.event == "drained" and j == len(self.t) - 1 and self.event_time is not None:
            t1, n1 = self.event_time, 0.0
        return float(t0 + (t1 - t0) * (n0 - level) / (n0 - n1))

    def rows(self):
        k = self.z.shape[1]
        for n, (t, z) in enumerate(zip(self.t, self.z)):
            ev = ""
            if n == len(self.t) - 1:
                ev = self.event
            yield {"t": float(t), **{f"z{i + 1}": float(z[i]) for i in range(k)},
                   "sum_sq": float(self.sum_sq[n]), "event": ev}

    def to_csv(self, path) -> None:
        rows = list(self.rows())
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.rows():
                fh.write(json.dumps(row) + "\n")


def _rk4(f, z, h):
    k1 = f(z)
    k2 = f(z + 0.5 * h * k1)
    k3 = f(z + 0.5 * h * k2)
    k4 = f(z + h * k3)
    return z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate(z0, params: FluidParams, t_eval=None) -> FluidTrajectory:
    """Classical RK4 with step-doubling control, clamped at the orthant.

    Stops when ``|z| <= zero_tol`` ("drained", time recorded by linear
    interpolation of ``|z|`` over the last step) or at ``params.horizon``.
    Steps are shortened to land exactly on every time in ``t_eval``.
    """
    z = np.asarray(z0, dtype=float).copy()
    k = params.graph.node_count
    if z.shape != (k,):
        raise ValueError(f"initial state must have length {k}")
    if np.any(z < 0) or z.sum() <= 0:
        raise ValueError("initial state must be nonnegative with |z0| > 0")

    lam = params.lam
    graph = params.graph

    clamped = [False]

    def f(x):
        if np.any(x < 0):
            clamped[0] = True
        return fluid_rhs(np.maximum(x, 0.0), graph, lam)

    stops = np.array([], dtype=float) if t_eval is None else np.unique(np.asarray(t_eval, float))
    stops = stops[(stops > 0) & (stops < params.horizon)]
    stops = np.append(stops, params.horizon)
    stop_idx = 0

    graph_list = graph.graphs if isinstance(graph, GraphMixture) else (graph,)

    def empty_hit(x):
        return any(empty_neighborhoods(x, gg) for gg in graph_list)

    ts = [0.0]
    zs = [z.copy()]
    rates = [f(z)]
    hit_empty = empty_hit(z)
    t = 0.0
    h = params.h
    event = "horizon"
    event_time = None
    n_rejected = 0

    while True:
        target = stops[stop_idx]
        h_try = min(h, target - t)
        while True:
            clamped[0] = False
            full = _rk4(f, z, h_try)
            half = _rk4(f, _rk4(f, z, h_try / 2), h_try / 2)
            err = float(np.max(np.abs(full - half)))
            # a step whose stages leave the orthant is shortened unless it drains the system
            overshoot = (clamped[0] or np.any(half < 0)) and np.maximum(half, 0).sum() > params.zero_tol
            if err <= params.step_tol and (not overshoot or h_try / 2 < params.h_min):
                break
            n_rejected += 1
            h_try /= 2
            h = h_try
            if h_try < params.h_min:
                raise StepSizeError(
                    f"step-doubling disagreement {err:.3g} > {params.step_tol} at t={t:.6g} "
                    f"with h < h_min={params.h_min}"
                )
        raw = half
        t_new = t + h_try
        if abs(t_new - target) <= 1e-12 * max(1.0, target):
            t_new = target
        z_new = np.maximum(raw, 0.0)
        n_old = z.sum()
        n_raw = raw.sum()
        if z_new.sum() <= params.zero_tol:
            frac = (n_old - params.zero_tol) / (n_old - n_raw) if n_old > n_raw else 1.0
            event_time = t + min(max(frac, 0.0), 1.0) * (t_new - t)
            ts.append(t_new)
            zs.append(z_new)
            rates.append(f(z_new))
            event = "drained"
            break
        t, z = t_new, z_new
        ts.append(t)
        zs.append(z.copy())
        rates.append(f(z))
        if not hit_empty and empty_hit(z):
            hit_empty = True
        if t >= stops[stop_idx]:
            stop_idx += 1
            if stop_idx == len(stops):
                event_time = t
                break
        if err < params.step_tol / 32:
            h = min(2 * h, params.h_max)

    if hit_empty:
        log.info("whole-neighbourhood-empty state visited; rhs_i = lambda_i used there")
    zs = np.array(zs)
    rates = np.array(rates)
    return FluidTrajectory(
        t=np.array(ts),
        z=zs,
        event=event,
        event_time=event_time,
        sum_sq=np.sum(zs**2, axis=1),
        sum_sq_rate=2.0 * np.sum(zs * rates, axis=1),
        empty_neighborhood_hit=hit_empty,
        metadata={"rejected_steps": n_rejected, "accepted_steps": len(ts) - 1},
    )
