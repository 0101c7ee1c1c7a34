"""Stability verdicts, the simplex-projected dynamics and its fixed points."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .fluid import fluid_rhs
from .graph import E_INV, Graph, GraphError, diagonal_jacobian, spectral_report

MARGINAL_BAND = 1e-8
DEDUP_TOL = 1e-6


def _symmetric_rate(lam, k: int) -> float | None:
    arr = np.broadcast_to(np.asarray(lam, dtype=float), (k,))
    return float(arr[0]) if np.all(arr == arr[0]) else None


@dataclass
class StabilityVerdict:
    lam: float | list[float]
    global_threshold: float
    fluid_stable: bool
    local_threshold: float | None
    diagonal_locally_stable: str | None
    spectral_gap: float | None
    V: int
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def classify(g: Graph, lam) -> StabilityVerdict:
    """Fluid stability (``lam < e^-1/V``) and local stability of the diagonal.

    Irregular graphs or unequal rates fall back to the sufficient condition
    ``max lam_i < e^-1 / max|V_i|``; the diagonal is then not classified.
    """
    k = g.node_count
    sym = _symmetric_rate(lam, k)
    notes = []
    if sym is None or not g.is_regular:
        lam_max = float(np.max(np.broadcast_to(np.asarray(lam, float), (k,))))
        thr = E_INV / g.max_V
        notes.append(
            "asymmetric case: sufficient condition max(lambda) < e^-1/max|V_i| used; "
            "the diagonal is not classified"
        )
        stable = lam_max < thr
        if not stable:
            notes.append("sufficient condition fails; no conclusion is drawn")
        lam_out = np.broadcast_to(np.asarray(lam, float), (k,)).tolist()
        return StabilityVerdict(lam_out, thr, stable, None, None, None, g.max_V, notes)

    rep = spectral_report(g, sym)
    glob, loc = rep.global_threshold, rep.local_threshold
    if math.isclose(sym, glob, rel_tol=1e-12):
        notes.append("lambda equals e^-1/V: critical, inconclusive")
    elif sym > glob:
        notes.append("lambda > e^-1/V: transience is conjectured only, not asserted")
    if math.isclose(sym, loc, rel_tol=1e-12, abs_tol=1e-15):
        diag = "critical"
    elif sym > loc:
        diag = "stable"
    else:
        diag = "unstable"
        notes.append("diagonal locally unstable: off-diagonal stable points may exist")
    return StabilityVerdict(sym, glob, sym < glob, loc, diag, rep.spectral_gap, rep.V, notes)


def projected_rhs(y, g: Graph, lam) -> np.ndarray:
    """Dynamics of ``psi(z) = z/|z|``: ``alpha(y) = (F - psi(y) sum F) / |y|``, ``F = lam - G~(y)``.

    On the simplex this is ``F_i - y_i sum_k F_k``. Off the simplex it is the
    exact ``D psi(y) F(phi(y))``, which is what finite differences see.
    """
    y = np.asarray(y, dtype=float)
    s = y.sum()
    f = fluid_rhs(y, g, lam)
    return (f - (y / s) * f.sum()) / s


def numeric_jacobian(fn, point, step: float = 1e-5) -> np.ndarray:
    """Centred differences; the step for coordinate j is ``step * max(1, |x_j|)``."""
    x = np.asarray(point, dtype=float)
    cols = []
    for j in range(x.size):
        h = step * max(1.0, abs(x[j]))
        e = np.zeros_like(x)
        e[j] = h
        try:
            hi = np.asarray(fn(x + e), dtype=float)
            lo = np.asarray(fn(x - e), dtype=float)
        except Exception as exc:
            raise ValueError(f"map failed at displaced point (coordinate {j}): {exc}") from exc
        if not (np.all(np.isfinite(hi)) and np.all(np.isfinite(lo))):
            raise ValueError(f"map is not finite at displaced point (coordinate {j})")
        cols.append((hi - lo) / (2 * h))
    return np.atleast_2d(np.column_stack(cols))


def tangent_basis(k: int) -> np.ndarray:
    """Orthonormal basis (K x K-1) of the hyperplane orthogonal to the ones vector."""
    q, _ = np.linalg.qr(np.column_stack([np.ones(k), np.eye(k)[:, : k - 1]]))
    return q[:, 1:]


def diagonal_alpha_jacobian(g: Graph, lam: float) -> np.ndarray:
    """Analytic Jacobian of ``projected_rhs`` at ``y0 = 1/K``.

    ``(E - J/K)(D(F o phi)(y0) - K f E)`` with ``f = lam - e^-1/V`` and
    ``D(F o phi)(y0) = K D(F o phi)(1)`` by degree-0 homogeneity. The factor
    ``K`` on ``f`` comes from the second derivative of ``psi`` at ``y0``:
    ``D^2 psi(y0)(F, .) = f (J - K E)``.
    """
    if not g.is_regular:
        raise GraphError("the diagonal spectrum is only defined for regular graphs")
    k = g.node_count
    f = lam - E_INV / g.V
    proj = np.eye(k) - np.ones((k, k)) / k
    return proj @ (k * diagonal_jacobian(g) - k * f * np.eye(k))


@dataclass
class DiagonalSpectrum:
    """``mu[i] = eta_i - (lam - e^-1/V)``: eigenvalues of ``D(F o phi)(1) - f E``.

    ``mu[0] = e^-1/V - lam`` belongs to the ones vector. The tangent-space
    eigenvalues of the projected Jacobian at ``1/K`` are ``K * mu[1:]``.
    """

    lam: float
    mu: list[float]
    tangent: list[float]
    locally_stable: bool
    threshold: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def diagonal_spectrum(g: Graph, lam: float) -> DiagonalSpectrum:
    if not g.is_regular:
        raise GraphError("the diagonal spectrum is only defined for regular graphs")
    rep = spectral_report(g, lam)
    f = lam - E_INV / rep.V
    mu = [eta - f for eta in rep.eta]
    k = g.node_count
    tangent = [k * m for m in mu[1:]]
    return DiagonalSpectrum(
        lam=lam,
        mu=mu,
        tangent=tangent,
        locally_stable=bool(max(mu[1:], default=-1.0) < 0),
        threshold=rep.local_threshold,
    )


def classify_eigenvalues(eigs) -> str:
    re = np.real(np.asarray(eigs))
    top = float(re.max())
    if -MARGINAL_BAND < top < MARGINAL_BAND:
        return "marginal"
    if top < 0:
        return "attracting"
    if float(re.min()) > 0:
        return "repelling"
    return "saddle"


@dataclass
class StablePoint:
    y: list[float]
    residual: float
    eigenvalues: list[complex]
    classification: str

    @property
    def stable(self) -> bool:
        return self.classification == "attracting"

    def to_dict(self) -> dict:
        return {
            "y": self.y,
            "residual": self.residual,
            "eigenvalues_real": [float(np.real(e)) for e in self.eigenvalues],
            "eigenvalues_imag": [float(np.imag(e)) for e in self.eigenvalues],
            "classification": self.classification,
        }


@dataclass
class StablePointSearch:
    points: list[StablePoint]
    starts: int
    failed_starts: int
    symmetric_ansatz: bool
    tol: float

    def to_dict(self) -> dict:
        return {
            "points": [p.to_dict() for p in self.points],
            "starts": self.starts,
            "failed_starts": self.failed_starts,
            "symmetric_ansatz": self.symmetric_ansatz,
            "tol": self.tol,
        }


def tangent_eigenvalues(g: Graph, lam, y) -> np.ndarray:
    jac = numeric_jacobian(lambda v: projected_rhs(v, g, lam), y)
    q = tangent_basis(g.node_count)
    return np.linalg.eigvals(q.T @ jac @ q)


def _newton_simplex(g, lam, y, tol, max_iter=100):
    """Damped Newton on the tangent space with backtracking and re-projection."""
    k = g.node_count
    q = tangent_basis(k)

    def res(v):
        return projected_rhs(v, g, lam)

    def reproject(v):
        v = np.maximum(v, 1e-300)
        return v / v.sum()

    y = reproject(np.asarray(y, dtype=float))
    r = res(y)
    norm = np.max(np.abs(r))
    for _ in range(max_iter):
        if norm <= tol:
            return y, norm
        jac = q.T @ numeric_jacobian(res, y, step=1e-7) @ q
        try:
            du = np.linalg.lstsq(jac, -q.T @ r, rcond=None)[0]
        except np.linalg.LinAlgError:
            return None, norm
        direction = q @ du
        t = 1.0
        while t > 1e-10:
            cand = y + t * direction
            if np.all(cand > 0):
                cand = reproject(cand)
                rc = res(cand)
                nc = np.max(np.abs(rc))
                if nc < norm:
                    y, r, norm = cand, rc, nc
                    break
            t /= 2
        else:
            return None, norm
    return (y, norm) if norm <= tol else (None, norm)


def _ansatz_point(a):
    b = 0.5 - a
    return np.array([a, a, b, b])


def _ansatz_roots(g, lam, tol, grid=4001):
    """Roots of the one-dimensional reduction ``y = (a, a, 1/2-a, 1/2-a)``."""

    def r(a):
        return projected_rhs(_ansatz_point(a), g, lam)[0]

    xs = np.linspace(0.0, 0.5, grid)[1:-1]
    vals = np.array([r(a) for a in xs])
    roots = [float(a) for a, v in zip(xs, vals) if v == 0.0]
    for i in np.flatnonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0):
        roots.append(brentq(r, xs[i], xs[i + 1], xtol=1e-15, rtol=4 * np.finfo(float).eps))
    return [_ansatz_point(a) for a in roots if abs(r(a)) <= max(tol, 1e-14)]


def find_stable_points(
    g: Graph,
    lam,
    starts: int = 64,
    seed: int | None = 0,
    tol: float = 1e-10,
    symmetric_ansatz: bool | None = None,
) -> StablePointSearch:
    """Fixed points of ``projected_rhs`` on the simplex, with numeric classification.

    Candidates come from the diagonal ``1/K``, damped Newton runs from random
    starts and, on the 4-cycle, a bisection scan of the symmetric reduction
    ``y1 = y2, y3 = y4``. With ``symmetric_ansatz`` (the default on the
    4-cycle) the random starts are drawn on that line too, so only points of
    that form are returned; pass ``False`` to search the whole simplex.
    """
    if not g.is_regular:
        raise GraphError("stable-point search needs a regular graph")
    k = g.node_count
    if symmetric_ansatz is None:
        symmetric_ansatz = g.is_four_cycle()
    if symmetric_ansatz and not g.is_four_cycle():
        raise GraphError("the symmetric ansatz is defined for the 4-cycle only")
    rng = np.random.default_rng(seed)
    cands = [np.full(k, 1.0 / k)]
    failed = 0
    if symmetric_ansatz:
        cands.extend(_ansatz_roots(g, lam, tol))
        for a in rng.uniform(0.0, 0.5, size=starts):
            y, _ = _newton_simplex(g, lam, _ansatz_point(a), tol)
            if y is None:
                failed += 1
            else:
                cands.append(y)
    else:
        for y0 in rng.dirichlet(np.ones(k), size=starts):
            y, _ = _newton_simplex(g, lam, y0, tol)
            if y is None:
                failed += 1
            else:
                cands.append(y)

    unique = []
    for y in cands:
        if np.max(np.abs(projected_rhs(y, g, lam))) > tol:
            continue
        if not any(np.max(np.abs(y - u)) < DEDUP_TOL for u in unique):
            unique.append(y)
    points = []
    for y in unique:
        resid = float(np.max(np.abs(projected_rhs(y, g, lam))))
        eigs = tangent_eigenvalues(g, lam, y)
        eigs = eigs[np.argsort(-np.real(eigs))]
        points.append(StablePoint(y.tolist(), resid, eigs.tolist(), classify_eigenvalues(eigs)))
    points.sort(key=lambda p: (p.residual, p.y))
    return StablePointSearch(points, starts + 1, failed, symmetric_ansatz, tol)


@dataclass
class StolyarWitness:
    p: list[float]
    mu: list[float]
    margin: float

    @property
    def valid(self) -> bool:
        return self.margin > 0

    def to_dict(self) -> dict:
        return {"p": self.p, "mu": self.mu, "margin": self.margin, "valid": self.valid}


def service_vector(p, g: Graph) -> np.ndarray:
    """``mu_i = p_i exp(-sum_{j in V_i} p_j)``."""
    p = np.asarray(p, dtype=float)
    return p * np.exp(-(g.matrix @ p))


def stolyar_search(g: Graph, lam, starts: int = 32, seed: int | None = 0,
                   max_sweeps: int = 400) -> StolyarWitness | None:
    """Look for ``p >= 0`` with ``p_i exp(-sum_{V_i} p) > lam_i`` for every i.

    Multistart compass search on ``min_i(mu_i(p) - lam_i)``. A returned witness
    is verified; ``None`` only means nothing was found within the budget.
    """
    k = g.node_count
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (k,)).copy()
    if np.any(lam <= 0):
        raise ValueError("lambda_i > 0 required")
    rng = np.random.default_rng(seed)

    def margin(p):
        return float(np.min(service_vector(p, g) - lam))

    inits = [1.0 / np.array(g.degrees, dtype=float), lam.copy()]
    inits += list(rng.uniform(0.0, 1.0, size=(starts, k)))
    best_p, best_m = None, -np.inf
    for p in inits:
        p = np.clip(np.asarray(p, dtype=float), 0.0, 1.0)
        m = margin(p)
        step = 0.25
        for _ in range(max_sweeps):
            improved = False
            for i in range(k):
                for sgn in (1.0, -1.0):
                    cand = p.copy()
                    cand[i] = min(max(cand[i] + sgn * step, 0.0), 1.0)
                    mc = margin(cand)
                    if mc > m:
                        p, m, improved = cand, mc, True
            if not improved:
                step /= 2
                if step < 1e-9:
                    break
        if m > best_m:
            best_p, best_m = p, m
        if best_m > 0 and m > 0 and step < 1e-9:
            break
    if best_m <= 0:
        return None
    mu = service_vector(best_p, g)
    return StolyarWitness(best_p.tolist(), mu.tolist(), float(np.min(mu - lam)))
