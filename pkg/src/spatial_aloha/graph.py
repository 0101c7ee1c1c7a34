"""Interaction graphs, closed-neighbourhood matrices and the diagonal spectrum.

Nodes are 0-based everywhere inside the package. Edge-list files and the
human-readable output use 1-based labels.

The "adjacency" matrix used throughout is the *closed*-neighbourhood matrix
``A`` with ones on the diagonal, so that ``(A @ A)[i, j] == |V_i & V_j|`` and
the top eigenvalue of a connected graph with ``|V_i| = V`` is exactly ``V``.
The loop-free adjacency matrix satisfies neither identity.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

E_INV = math.exp(-1.0)

# Eigenvalues closer than this are treated as equal when forming the gap.
EIG_TOL = 1e-10


class GraphError(ValueError):
    """Raised when a graph specification is invalid."""


@dataclass(frozen=True)
class Graph:
    """Finite connected interaction graph given by its closed neighbourhoods."""

    node_count: int
    neighborhoods: tuple[frozenset[int], ...]
    name: str = "graph"
    _matrix: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.node_count < 1:
            raise GraphError("a graph needs at least one node")
        if len(self.neighborhoods) != self.node_count:
            raise GraphError(
                f"expected {self.node_count} neighbourhoods, got {len(self.neighborhoods)}"
            )
        for i, nb in enumerate(self.neighborhoods):
            if i not in nb:
                raise GraphError(f"node {i + 1} is missing from its own neighbourhood")
            bad = [j for j in nb if not 0 <= j < self.node_count]
            if bad:
                raise GraphError(f"node {i + 1} has out-of-range neighbours {bad}")
            for j in nb:
                if i not in self.neighborhoods[j]:
                    raise GraphError(
                        f"asymmetric neighbourhoods: {j + 1} in V_{i + 1} but {i + 1} not in V_{j + 1}"
                    )
        unreached = _unreached(self.neighborhoods)
        if unreached:
            labels = ", ".join(str(j + 1) for j in unreached)
            raise GraphError(f"graph is disconnected: node(s) {labels} unreachable from node 1")

        mat = np.zeros((self.node_count, self.node_count))
        for i, nb in enumerate(self.neighborhoods):
            mat[i, sorted(nb)] = 1.0
        mat.setflags(write=False)
        object.__setattr__(self, "_matrix", mat)

    @property
    def degrees(self) -> list[int]:
        """Closed-neighbourhood sizes ``|V_i|``."""
        return [len(nb) for nb in self.neighborhoods]

    @property
    def is_regular(self) -> bool:
        return len(set(self.degrees)) == 1

    @property
    def V(self) -> int | None:
        """Common neighbourhood size, or None for irregular graphs."""
        return self.degrees[0] if self.is_regular else None

    @property
    def max_V(self) -> int:
        return max(self.degrees)

    @property
    def matrix(self) -> np.ndarray:
        """Read-only closed-neighbourhood matrix (float)."""
        return self._matrix

    def neighbor_lists(self) -> list[list[int]]:
        """Sorted closed neighbourhoods as plain lists (fast inner loops)."""
        return [sorted(nb) for nb in self.neighborhoods]

    def open_neighbors(self, i: int) -> list[int]:
        return sorted(self.neighborhoods[i] - {i})

    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for i, nb in enumerate(self.neighborhoods) for j in sorted(nb) if i < j]

    def diameter(self) -> int:
        return max(max(_bfs_distances(self.neighborhoods, s)) for s in range(self.node_count))

    def is_four_cycle(self) -> bool:
        return self.node_count == 4 and self.degrees == [3, 3, 3, 3]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "node_count": self.node_count,
            "edges": [[i + 1, j + 1] for i, j in self.edges()],
        }


def _bfs_distances(neighborhoods, source):
    dist = [-1] * len(neighborhoods)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in neighborhoods[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def _unreached(neighborhoods):
    if not neighborhoods:
        return []
    return [i for i, d in enumerate(_bfs_distances(neighborhoods, 0)) if d < 0]


def from_edges(node_count: int, edges, name: str = "edges") -> Graph:
    """Build a graph from undirected 0-based edges; duplicates are collapsed."""
    nbs = [{i} for i in range(node_count)]
    for i, j in edges:
        if not (0 <= i < node_count and 0 <= j < node_count):
            raise GraphError(f"edge ({i + 1}, {j + 1}) references a node outside 1..{node_count}")
        if i == j:
            raise GraphError(f"self-loop at node {i + 1}; self-inclusion is added internally")
        nbs[i].add(j)
        nbs[j].add(i)
    return Graph(node_count, tuple(frozenset(nb) for nb in nbs), name=name)


def cycle(k: int) -> Graph:
    if k < 1:
        raise GraphError("cycle needs K >= 1")
    edges = [(i, (i + 1) % k) for i in range(k) if (i + 1) % k != i]
    return from_edges(k, edges, name=f"cycle:{k}")


def complete(k: int) -> Graph:
    if k < 1:
        raise GraphError("complete graph needs K >= 1")
    return from_edges(k, [(i, j) for i in range(k) for j in range(i + 1, k)], name=f"complete:{k}")


def torus(m: int, n: int) -> Graph:
    """m x n grid with periodic boundary (4-neighbour)."""
    if m < 1 or n < 1:
        raise GraphError("torus needs m, n >= 1")
    edges = []
    for r in range(m):
        for c in range(n):
            u = r * n + c
            for v in (((r + 1) % m) * n + c, r * n + (c + 1) % n):
                if v != u:
                    edges.append((u, v))
    return from_edges(m * n, edges, name=f"torus:{m}x{n}")


def random_regular(k: int, d: int, seed: int | None = None, max_tries: int = 100_000) -> Graph:
    """Random d-regular graph (open degree d, so V = d + 1) by the pairing model.

    Stubs are paired uniformly at random; pairings with loops, multi-edges or
    more than one component are rejected and redrawn.
    """
    if not 0 <= d < k:
        raise GraphError("random regular graph needs 0 <= d < K")
    if (k * d) % 2:
        raise GraphError("K * d must be even")
    rng = np.random.default_rng(seed)
    stubs = np.repeat(np.arange(k), d)
    for _ in range(max_tries):
        perm = rng.permutation(stubs)
        pairs = perm.reshape(-1, 2)
        if np.any(pairs[:, 0] == pairs[:, 1]):
            continue
        keys = {(min(a, b), max(a, b)) for a, b in pairs.tolist()}
        if len(keys) != len(pairs):
            continue
        try:
            return from_edges(k, sorted(keys), name=f"random_regular:{k},{d},{seed}")
        except GraphError:
            continue
    raise GraphError(f"no simple connected {d}-regular graph on {k} nodes after {max_tries} pairings")


def read_edge_list(path: str | Path) -> Graph:
    """Parse an edge-list file: first line ``K``, then ``i j`` per line (1-based)."""
    path = Path(path)
    lines = [ln.split("#", 1)[0].strip() for ln in path.read_text().splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise GraphError(f"{path}: empty edge-list file")
    try:
        k = int(lines[0])
        edges = []
        for ln in lines[1:]:
            a, b = ln.split()
            edges.append((int(a) - 1, int(b) - 1))
    except ValueError as exc:
        raise GraphError(f"{path}: malformed edge list ({exc})") from None
    return from_edges(k, edges, name=path.name)


def write_edge_list(g: Graph, path: str | Path) -> None:
    body = [str(g.node_count)] + [f"{i + 1} {j + 1}" for i, j in g.edges()]
    Path(path).write_text("\n".join(body) + "\n")


def build_graph(spec: str) -> Graph:
    """Build a graph from a ``kind:args`` string or an edge-list path.

    Accepted kinds: ``cycle:K``, ``complete:K``, ``torus:MxN``,
    ``random_regular:K,d[,seed]``. Anything else is read as a file.
    """
    kind, _, args = spec.partition(":")
    try:
        if kind == "cycle":
            return cycle(int(args))
        if kind == "complete":
            return complete(int(args))
        if kind == "torus":
            m, n = args.lower().split("x")
            return torus(int(m), int(n))
        if kind == "random_regular":
            parts = [int(p) for p in args.split(",")]
            if len(parts) not in (2, 3):
                raise GraphError("random_regular takes K,d[,seed]")
            return random_regular(*parts)
    except ValueError as exc:
        if isinstance(exc, GraphError):
            raise
        raise GraphError(f"bad graph spec {spec!r}: {exc}") from None
    path = Path(spec)
    if not path.exists():
        raise GraphError(f"unknown graph spec {spec!r} (not a generator and no such file)")
    return read_edge_list(path)


def closed_neighborhood_matrix(g: Graph) -> np.ndarray:
    """Symmetric 0/1 matrix with ``A[i, j] = 1`` iff ``j in V_i`` (unit diagonal)."""
    return g.matrix.copy()


@dataclass
class SpectralReport:
    eigenvalues: list[float]
    top_eigenvalue: float
    spectral_gap: float
    is_regular: bool
    V: int | None
    eta: list[float] | None
    global_threshold: float | None
    local_threshold: float | None
    lam: float | None = None
    note: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def spectral_report(g: Graph, lam: float | None = None) -> SpectralReport:
    """Eigenvalues of the closed-neighbourhood matrix and the derived thresholds.

    ``eta[i] = -e^{-1} (V - nu_{K-i})^2 / V^3`` are the eigenvalues of the
    Jacobian of ``x -> F(phi(x))`` at the all-ones vector (regular graphs only).
    """
    nu = np.linalg.eigvalsh(g.matrix)
    nu = np.sort(nu)
    top = float(nu[-1])
    gap = float(nu[-1] - nu[-2]) if g.node_count > 1 else 0.0
    if abs(gap) < EIG_TOL:
        gap = 0.0
    if not g.is_regular:
        return SpectralReport(
            eigenvalues=nu.tolist(),
            top_eigenvalue=top,
            spectral_gap=gap,
            is_regular=False,
            V=None,
            eta=None,
            global_threshold=None,
            local_threshold=None,
            lam=lam,
            note=(
                "thresholds not applicable to an irregular graph; "
                f"use the max-neighbourhood bound e^-1/max|V_i| = {E_INV / g.max_V:.6g}"
            ),
        )
    V = g.V
    eta = [-E_INV * (V - float(nu[-1 - i])) ** 2 / V**3 for i in range(g.node_count)]
    eta[0] = 0.0 if abs(eta[0]) < EIG_TOL else eta[0]
    return SpectralReport(
        eigenvalues=nu.tolist(),
        top_eigenvalue=top,
        spectral_gap=gap,
        is_regular=True,
        V=V,
        eta=eta,
        global_threshold=E_INV / V,
        local_threshold=E_INV / V * (1.0 - gap**2 / V**2),
        lam=lam,
    )


def diagonal_jacobian(g: Graph) -> np.ndarray:
    """Jacobian of ``x -> F(phi(x))`` at the all-ones vector, entry by entry.

    Diagonal ``-e^{-1}(V-1)/V^2``; neighbours ``+e^{-1}|V_i | V_j|/V^3``;
    non-neighbours ``-e^{-1}|V_i & V_j|/V^3``.
    """
    if not g.is_regular:
        raise GraphError("diagonal Jacobian is only defined for regular graphs")
    V = g.V
    k = g.node_count
    out = np.empty((k, k))
    nbs = g.neighborhoods
    for i in range(k):
        for j in range(k):
            if i == j:
                out[i, j] = -E_INV * (V - 1) / V**2
            elif j in nbs[i]:
                out[i, j] = E_INV * len(nbs[i] | nbs[j]) / V**3
            else:
                out[i, j] = -E_INV * len(nbs[i] & nbs[j]) / V**3
    return out


@dataclass(frozen=True)
class GraphMixture:
    """Graphs on a common node set, one drawn per slot with probabilities ``probs``."""

    graphs: tuple[Graph, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        graphs = tuple(self.graphs)
        probs = tuple(float(p) for p in self.probs)
        object.__setattr__(self, "graphs", graphs)
        object.__setattr__(self, "probs", probs)
        if not graphs:
            raise GraphError("mixture needs at least one graph")
        if len(graphs) != len(probs):
            raise GraphError("one probability per graph is required")
        sizes = {g.node_count for g in graphs}
        if len(sizes) != 1:
            raise GraphError(f"mixture graphs have mismatched node counts {sorted(sizes)}")
        if any(p < 0 for p in probs) or not math.isclose(sum(probs), 1.0, abs_tol=1e-12):
            raise GraphError("mixture probabilities must be nonnegative and sum to 1")

    @property
    def node_count(self) -> int:
        return self.graphs[0].node_count

    @property
    def mean_degrees(self) -> list[float]:
        """Expected closed-neighbourhood sizes ``E|V_i^eta|``."""
        return [
            sum(p * g.degrees[i] for p, g in zip(self.probs, self.graphs))
            for i in range(self.node_count)
        ]
