"""Spatial slotted ALOHA: workload chain, fluid model and stability analysis."""

__version__ = "0.1.0"

from .graph import (  # noqa: E402
    E_INV,
    Graph,
    GraphError,
    GraphMixture,
    build_graph,
    closed_neighborhood_matrix,
    complete,
    cycle,
    diagonal_jacobian,
    random_regular,
    spectral_report,
    torus,
)
from .fluid import FluidParams, g_exact, g_tilde, integrate, phi  # noqa: E402
from .protocol import ArrivalModel, simulate, simulate_batch, step  # noqa: E402
from .stability import classify, diagonal_spectrum, find_stable_points, stolyar_search  # noqa: E402

__all__ = [
    "E_INV", "Graph", "GraphError", "GraphMixture", "build_graph", "closed_neighborhood_matrix",
    "complete", "cycle", "diagonal_jacobian", "random_regular", "spectral_report", "torus",
    "FluidParams", "g_exact", "g_tilde", "integrate", "phi",
    "ArrivalModel", "simulate", "simulate_batch", "step",
    "classify", "diagonal_spectrum", "find_stable_points", "stolyar_search",
]
