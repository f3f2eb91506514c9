"""Triangle mesh model, OBJ/PLY I/O, topology queries, sampling and smoothing."""

from .io import load_mesh, load_points, save_mesh, save_points
from .mesh import BoundaryLoop, OrientedPointSet, TriMesh
from .ops import (
    boundary_loops,
    edge_incidence,
    laplacian_smooth,
    sample_surface,
    select_near_boundary,
    vertex_adjacency_matrix,
)

__all__ = [
    "BoundaryLoop",
    "OrientedPointSet",
    "TriMesh",
    "boundary_loops",
    "edge_incidence",
    "laplacian_smooth",
    "load_mesh",
    "load_points",
    "sample_surface",
    "save_mesh",
    "save_points",
    "select_near_boundary",
    "vertex_adjacency_matrix",
]
