"""Mesh representation, I/O, spirals and multi-resolution sampling."""

from .core import (
    Mesh,
    avd,
    edges_from_faces,
    grid_mesh,
    icosahedron,
    icosphere,
    per_vertex_distance,
    topology_fingerprint,
    uniform_laplacian_energy,
    validate_faces,
    vertex_neighbors,
)
from .io import load_error_map, load_mesh, save_error_map, save_mesh
from .sampling import build_sampling, decimate
from .spirals import compute_spirals, ordered_fans
from .topology import TopologyAssets, build_topology

__all__ = [
    "Mesh", "avd", "edges_from_faces", "grid_mesh", "icosahedron", "icosphere",
    "per_vertex_distance", "topology_fingerprint", "uniform_laplacian_energy",
    "validate_faces", "vertex_neighbors", "load_error_map", "load_mesh", "save_error_map", "save_mesh",
    "build_sampling", "decimate", "compute_spirals", "ordered_fans",
    "TopologyAssets", "build_topology",
]
