"""Fixed-topology triangle meshes and the distances defined on them."""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass

import numpy as np

from ..exceptions import MeshFormatError, ShapeError, TopologyError


def validate_faces(faces, n_vertices: int) -> np.ndarray:
    """Return ``faces`` as an ``(F, 3)`` int64 array, checking index range and degeneracy."""
    faces = np.asarray(faces, dtype=np.int64)
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise MeshFormatError(f"faces must have shape (F, 3), got {faces.shape}")
    if faces.size and (faces.min() < 0 or faces.max() >= n_vertices):
        bad = int(np.flatnonzero((faces < 0).any(1) | (faces >= n_vertices).any(1))[0])
        raise MeshFormatError(f"face {bad} has a vertex index outside [0, {n_vertices})")
    degenerate = (
        (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
    )
    if degenerate.any():
        raise MeshFormatError(f"face {int(np.flatnonzero(degenerate)[0])} is degenerate")
    return faces


@dataclass(eq=False)
class Mesh:
    """Triangle mesh with vertex positions in millimetres.

    Parameters
    ----------
    vertices : array_like, shape (V, 3)
    faces : array_like, shape (F, 3)
        Vertex-index triples, 0-based, counter-clockwise winding.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshFormatError(f"vertices must have shape (V, 3), got {self.vertices.shape}")
        if len(self.vertices) == 0:
            raise MeshFormatError("mesh has no vertices")
        self.faces = validate_faces(self.faces, len(self.vertices))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "Mesh":
        """Same topology, new positions."""
        return Mesh(vertices, self.faces)

    def copy(self) -> "Mesh":
        return Mesh(self.vertices.copy(), self.faces.copy())


def topology_fingerprint(faces) -> str:
    """Stable hex digest of a face array; equal topologies share a fingerprint."""
    faces = np.ascontiguousarray(np.asarray(faces, dtype="<i8"))
    h = hashlib.sha256()
    h.update(np.asarray(faces.shape, dtype="<i8").tobytes())
    h.update(faces.tobytes())
    return h.hexdigest()[:16]


def _positions(x) -> np.ndarray:
    return x.vertices if isinstance(x, Mesh) else np.asarray(x, dtype=np.float64)


def per_vertex_distance(x, y) -> np.ndarray:
    """Euclidean distance between corresponding vertices, shape ``(..., V)``."""
    a, b = _positions(x), _positions(y)
    if a.shape != b.shape:
        raise ShapeError(f"vertex arrays differ in shape: {a.shape} vs {b.shape}")
    return np.sqrt(np.sum((a - b) ** 2, axis=-1))


def avd(x, y):
    """Average vertex distance between two meshes on the same topology.

    Accepts :class:`Mesh` objects or raw ``(..., V, 3)`` arrays; leading
    batch dimensions are preserved in the result.
    """
    return per_vertex_distance(x, y).mean(axis=-1)


def edges_from_faces(faces) -> np.ndarray:
    """Unique undirected edges as a sorted ``(E, 2)`` array with ``e[:, 0] < e[:, 1]``."""
    faces = np.asarray(faces, dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def vertex_neighbors(faces, n_vertices: int) -> list[np.ndarray]:
    """Sorted one-ring neighbour indices for every vertex."""
    e = edges_from_faces(faces)
    both = np.concatenate([e, e[:, ::-1]])
    order = np.lexsort((both[:, 1], both[:, 0]))
    both = both[order]
    splits = np.searchsorted(both[:, 0], np.arange(n_vertices + 1))
    return [both[splits[i]:splits[i + 1], 1] for i in range(n_vertices)]


def uniform_laplacian_matrix(faces, n_vertices: int):
    """Sparse ``I - A/deg`` operator; rows of isolated vertices are zero.

    Returns the matrix and a boolean mask of vertices that have neighbours.
    """
    import scipy.sparse as sp

    e = edges_from_faces(faces)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_vertices, n_vertices))
    deg = np.asarray(adj.sum(axis=1)).ravel()
    has_nb = deg > 0
    inv = np.where(has_nb, 1.0 / np.maximum(deg, 1), 0.0)
    lap = sp.diags(has_nb.astype(np.float64)) - sp.diags(inv) @ adj
    return lap.tocsr(), has_nb


def uniform_laplacian_energy(m: Mesh, vertex_mask=None) -> float:
    """Mean distance from each vertex to the centroid of its one-ring.

    Isolated vertices are excluded (with a warning). ``vertex_mask`` restricts
    the mean to a subset of vertices.
    """
    lap, has_nb = uniform_laplacian_matrix(m.faces, m.n_vertices)
    if not has_nb.any():
        raise TopologyError("mesh has no edges")
    if not has_nb.all():
        warnings.warn(f"{int((~has_nb).sum())} isolated vertices excluded from Laplacian energy")
    dist = np.linalg.norm(lap @ m.vertices, axis=1)
    keep = has_nb if vertex_mask is None else has_nb & np.asarray(vertex_mask, bool)
    return float(dist[keep].mean())


def icosahedron(radius: float = 1.0) -> Mesh:
    """Regular icosahedron with outward (counter-clockwise) winding."""
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    v *= radius / np.linalg.norm(v, axis=1, keepdims=True)
    return Mesh(v, f)


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> Mesh:
    """Loop-style midpoint subdivision of the icosahedron, projected to the sphere.

    ``subdivisions=3`` gives 642 vertices.
    """
    base = icosahedron()
    verts = [tuple(p) for p in base.vertices]
    faces = base.faces.tolist()
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                p = (np.asarray(verts[a]) + np.asarray(verts[b])) / 2.0
                verts.append(tuple(p / np.linalg.norm(p)))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new
    return Mesh(np.asarray(verts) * radius, np.asarray(faces))


def grid_mesh(nx: int, ny: int, spacing: float = 1.0) -> Mesh:
    """Planar ``nx`` by ``ny`` vertex grid in the z=0 plane, split into triangles."""
    xs, ys = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing, indexing="xy")
    verts = np.stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)], axis=1)
    faces = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b, c, d = a + 1, a + nx, a + nx + 1
            faces += [[a, b, d], [a, d, c]]
    return Mesh(verts, np.asarray(faces))
