"""Quadric-error edge-collapse decimation and the pooling matrices built from it."""

from __future__ import annotations

import heapq
import math

import numpy as np
import scipy.sparse as sp

from ..exceptions import TopologyError
from .core import Mesh


def _face_planes(verts, faces):
    p0, p1, p2 = (verts[faces[:, k]] for k in range(3))
    n = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)
    d = -np.sum(n * p0, axis=1, keepdims=True)
    return np.hstack([n, d])


def vertex_quadrics(verts, faces) -> np.ndarray:
    """Sum of fundamental plane quadrics ``p p^T`` of the faces around each vertex."""
    planes = _face_planes(verts, faces)
    kp = planes[:, :, None] * planes[:, None, :]
    q = np.zeros((len(verts), 4, 4))
    for k in range(3):
        np.add.at(q, faces[:, k], kp)
    return q


def _cost(q, p):
    h = np.append(p, 1.0)
    return float(h @ q @ h)


class _Decimator:
    """Edge collapse with subset placement: the surviving endpoint keeps its position."""

    def __init__(self, verts, faces):
        self.pos = np.asarray(verts, dtype=np.float64)
        self.q = vertex_quadrics(self.pos, np.asarray(faces))
        self.faces = {i: list(f) for i, f in enumerate(np.asarray(faces).tolist())}
        self.vfaces: list[set[int]] = [set() for _ in range(len(verts))]
        for i, f in self.faces.items():
            for v in f:
                self.vfaces[v].add(i)
        self.alive = np.ones(len(verts), dtype=bool)
        self.cluster = {v: [v] for v in range(len(verts))}
        self.version = np.zeros(len(verts), dtype=np.int64)
        self.heap: list = []
        self._push_all()

    def _push_all(self):
        edges = set()
        for f in self.faces.values():
            for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                edges.add((min(a, b), max(a, b)))
        for a, b in sorted(edges):
            self._push(a, b)

    def neighbors(self, v):
        out = set()
        for fi in self.vfaces[v]:
            out.update(self.faces[fi])
        out.discard(v)
        return out

    def _push(self, a, b):
        q = self.q[a] + self.q[b]
        ca, cb = _cost(q, self.pos[a]), _cost(q, self.pos[b])
        # keep the cheaper endpoint; on a tie keep the smaller index
        keep, drop = (a, b) if ca <= cb else (b, a)
        if ca == cb:
            keep, drop = min(a, b), max(a, b)
        cost = min(ca, cb)
        heapq.heappush(self.heap, (cost, min(a, b), max(a, b), keep, drop,
                                   int(self.version[a]), int(self.version[b])))

    def _valid(self, keep, drop):
        nk, nd = self.neighbors(keep), self.neighbors(drop)
        if drop not in nk:
            return False
        shared = nk & nd
        # link condition for closed manifolds: exactly the two opposite vertices
        n_shared_faces = len(self.vfaces[keep] & self.vfaces[drop])
        if len(shared) != n_shared_faces:
            return False
        if len(self.vfaces[keep] | self.vfaces[drop]) - n_shared_faces < 3:
            return False
        for fi in self.vfaces[drop] - self.vfaces[keep]:
            f = self.faces[fi]
            old = self._normal(f)
            new = self._normal([keep if v == drop else v for v in f])
            if np.linalg.norm(new) == 0 or np.dot(old, new) <= 0:
                return False
        return True

    def _normal(self, f):
        a, b, c = (self.pos[v] for v in f)
        return np.cross(b - a, c - a)

    def collapse(self, keep, drop):
        for fi in list(self.vfaces[drop]):
            f = self.faces[fi]
            if keep in f:
                for v in f:
                    self.vfaces[v].discard(fi)
                del self.faces[fi]
            else:
                self.faces[fi] = [keep if v == drop else v for v in f]
                self.vfaces[keep].add(fi)
        self.vfaces[drop] = set()
        self.alive[drop] = False
        self.q[keep] = self.q[keep] + self.q[drop]
        self.cluster[keep] += self.cluster.pop(drop)
        self.version[keep] += 1
        self.version[drop] += 1
        for w in self.neighbors(keep):
            self._push(min(keep, w), max(keep, w))

    def run(self, target):
        n_alive = int(self.alive.sum())
        retried = False
        while n_alive > target:
            if not self.heap:
                # rejected edges may have become valid after nearby collapses
                if retried:
                    raise TopologyError(
                        f"decimation stuck at {n_alive} vertices (target {target})")
                retried = True
                self._push_all()
                continue
            _, a, b, keep, drop, va, vb = heapq.heappop(self.heap)
            if not (self.alive[a] and self.alive[b]):
                continue
            if va != self.version[a] or vb != self.version[b]:
                continue
            if not self._valid(keep, drop):
                continue
            self.collapse(keep, drop)
            n_alive -= 1
            retried = False


def decimate(mesh: Mesh, target: int):
    """Collapse edges by quadric error until ``target`` vertices remain.

    Returns ``(coarse_faces, survivors, clusters)`` where ``survivors`` are the
    fine indices of the kept vertices in coarse order and ``clusters[i]``
    lists the fine vertices merged into coarse vertex ``i``.
    """
    dec = _Decimator(mesh.vertices, mesh.faces)
    dec.run(target)
    survivors = np.flatnonzero(dec.alive)
    remap = -np.ones(mesh.n_vertices, dtype=np.int64)
    remap[survivors] = np.arange(len(survivors))
    faces = np.asarray([dec.faces[k] for k in sorted(dec.faces)], dtype=np.int64)
    clusters = [sorted(dec.cluster[v]) for v in survivors]
    return remap[faces], survivors, clusters


def closest_point_barycentric(p, a, b, c):
    """Barycentric weights of the point on triangle ``abc`` closest to ``p``.

    Follows the region tests from Ericson, Real-Time Collision Detection, 5.1.5.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = ab @ ap, ac @ ap
    if d1 <= 0 and d2 <= 0:
        return np.array([1.0, 0.0, 0.0])
    bp = p - b
    d3, d4 = ab @ bp, ac @ bp
    if d3 >= 0 and d4 <= d3:
        return np.array([0.0, 1.0, 0.0])
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        v = d1 / (d1 - d3)
        return np.array([1 - v, v, 0.0])
    cp = p - c
    d5, d6 = ab @ cp, ac @ cp
    if d6 >= 0 and d5 <= d6:
        return np.array([0.0, 0.0, 1.0])
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        w = d2 / (d2 - d6)
        return np.array([1 - w, 0.0, w])
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return np.array([0.0, 1 - w, w])
    denom = 1.0 / (va + vb + vc)
    v, w = vb * denom, vc * denom
    return np.array([1 - v - w, v, w])


def barycentric_upsampling(fine_points, coarse_points, coarse_faces) -> sp.csr_matrix:
    """Row-stochastic ``(V_fine, V_coarse)`` matrix: each fine vertex is expressed
    in barycentric coordinates of the closest point on its nearest coarse triangle."""
    tri = coarse_points[coarse_faces]
    rows, cols, vals = [], [], []
    centroids = tri.mean(axis=1)
    radius = np.max(np.linalg.norm(tri - centroids[:, None], axis=2), axis=1)
    for i, p in enumerate(fine_points):
        # triangles whose bounding sphere could hold the closest point
        dc = np.linalg.norm(centroids - p, axis=1)
        bound = np.min(dc + radius)
        cand = np.flatnonzero(dc - radius <= bound)
        best, best_d, best_w = -1, math.inf, None
        for t in cand:
            w = closest_point_barycentric(p, *tri[t])
            d = np.sum((w @ tri[t] - p) ** 2)
            if d < best_d - 1e-15:
                best, best_d, best_w = t, d, w
        w = np.clip(best_w, 0.0, None)
        w /= w.sum()
        for k in range(3):
            if w[k] > 0:
                rows.append(i)
                cols.append(coarse_faces[best, k])
                vals.append(w[k])
    m = sp.csr_matrix((vals, (rows, cols)), shape=(len(fine_points), len(coarse_points)))
    m.sum_duplicates()
    return m


def cluster_averaging(clusters, n_fine: int) -> sp.csr_matrix:
    """``(V_coarse, V_fine)`` matrix averaging every fine vertex of each cluster."""
    rows, cols, vals = [], [], []
    for i, members in enumerate(clusters):
        for v in members:
            rows.append(i)
            cols.append(v)
            vals.append(1.0 / len(members))
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(clusters), n_fine))


def build_sampling(mesh: Mesh, factor: int = 4):
    """Down-sampling matrix, up-sampling matrix and coarse mesh for one level.

    The coarse mesh has ``ceil(V / factor)`` vertices placed at the centroids
    of their collapsed clusters, i.e. exactly ``down @ mesh.vertices``.
    """
    if factor < 2:
        raise ValueError("sampling factor must be >= 2")
    target = math.ceil(mesh.n_vertices / factor)
    faces, _, clusters = decimate(mesh, target)
    down = cluster_averaging(clusters, mesh.n_vertices)
    coarse_pos = down @ mesh.vertices
    up = barycentric_upsampling(mesh.vertices, coarse_pos, faces)
    return down, up, Mesh(coarse_pos, faces)
