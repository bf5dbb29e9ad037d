"""Deterministic spiral sequences for spiral convolutions.

Each spiral begins at its centre vertex, continues with the one-ring in
counter-clockwise order (following the face winding) starting from the
smallest-index neighbour, and then proceeds ring by ring: the vertices of
ring ``k + 1`` are collected by walking ring ``k`` in order and appending the
unseen neighbours of each of its vertices in that vertex's own ordered fan.
"""

from __future__ import annotations

import numpy as np

from ..exceptions import TopologyError


def ordered_fans(faces, n_vertices: int) -> list[list[int]]:
    """Counter-clockwise ordered one-ring of every vertex.

    Closed fans are rotated to start at their smallest neighbour; open
    (boundary) fans start at the end of the chain that has no predecessor.
    Raises :class:`TopologyError` naming the first non-manifold vertex.
    """
    succ: list[dict[int, int]] = [dict() for _ in range(n_vertices)]
    for a, b, c in np.asarray(faces, dtype=np.int64).tolist():
        for v, p, q in ((a, b, c), (b, c, a), (c, a, b)):
            if p in succ[v]:
                raise TopologyError(f"vertex {v} is non-manifold (edge {v}-{p} used twice)")
            succ[v][p] = q

    fans = []
    for v in range(n_vertices):
        nxt = succ[v]
        if not nxt:
            fans.append([])
            continue
        targets = set(nxt.values())
        starts = [p for p in nxt if p not in targets]
        if len(starts) > 1:
            raise TopologyError(f"vertex {v} is non-manifold (one-ring splits into several fans)")
        start = starts[0] if starts else min(nxt)
        fan = [start]
        cur = start
        while cur in nxt:
            cur = nxt[cur]
            if cur == start:
                break
            fan.append(cur)
        n_nb = len(set(nxt) | targets)
        if len(fan) != n_nb:
            raise TopologyError(f"vertex {v} is non-manifold (one-ring is not a single fan)")
        fans.append(fan)
    return fans


def compute_spirals(faces, n_vertices: int, length: int, dilation: int = 1) -> np.ndarray:
    """Spiral index table of shape ``(V, length)``.

    The full spiral is gathered to ``length * dilation`` entries, padded by
    repeating its last index when the rings run out, and every
    ``dilation``-th entry is kept.
    """
    if length < 1 or dilation < 1:
        raise ValueError("spiral length and dilation must be >= 1")
    need = length * dilation
    fans = ordered_fans(faces, n_vertices)
    table = np.empty((n_vertices, length), dtype=np.int64)
    for v in range(n_vertices):
        seq = [v]
        seen = {v}
        ring = [v]
        while len(seq) < need and ring:
            nxt_ring = []
            for u in ring:
                for w in fans[u]:
                    if w not in seen:
                        seen.add(w)
                        nxt_ring.append(w)
            seq += nxt_ring
            ring = nxt_ring
        seq = seq[:need]
        seq += [seq[-1]] * (need - len(seq))
        table[v] = seq[::dilation]
    return table
