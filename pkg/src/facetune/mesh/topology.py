"""Multi-resolution topology shared by every mesh of a dataset."""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..exceptions import MeshFormatError, TopologyError
from .core import Mesh, topology_fingerprint
from .sampling import build_sampling
from .spirals import compute_spirals

MAGIC = b"FTTA"
VERSION = 1


@dataclass(eq=False)
class TopologyAssets:
    """Faces, spiral tables and pooling matrices for each resolution level.

    Level 0 is the input resolution. ``down[l]`` maps level ``l`` to ``l + 1``
    (shape ``(V_{l+1}, V_l)``) and ``up[l]`` maps back (shape ``(V_l, V_{l+1})``).
    """

    faces: list[np.ndarray]
    spirals: list[np.ndarray]
    down: list[sp.csr_matrix]
    up: list[sp.csr_matrix]
    template: np.ndarray | None = None
    _fingerprint: str | None = field(default=None, repr=False)

    @property
    def n_levels(self) -> int:
        return len(self.faces)

    @property
    def level_sizes(self) -> list[int]:
        return [len(s) for s in self.spirals]

    @property
    def spiral_length(self) -> int:
        return self.spirals[0].shape[1]

    @property
    def fingerprint(self) -> str:
        if self._fingerprint is None:
            self._fingerprint = topology_fingerprint(self.faces[0])
        return self._fingerprint

    def check_mesh_array(self, x: np.ndarray) -> np.ndarray:
        """Validate a ``(V, 3)`` or ``(B, V, 3)`` vertex array against level 0."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (2, 3) or x.shape[-2:] != (self.level_sizes[0], 3):
            raise TopologyError(
                f"expected vertex array (..., {self.level_sizes[0]}, 3), got {x.shape}")
        return x

    def save(self, sink=None) -> bytes:
        buf = io.BytesIO()
        w = buf.write
        w(MAGIC)
        w(struct.pack("<II", VERSION, self.n_levels))
        for f, s in zip(self.faces, self.spirals):
            w(struct.pack("<QQQ", len(s), len(f), s.shape[1]))
        for f, s in zip(self.faces, self.spirals):
            w(np.ascontiguousarray(f, dtype="<i8").tobytes())
            w(np.ascontiguousarray(s, dtype="<i8").tobytes())
        for mat in list(self.down) + list(self.up):
            coo = mat.tocoo()
            w(struct.pack("<QQQ", coo.shape[0], coo.shape[1], coo.nnz))
            w(coo.row.astype("<i8").tobytes())
            w(coo.col.astype("<i8").tobytes())
            w(coo.data.astype("<f8").tobytes())
        has_template = self.template is not None
        w(struct.pack("<B", int(has_template)))
        if has_template:
            w(np.ascontiguousarray(self.template, dtype="<f8").tobytes())
        data = buf.getvalue()
        if isinstance(sink, (str, os.PathLike)):
            with open(sink, "wb") as fh:
                fh.write(data)
        elif sink is not None:
            sink.write(data)
        return data

    @classmethod
    def load(cls, source) -> "TopologyAssets":
        if isinstance(source, (str, os.PathLike)):
            with open(source, "rb") as fh:
                data = fh.read()
        elif isinstance(source, (bytes, bytearray)):
            data = bytes(source)
        else:
            data = source.read()
        buf = io.BytesIO(data)

        def take(n):
            raw = buf.read(n)
            if len(raw) != n:
                raise MeshFormatError("truncated topology file")
            return raw

        if take(4) != MAGIC:
            raise MeshFormatError("not a topology file (bad magic)")
        version, n_levels = struct.unpack("<II", take(8))
        if version != VERSION:
            raise MeshFormatError(f"unsupported topology file version {version}")
        sizes = [struct.unpack("<QQQ", take(24)) for _ in range(n_levels)]
        faces, spirals = [], []
        for nv, nf, length in sizes:
            faces.append(np.frombuffer(take(nf * 24), "<i8").reshape(nf, 3).astype(np.int64))
            spirals.append(np.frombuffer(take(nv * length * 8), "<i8")
                           .reshape(nv, length).astype(np.int64))
        mats = []
        for _ in range(2 * (n_levels - 1)):
            r, c, nnz = struct.unpack("<QQQ", take(24))
            row = np.frombuffer(take(nnz * 8), "<i8")
            col = np.frombuffer(take(nnz * 8), "<i8")
            val = np.frombuffer(take(nnz * 8), "<f8")
            mats.append(sp.csr_matrix((val, (row, col)), shape=(r, c)))
        template = None
        if struct.unpack("<B", take(1))[0]:
            template = np.frombuffer(take(sizes[0][0] * 24), "<f8").reshape(-1, 3).copy()
        k = n_levels - 1
        return cls(faces, spirals, mats[:k], mats[k:], template)


def build_topology(template: Mesh, n_downsamplings: int = 3, factor: int = 4,
                   spiral_length: int = 9, dilation: int = 1) -> TopologyAssets:
    """Decimate ``template`` repeatedly and precompute spirals at every level."""
    faces = [template.faces]
    down, up = [], []
    mesh = template
    for _ in range(n_downsamplings):
        d, u, mesh = build_sampling(mesh, factor)
        down.append(d)
        up.append(u)
        faces.append(mesh.faces)
    sizes = [template.n_vertices] + [d.shape[0] for d in down]
    spirals = [compute_spirals(f, n, spiral_length, dilation) for f, n in zip(faces, sizes)]
    return TopologyAssets(faces, spirals, down, up, template.vertices.copy())
