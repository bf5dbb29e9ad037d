"""OBJ and PLY readers/writers, including PLY error maps with a ``quality`` channel."""

from __future__ import annotations

import io
import os
import struct

import numpy as np

from ..exceptions import MeshFormatError
from .core import Mesh

_PLY_TYPES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def _read_bytes(source) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return fh.read()
    return source.read()


def _guess_format(source, fmt):
    if fmt is not None:
        return fmt.lower()
    if isinstance(source, (str, os.PathLike)):
        ext = os.path.splitext(str(source))[1].lower().lstrip(".")
        if ext in ("obj", "ply"):
            return ext
    raise MeshFormatError("mesh format could not be inferred; pass format='obj' or 'ply'")


def load_mesh(source, format: str | None = None) -> Mesh:
    """Read a triangle mesh from a path, bytes, or binary stream."""
    fmt = _guess_format(source, format)
    data = _read_bytes(source)
    if fmt == "obj":
        return _parse_obj(data.decode("utf-8", errors="replace"))
    if fmt == "ply":
        mesh, _ = _parse_ply(data)
        return mesh
    raise MeshFormatError(f"unsupported mesh format {fmt!r}")


def _fan(poly):
    return [[poly[0], poly[k], poly[k + 1]] for k in range(1, len(poly) - 1)]


def _parse_obj(text: str) -> Mesh:
    verts, faces = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        if tag == "v":
            if len(rest) < 3:
                raise MeshFormatError(f"line {lineno}: vertex needs 3 coordinates")
            try:
                verts.append([float(t) for t in rest[:3]])
            except ValueError:
                raise MeshFormatError(f"line {lineno}: non-numeric coordinate") from None
        elif tag == "f":
            if len(rest) < 3:
                raise MeshFormatError(f"line {lineno}: face needs at least 3 vertices")
            poly = []
            for tok in rest:
                try:
                    idx = int(tok.split("/")[0])
                except ValueError:
                    raise MeshFormatError(f"line {lineno}: bad face index {tok!r}") from None
                # negative indices are relative to the vertices read so far
                idx = idx - 1 if idx > 0 else len(verts) + idx
                if not 0 <= idx < len(verts):
                    raise MeshFormatError(f"line {lineno}: face index {tok} out of range")
                poly.append(idx)
            faces += _fan(poly)
    if not verts:
        raise MeshFormatError("OBJ contains no vertices")
    return Mesh(np.asarray(verts), np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def _parse_ply(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MeshFormatError("not a PLY file")
    nl = data.find(b"\n", end)
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[nl + 1:]
    fmt = None
    elements = []  # [name, count, [(prop name, type, list count type)]]
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise MeshFormatError("PLY property before any element")
            if tok[1] == "list":
                elements[-1][2].append((tok[4], tok[3], tok[2]))
            else:
                elements[-1][2].append((tok[2], tok[1], None))
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshFormatError(f"unsupported PLY format {fmt!r}")

    values: dict[str, dict[str, list]] = {}
    if fmt == "ascii":
        tokens = iter(body.decode("ascii", errors="replace").split())
        try:
            for name, count, props in elements:
                cols = {p[0]: [] for p in props}
                for _ in range(count):
                    for pname, ptype, ltype in props:
                        if ltype is None:
                            cols[pname].append(float(next(tokens)))
                        else:
                            n = int(next(tokens))
                            cols[pname].append([int(next(tokens)) for _ in range(n)])
                values[name] = cols
        except (StopIteration, ValueError):
            raise MeshFormatError("truncated or malformed PLY body") from None
    else:
        buf = io.BytesIO(body)

        def rd(t, n=1):
            code = _PLY_TYPES[t]
            size = struct.calcsize("<" + code) * n
            raw = buf.read(size)
            if len(raw) != size:
                raise MeshFormatError("truncated PLY body")
            return struct.unpack("<" + code * n, raw)

        for name, count, props in elements:
            cols = {p[0]: [] for p in props}
            if all(p[2] is None for p in props):
                dt = np.dtype([(p[0], "<" + _PLY_TYPES[p[1]]) for p in props])
                raw = buf.read(dt.itemsize * count)
                if len(raw) != dt.itemsize * count:
                    raise MeshFormatError("truncated PLY body")
                arr = np.frombuffer(raw, dtype=dt)
                for p in props:
                    cols[p[0]] = arr[p[0]].astype(np.float64).tolist()
            else:
                for _ in range(count):
                    for pname, ptype, ltype in props:
                        if ltype is None:
                            cols[pname].append(rd(ptype)[0])
                        else:
                            n = rd(ltype)[0]
                            cols[pname].append(list(rd(ptype, n)))
            values[name] = cols

    if "vertex" not in values or not values["vertex"].get("x"):
        raise MeshFormatError("PLY contains no vertices")
    vx = values["vertex"]
    verts = np.stack([np.asarray(vx[k], dtype=np.float64) for k in ("x", "y", "z")], axis=1)
    faces = []
    fcols = values.get("face", {})
    key = "vertex_indices" if "vertex_indices" in fcols else "vertex_index"
    for poly in fcols.get(key, []):
        if any(not 0 <= int(i) < len(verts) for i in poly):
            raise MeshFormatError("PLY face index out of range")
        faces += _fan([int(i) for i in poly])
    quality = np.asarray(vx["quality"], dtype=np.float64) if "quality" in vx else None
    mesh = Mesh(verts, np.asarray(faces, dtype=np.int64).reshape(-1, 3))
    return mesh, quality


def obj_bytes(m: Mesh) -> bytes:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in m.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in m.faces]
    return ("\n".join(lines) + "\n").encode()


def ply_bytes(m: Mesh, quality=None, binary: bool = False) -> bytes:
    """Serialise to PLY; ``quality`` adds a per-vertex float channel."""
    head = [
        "ply",
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
        f"element vertex {m.n_vertices}",
        "property double x", "property double y", "property double z",
    ]
    if quality is not None:
        quality = np.asarray(quality, dtype=np.float64).ravel()
        if len(quality) != m.n_vertices:
            raise MeshFormatError("quality field length differs from vertex count")
        head.append("property double quality")
    head += [f"element face {m.n_faces}", "property list uchar int vertex_indices", "end_header"]
    out = ("\n".join(head) + "\n").encode("ascii")
    cols = m.vertices if quality is None else np.column_stack([m.vertices, quality])
    if binary:
        out += np.ascontiguousarray(cols, dtype="<f8").tobytes()
        rec = np.zeros(m.n_faces, dtype=[("n", "u1"), ("idx", "<i4", 3)])
        rec["n"] = 3
        rec["idx"] = m.faces
        out += rec.tobytes()
    else:
        body = [" ".join(f"{v:.17g}" for v in row) for row in cols]
        body += [f"3 {a} {b} {c}" for a, b, c in m.faces]
        out += ("\n".join(body) + "\n").encode("ascii")
    return out


def save_mesh(m: Mesh, sink=None, format: str | None = None, binary: bool = False) -> bytes:
    """Write ``m`` to ``sink`` (path or stream) and return the encoded bytes."""
    fmt = format or (_guess_format(sink, None) if sink is not None else "obj")
    data = obj_bytes(m) if fmt == "obj" else ply_bytes(m, binary=binary)
    _write(sink, data)
    return data


def save_error_map(m: Mesh, field, sink=None, binary: bool = False) -> bytes:
    """PLY of ``m`` whose per-vertex ``quality`` holds ``field`` (millimetres)."""
    data = ply_bytes(m, quality=field, binary=binary)
    _write(sink, data)
    return data


def load_error_map(source):
    """Inverse of :func:`save_error_map`; returns ``(mesh, field)``."""
    mesh, quality = _parse_ply(_read_bytes(source))
    if quality is None:
        raise MeshFormatError("PLY has no per-vertex quality property")
    return mesh, quality


def _write(sink, data: bytes):
    if sink is None:
        return
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "wb") as fh:
            fh.write(data)
    else:
        sink.write(data)
