"""Binary container for named arrays plus an embedded text header.

Layout (all little-endian)::

    magic[4] | version u32 | hash_len u32 | hash bytes | text_len u64 | text (utf-8)
    | n_entries u32 | directory | data

Each directory entry is ``name_len u16, name, dtype u8, ndim u8, shape u64 * ndim,
offset u64, nbytes u64``; offsets are relative to the start of the data block.
"""

from __future__ import annotations

import io
import os
import struct

import numpy as np

from .exceptions import MeshFormatError

FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


def _code(arr: np.ndarray) -> int:
    dt = arr.dtype if arr.dtype.itemsize == 1 else arr.dtype.newbyteorder("<")
    if dt in _CODES:
        return _CODES[dt]
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
        return 3
    return 2


def write_container(magic: bytes, arrays: dict, text: str = "", digest: str = "", sink=None) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    head = io.BytesIO()
    h = digest.encode()
    t = text.encode()
    head.write(magic)
    head.write(struct.pack("<II", FORMAT_VERSION, len(h)))
    head.write(h)
    head.write(struct.pack("<Q", len(t)))
    head.write(t)
    head.write(struct.pack("<I", len(arrays)))
    blobs, offset = [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _code(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        nb = name.encode()
        head.write(struct.pack("<H", len(nb)))
        head.write(nb)
        head.write(struct.pack("<BB", code, arr.ndim))
        head.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        head.write(struct.pack("<QQ", offset, len(raw)))
        blobs.append(raw)
        offset += len(raw)
    data = head.getvalue() + b"".join(blobs)
    if isinstance(sink, (str, os.PathLike)):
        tmp = f"{sink}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, sink)
    elif sink is not None:
        sink.write(data)
    return data


def read_container(source, magic: bytes):
    """Return ``(arrays, text, digest)``."""
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
            raise MeshFormatError("truncated container")
        return raw

    if take(4) != magic:
        raise MeshFormatError(f"bad magic; expected {magic!r}")
    version, hlen = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise MeshFormatError(f"unsupported container version {version}")
    digest = take(hlen).decode()
    (tlen,) = struct.unpack("<Q", take(8))
    text = take(tlen).decode()
    (n,) = struct.unpack("<I", take(4))
    entries = []
    for _ in range(n):
        (nl,) = struct.unpack("<H", take(2))
        name = take(nl).decode()
        code, ndim = struct.unpack("<BB", take(2))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        off, nbytes = struct.unpack("<QQ", take(16))
        entries.append((name, code, shape, off, nbytes))
    start = buf.tell()
    arrays = {}
    for name, code, shape, off, nbytes in entries:
        raw = data[start + off:start + off + nbytes]
        if len(raw) != nbytes:
            raise MeshFormatError(f"container entry {name!r} is truncated")
        arrays[name] = np.frombuffer(raw, dtype=_DTYPES[code]).reshape(shape).copy()
    return arrays, text, digest
