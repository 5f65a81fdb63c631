"""Little-endian binary file formats and the key-value config format.

========  =====================================================================
magic     layout after the 4-byte magic
========  =====================================================================
ICOS      u32 level, u64 nV, f64 xyz * nV, u64 nF, u32 index triples * nF
PMAP      records until EOF: u32 id, u32 rank, u64 dims * rank, u32 payload
MSWT      u32 version, records until EOF: u32 name length, name bytes,
          u8 dtype code, u32 rank, u64 dims * rank, payload
SCAL      u64 length, f32 values
SURF      u64 vertex count, u32 channel count, f32 row-major values
LABL      u64 count, u32 values
========  =====================================================================

Every writer goes through a temporary file and an atomic rename, so a
crashed run never leaves a truncated file under the final name.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .icomesh import Icosphere

MSWT_VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("u1"): 3,
    np.dtype("<i4"): 4,
    np.dtype("<u4"): 5,
}
_CODE_DTYPES = {c: d for d, c in _DTYPE_CODES.items()}


class FormatError(ValueError):
    """A file is truncated, has the wrong magic, or inconsistent sizes."""


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, raw: bytes, what: str):
        self.raw, self.pos, self.what = raw, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.what}: truncated file")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def array(self, dtype, count: int) -> np.ndarray:
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype).copy()

    @property
    def done(self) -> bool:
        return self.pos == len(self.raw)


def _open(path, magic: bytes) -> _Reader:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from exc
    r = _Reader(raw, str(path))
    if r.take(4) != magic:
        raise FormatError(f"{path}: not a {magic.decode()} file")
    return r


# -- ICOS -------------------------------------------------------------------


def encode_icosphere(ico: Icosphere) -> bytes:
    buf = io.BytesIO()
    buf.write(b"ICOS")
    buf.write(struct.pack("<IQ", ico.level, ico.n_vertices))
    buf.write(np.ascontiguousarray(ico.vertices, dtype="<f8").tobytes())
    buf.write(struct.pack("<Q", ico.n_faces))
    buf.write(np.ascontiguousarray(ico.faces, dtype="<u4").tobytes())
    return buf.getvalue()


def write_icosphere(path, ico: Icosphere) -> None:
    atomic_write(path, encode_icosphere(ico))


def read_icosphere(path) -> tuple[int, np.ndarray, np.ndarray]:
    """Return ``(level, vertices, faces)``."""
    r = _open(path, b"ICOS")
    level, nv = r.unpack("IQ")
    verts = r.array("<f8", 3 * nv).reshape(nv, 3)
    (nf,) = r.unpack("Q")
    faces = r.array("<u4", 3 * nf).reshape(nf, 3).astype(np.int64)
    if not r.done:
        raise FormatError(f"{path}: trailing bytes")
    return level, verts, faces


# -- PMAP -------------------------------------------------------------------

# Table ids: kind * 100 + level.
PMAP_PATCH_VERTICES = 100
PMAP_WINDOW_ID = 200
PMAP_SHIFT_GATHER = 300
PMAP_MERGE_GATHER = 400


def patch_map_tables(maps) -> dict[int, np.ndarray]:
    """Flatten a :class:`~mssit.patching.PatchMaps` into id-keyed integer tables."""
    from .patching import LEVELS, shift_index

    tables = {PMAP_PATCH_VERTICES: maps.patch_vertices}
    for level in LEVELS:
        tables[PMAP_WINDOW_ID + level] = maps.window_id[level]
        tables[PMAP_SHIFT_GATHER + level] = shift_index(maps.level_lengths[level], maps.shift_offset[level])
        if level in maps.merge_gather:
            tables[PMAP_MERGE_GATHER + level] = maps.merge_gather[level]
    return tables


def encode_tables(tables: dict[int, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(b"PMAP")
    for tid in sorted(tables):
        arr = np.asarray(tables[tid])
        if arr.size and (arr.min() < 0 or arr.max() > 0xFFFFFFFF):
            raise ValueError(f"table {tid} does not fit in u32")
        buf.write(struct.pack("<II", tid, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<u4").tobytes())
    return buf.getvalue()


def write_tables(path, tables: dict[int, np.ndarray]) -> None:
    atomic_write(path, encode_tables(tables))


def read_tables(path) -> dict[int, np.ndarray]:
    r = _open(path, b"PMAP")
    out = {}
    while not r.done:
        tid, rank = r.unpack("II")
        dims = r.unpack(f"{rank}Q") if rank else ()
        out[tid] = r.array("<u4", int(np.prod(dims))).reshape(dims).astype(np.int64)
    return out


# -- MSWT -------------------------------------------------------------------


def encode_records(records: dict[str, np.ndarray], version: int = MSWT_VERSION) -> bytes:
    """Serialise named arrays in insertion order."""
    buf = io.BytesIO()
    buf.write(b"MSWT")
    buf.write(struct.pack("<I", version))
    for name, arr in records.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _DTYPE_CODES:
            raise ValueError(f"record {name!r}: unsupported dtype {arr.dtype}")
        key = name.encode("utf-8")
        buf.write(struct.pack("<I", len(key)))
        buf.write(key)
        buf.write(struct.pack("<BI", _DTYPE_CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes())
    return buf.getvalue()


def write_records(path, records: dict[str, np.ndarray]) -> None:
    atomic_write(path, encode_records(records))


def read_records(path) -> dict[str, np.ndarray]:
    r = _open(path, b"MSWT")
    (version,) = r.unpack("I")
    if version != MSWT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    while not r.done:
        (n,) = r.unpack("I")
        name = r.take(n).decode("utf-8")
        code, rank = r.unpack("BI")
        if code not in _CODE_DTYPES:
            raise FormatError(f"{path}: record {name!r} has unknown dtype code {code}")
        dims = r.unpack(f"{rank}Q") if rank else ()
        out[name] = r.array(_CODE_DTYPES[code], int(np.prod(dims))).reshape(dims)
    return out


# -- SCAL / SURF / LABL -----------------------------------------------------


def encode_scalars(values: np.ndarray) -> bytes:
    values = np.asarray(values, dtype="<f4").ravel()
    return b"SCAL" + struct.pack("<Q", values.size) + values.tobytes()


def write_scalars(path, values: np.ndarray) -> None:
    atomic_write(path, encode_scalars(values))


def read_scalars(path) -> np.ndarray:
    r = _open(path, b"SCAL")
    (n,) = r.unpack("Q")
    out = r.array("<f4", n)
    if not r.done:
        raise FormatError(f"{path}: trailing bytes")
    return out


def encode_surface(data: np.ndarray) -> bytes:
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 1:
        data = data[:, None]
    if data.ndim != 2:
        raise ValueError("surface data must be (V, C)")
    return b"SURF" + struct.pack("<QI", *data.shape) + np.ascontiguousarray(data).tobytes()


def write_surface(path, data: np.ndarray) -> None:
    atomic_write(path, encode_surface(data))


def read_surface(path) -> np.ndarray:
    r = _open(path, b"SURF")
    nv, nc = r.unpack("QI")
    out = r.array("<f4", nv * nc).reshape(nv, nc)
    if not r.done:
        raise FormatError(f"{path}: trailing bytes")
    return out


def encode_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels)
    if labels.size and labels.min() < 0:
        raise ValueError("labels must be non-negative")
    labels = labels.astype("<u4").ravel()
    return b"LABL" + struct.pack("<Q", labels.size) + labels.tobytes()


def write_labels(path, labels: np.ndarray) -> None:
    atomic_write(path, encode_labels(labels))


def read_labels(path) -> np.ndarray:
    r = _open(path, b"LABL")
    (n,) = r.unpack("Q")
    out = r.array("<u4", n).astype(np.int64)
    if not r.done:
        raise FormatError(f"{path}: trailing bytes")
    return out


# -- key-value config -------------------------------------------------------


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        # a trailing comma keeps one-element tuples distinct from scalars
        return ", ".join(_format_value(x) for x in v) + ("," if len(v) < 2 else "")
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return "none"
    return str(v)


def _parse_scalar(s: str):
    low = s.lower()
    if low in ("true", "false"):
        return low == "true"
    if low == "none":
        return None
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def _parse_value(s: str):
    s = s.strip()
    if "," in s:
        return tuple(_parse_scalar(p.strip()) for p in s.split(",") if p.strip())
    return _parse_scalar(s)


def dumps_config(sections: dict[str, dict]) -> str:
    """Render ``{section: {key: value}}`` as ``[section]`` blocks of ``key = value`` lines."""
    lines = []
    for section, values in sections.items():
        lines.append(f"[{section}]")
        for k in sorted(values):
            lines.append(f"{k} = {_format_value(values[k])}")
        lines.append("")
    return "\n".join(lines)


def loads_config(text: str) -> dict[str, dict]:
    """Parse the key-value format; blank lines and ``#`` comments are ignored.

    Raises:
        ValueError: On a malformed line or a key outside any section.
    """
    out: dict[str, dict] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = out.setdefault(line[1:-1].strip(), {})
            continue
        if "=" not in line or current is None:
            raise ValueError(f"config line {lineno}: expected 'key = value' inside a [section]")
        key, value = line.split("=", 1)
        current[key.strip()] = _parse_value(value)
    return out


def read_config(path) -> dict[str, dict]:
    try:
        return loads_config(Path(path).read_text())
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc.strerror}") from exc


def write_config(path, sections: dict[str, dict]) -> None:
    atomic_write(path, dumps_config(sections).encode("utf-8"))


def config_hash(sections: dict[str, dict]) -> str:
    """Short SHA-256 of the canonical rendering, for reproducibility headers."""
    return hashlib.sha256(dumps_config(sections).encode("utf-8")).hexdigest()[:12]
