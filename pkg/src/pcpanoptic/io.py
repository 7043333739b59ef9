"""Readers and writers: PLY point clouds, PPRD prediction files, JSON reports.

All binary data is little-endian. Positions and prediction arrays are stored
as IEEE-754 single precision and widened to float64 on read.

PPRD layout (24-byte header, then payload)::

    magic     4s   b"PPRD"
    version   u32  1
    n_points  u64
    n_classes u16
    emb_dim   u16
    flags     u32  bit0 probs, bit1 embeddings, bit2 offsets

followed by row-major float32 arrays in the order probs, embeddings, offsets.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .model import PointCloud, PredictionSet


class FormatError(ValueError):
    """Malformed input file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def atomic_write(path, data: bytes):
    """Write ``data`` so that ``path`` either gets the full content or nothing."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_many(items):
    """Write several ``(path, bytes)`` pairs; on any failure none of them is replaced."""
    staged = []
    try:
        for path, data in items:
            path = Path(path)
            fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=".tmp-")
            staged.append((tmp, path))
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
        for tmp, path in staged:
            os.replace(tmp, path)
    except BaseException:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)
        raise


# --------------------------------------------------------------------------- PLY


class _Element:
    def __init__(self, name, count):
        self.name = name
        self.count = count
        self.props = []  # (name, dtype) or (name, (count_dtype, item_dtype))

    @property
    def has_lists(self):
        return any(isinstance(t, tuple) for _, t in self.props)

    def dtype(self):
        return np.dtype([(n, "<" + t) for n, t in self.props])


def _parse_header(buf: bytes):
    if not buf.startswith(b"ply"):
        raise FormatError("missing 'ply' magic", 0)
    pos = 0
    fmt = None
    elements = []
    while True:
        end = buf.find(b"\n", pos)
        if end < 0:
            raise FormatError("header not terminated by end_header", len(buf))
        line = buf[pos:end].decode("ascii", errors="replace").strip()
        line_start, pos = pos, end + 1
        if not line:
            continue
        words = line.split()
        key = words[0]
        if key == "ply" or key in ("comment", "obj_info"):
            continue
        if key == "format":
            if len(words) != 3 or words[2] != "1.0":
                raise FormatError(f"unsupported format line {line!r}", line_start)
            fmt = words[1]
            if fmt == "binary_big_endian":
                raise FormatError("big-endian PLY is not supported", line_start)
            if fmt not in ("ascii", "binary_little_endian"):
                raise FormatError(f"unknown PLY format {fmt!r}", line_start)
        elif key == "element":
            try:
                elements.append(_Element(words[1], int(words[2])))
            except (IndexError, ValueError):
                raise FormatError(f"malformed element line {line!r}", line_start) from None
            if elements[-1].count < 0:
                raise FormatError("negative element count", line_start)
        elif key == "property":
            if not elements:
                raise FormatError("property before any element", line_start)
            try:
                if words[1] == "list":
                    ctype, itype, name = _PLY_TYPES[words[2]], _PLY_TYPES[words[3]], words[4]
                    elements[-1].props.append((name, (ctype, itype)))
                else:
                    elements[-1].props.append((words[2], _PLY_TYPES[words[1]]))
            except (IndexError, KeyError):
                raise FormatError(f"malformed property line {line!r}", line_start) from None
        elif key == "end_header":
            break
        else:
            raise FormatError(f"unexpected header line {line!r}", line_start)
    if fmt is None:
        raise FormatError("header has no format line", 0)
    return fmt, elements, pos


def _scalar_columns(el, rows):
    cols = {}
    for j, (name, t) in enumerate(el.props):
        if not isinstance(t, tuple):
            cols[name] = np.array([row[j] for row in rows], dtype=np.float64)
    return cols


def _read_binary(buf, elements, pos):
    data = {}
    for el in elements:
        if not el.has_lists:
            dt = el.dtype()
            need = dt.itemsize * el.count
            if len(buf) - pos < need:
                complete = (len(buf) - pos) // max(dt.itemsize, 1)
                raise FormatError(
                    f"element '{el.name}' declares {el.count} rows but only {complete} are present",
                    pos + complete * dt.itemsize,
                )
            data[el.name] = np.frombuffer(buf, dtype=dt, count=el.count, offset=pos)
            pos += need
            continue
        # list properties force a row-by-row walk
        rows = []
        for r in range(el.count):
            row = []
            for name, t in el.props:
                if isinstance(t, tuple):
                    cdt, idt = np.dtype("<" + t[0]), np.dtype("<" + t[1])
                    if len(buf) - pos < cdt.itemsize:
                        raise FormatError(f"element '{el.name}' truncated at row {r}", pos)
                    n = int(np.frombuffer(buf, cdt, 1, pos)[0])
                    pos += cdt.itemsize
                    if n < 0 or len(buf) - pos < n * idt.itemsize:
                        raise FormatError(f"element '{el.name}' truncated at row {r}", pos)
                    row.append(np.frombuffer(buf, idt, n, pos))
                    pos += n * idt.itemsize
                else:
                    dt = np.dtype("<" + t)
                    if len(buf) - pos < dt.itemsize:
                        raise FormatError(f"element '{el.name}' truncated at row {r}", pos)
                    row.append(np.frombuffer(buf, dt, 1, pos)[0])
                    pos += dt.itemsize
            rows.append(row)
        data[el.name] = _scalar_columns(el, rows)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last element", pos)
    return data


def _read_ascii(buf, elements, pos):
    # (start offset, tokens) for every non-blank body line
    lines = []
    for raw in buf[pos:].split(b"\n"):
        if raw.strip():
            lines.append((pos, raw.split()))
        pos += len(raw) + 1
    end = len(buf)
    cursor = 0
    data = {}
    for el in elements:
        if len(lines) - cursor < el.count:
            raise FormatError(
                f"element '{el.name}' declares {el.count} rows but only {len(lines) - cursor} are present",
                end,
            )
        chunk = lines[cursor:cursor + el.count]
        cursor += el.count
        if not el.has_lists:
            width = len(el.props)
            for off, toks in chunk:
                if len(toks) != width:
                    raise FormatError(f"element '{el.name}' row has {len(toks)} values, expected {width}", off)
            arr = np.zeros(el.count, dtype=el.dtype())
            if el.count:
                try:
                    table = np.array([[float(t) for t in toks] for _, toks in chunk])
                except ValueError:
                    raise FormatError(f"non-numeric value in element '{el.name}'", chunk[0][0]) from None
                for j, (name, _) in enumerate(el.props):
                    arr[name] = table[:, j]
            data[el.name] = arr
        else:
            rows = []
            for off, toks in chunk:
                row, i = [], 0
                try:
                    for name, t in el.props:
                        if isinstance(t, tuple):
                            n = int(toks[i])
                            row.append(toks[i + 1:i + 1 + n])
                            i += 1 + n
                        else:
                            row.append(float(toks[i]))
                            i += 1
                except (IndexError, ValueError):
                    raise FormatError(f"malformed row in element '{el.name}'", off) from None
                if i != len(toks):
                    raise FormatError(f"malformed row in element '{el.name}'", off)
                rows.append(row)
            data[el.name] = _scalar_columns(el, rows)
    if cursor != len(lines):
        raise FormatError(f"{len(lines) - cursor} extra rows after last element", lines[cursor][0])
    return data


def read_ply(path) -> PointCloud:
    """Parse an ASCII or binary little-endian PLY into a :class:`PointCloud`.

    Recognized vertex properties: ``x, y, z`` (required), ``red, green, blue``,
    ``sem`` and ``ins``. Other properties and elements are skipped.
    """
    buf = Path(path).read_bytes()
    fmt, elements, pos = _parse_header(buf)
    vertex = next((el for el in elements if el.name == "vertex"), None)
    if vertex is None:
        raise FormatError("no 'vertex' element in header", 0)
    names = {n for n, t in vertex.props if not isinstance(t, tuple)}
    missing = {"x", "y", "z"} - names
    if missing:
        raise FormatError(f"vertex element lacks properties {sorted(missing)}", 0)
    data = _read_binary(buf, elements, pos) if fmt == "binary_little_endian" else _read_ascii(buf, elements, pos)
    v = data["vertex"]
    positions = np.column_stack([np.asarray(v[c], dtype=np.float64) for c in "xyz"]) if vertex.count else np.zeros((0, 3))
    colors = None
    if {"red", "green", "blue"} <= names:
        colors = np.column_stack([np.asarray(v[c]) for c in ("red", "green", "blue")]).astype(np.uint8)
    semantic = np.asarray(v["sem"], dtype=np.int64) if "sem" in names else None
    instance = np.asarray(v["ins"], dtype=np.int64) if "ins" in names else None
    return PointCloud(positions, colors, semantic, instance)


def write_ply(cloud: PointCloud, path, binary: bool = True):
    """Write ``cloud`` as PLY; label properties are emitted only when present."""
    atomic_write(path, encode_ply(cloud, binary))


def encode_ply(cloud: PointCloud, binary: bool = True) -> bytes:
    n = len(cloud)
    cols = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    header_props = ["property float x", "property float y", "property float z"]
    if cloud.colors is not None:
        cols += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        header_props += ["property uchar red", "property uchar green", "property uchar blue"]
    if cloud.semantic is not None:
        cols.append(("sem", "<i4"))
        header_props.append("property int sem")
    if cloud.instance is not None:
        cols.append(("ins", "<i4"))
        header_props.append("property int ins")
    arr = np.zeros(n, dtype=cols)
    for j, c in enumerate("xyz"):
        arr[c] = cloud.positions[:, j]
    if cloud.colors is not None:
        for j, c in enumerate(("red", "green", "blue")):
            arr[c] = cloud.colors[:, j]
    if cloud.semantic is not None:
        arr["sem"] = cloud.semantic
    if cloud.instance is not None:
        arr["ins"] = cloud.instance
    fmt = "binary_little_endian" if binary else "ascii"
    header = "\n".join(["ply", f"format {fmt} 1.0", f"element vertex {n}", *header_props, "end_header"]) + "\n"
    if binary:
        body = arr.tobytes()
    else:
        lines = []
        for row in arr:
            vals = []
            for name, dt in cols:
                x = row[name]
                vals.append(repr(float(x)) if dt == "<f4" else str(int(x)))
            lines.append(" ".join(vals))
        body = ("\n".join(lines) + ("\n" if lines else "")).encode("ascii")
    return header.encode("ascii") + body


# -------------------------------------------------------------------------- PPRD

PPRD_MAGIC = b"PPRD"
PPRD_VERSION = 1
_HEADER = struct.Struct("<4sIQHHI")
FLAG_PROBS, FLAG_EMBEDDINGS, FLAG_OFFSETS = 1, 2, 4


def encode_predictions(preds: PredictionSet) -> bytes:
    flags = 0
    parts = []
    n = len(preds)
    if preds.class_probs is not None:
        flags |= FLAG_PROBS
        parts.append(preds.class_probs)
    if preds.embeddings is not None:
        flags |= FLAG_EMBEDDINGS
        parts.append(preds.embeddings)
    if preds.offsets is not None:
        flags |= FLAG_OFFSETS
        parts.append(preds.offsets)
    header = _HEADER.pack(PPRD_MAGIC, PPRD_VERSION, n, preds.num_classes, preds.emb_dim, flags)
    return header + b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in parts)


def decode_predictions(buf: bytes) -> PredictionSet:
    if len(buf) < _HEADER.size:
        raise FormatError(f"file shorter than the {_HEADER.size}-byte header", len(buf))
    magic, version, n, n_classes, emb_dim, flags = _HEADER.unpack_from(buf, 0)
    if magic != PPRD_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {PPRD_MAGIC!r}", 0)
    if version != PPRD_VERSION:
        raise FormatError(f"unsupported PPRD version {version}", 4)
    if flags & ~7:
        raise FormatError(f"unknown flag bits {flags:#x}", 20)
    if not flags & 7:
        raise FormatError("no prediction arrays flagged", 20)
    widths = []
    if flags & FLAG_PROBS:
        widths.append(("class_probs", n_classes))
    if flags & FLAG_EMBEDDINGS:
        widths.append(("embeddings", emb_dim))
    if flags & FLAG_OFFSETS:
        widths.append(("offsets", 3))
    expected = _HEADER.size + 4 * n * sum(w for _, w in widths)
    if len(buf) != expected:
        raise FormatError(f"size mismatch: header implies {expected} bytes, file has {len(buf)}", min(len(buf), expected))
    arrays = {}
    pos = _HEADER.size
    for name, w in widths:
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=n * w, offset=pos).reshape(n, w).astype(np.float64)
        pos += 4 * n * w
    try:
        return PredictionSet(**arrays)
    except ValueError as exc:
        raise FormatError(f"invalid prediction content: {exc}", _HEADER.size) from None


def write_predictions(preds: PredictionSet, path):
    atomic_write(path, encode_predictions(preds))


def read_predictions(path) -> PredictionSet:
    return decode_predictions(Path(path).read_bytes())


# ------------------------------------------------------------------------ report


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return None if math.isnan(x) else x
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=False) + "\n"


def write_report(report, path):
    """Serialize a metrics report (or any mapping) as JSON.

    Floats are written with ``repr`` precision (17 significant digits).
    """
    payload = report.to_dict() if hasattr(report, "to_dict") else report
    atomic_write(path, dumps_json(payload).encode("utf-8"))


def read_report(path) -> dict:
    return json.loads(Path(path).read_text())
