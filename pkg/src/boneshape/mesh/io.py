"""PLY / OBJ mesh I/O and landmark JSON files.

PLY: ``ascii 1.0`` and ``binary_little_endian 1.0``. Only the ``vertex``
(x, y, z) and ``face`` (triangle index lists) elements are read; any other
element or property is skipped with a warning. OBJ: ``v`` and ``f``
records, 1-based (or negative, relative) indices, polygons fan-triangulated.
"""
from __future__ import annotations

import json
import logging
import os
import tempfile
from pathlib import Path

import numpy as np

from ..exceptions import FormatError, ValidationError
from .types import LandmarkSet, TriMesh

logger = logging.getLogger(__name__)

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


def _infer_format(path, fmt):
    if fmt is None:
        fmt = Path(path).suffix.lstrip(".")
    fmt = str(fmt).lower()
    if fmt not in ("ply", "obj"):
        raise FormatError(f"unsupported mesh format {fmt!r} (expected PLY or OBJ)")
    return fmt


def load_mesh(path, format=None) -> TriMesh:
    """Read a triangle mesh from a PLY or OBJ file.

    ``format`` defaults to the file suffix. Vertex order is preserved.
    """
    fmt = _infer_format(path, format)
    with open(path, "rb") as fh:
        data = fh.read()
    if fmt == "ply":
        vertices, faces = _parse_ply(data, str(path))
    else:
        vertices, faces = _parse_obj(data, str(path))
    return TriMesh(vertices, faces)


def save_mesh(mesh: TriMesh, path, format=None, binary=True):
    """Write ``mesh`` atomically. PLY is written binary little-endian unless ``binary=False``."""
    fmt = _infer_format(path, format)
    if fmt == "ply":
        payload = _ply_bytes(mesh, binary)
    else:
        payload = _obj_bytes(mesh)
    atomic_write_bytes(path, payload)


def atomic_write_bytes(path, payload: bytes):
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------- PLY

def _parse_ply_header(data: bytes, name: str):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError(f"{name}: not a PLY file (missing 'ply' magic or 'end_header')")
    nl = data.find(b"\n", end)
    body_offset = len(data) if nl < 0 else nl + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []
    for lineno, raw in enumerate(lines, start=1):
        tokens = raw.split()
        if not tokens or tokens[0] in ("ply", "comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if len(tokens) < 3 or tokens[2] != "1.0":
                raise FormatError(f"{name}: line {lineno}: bad format line {raw!r}")
            fmt = tokens[1]
            if fmt not in ("ascii", "binary_little_endian"):
                raise FormatError(f"{name}: line {lineno}: unsupported PLY encoding {fmt!r}")
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise FormatError(f"{name}: line {lineno}: bad element line {raw!r}")
            try:
                count = int(tokens[2])
            except ValueError:
                raise FormatError(f"{name}: line {lineno}: bad element count {tokens[2]!r}") from None
            elements.append({"name": tokens[1], "count": count, "props": []})
        elif tokens[0] == "property":
            if not elements:
                raise FormatError(f"{name}: line {lineno}: property before any element")
            if tokens[1] == "list":
                if len(tokens) != 5 or tokens[2] not in _PLY_TYPES or tokens[3] not in _PLY_TYPES:
                    raise FormatError(f"{name}: line {lineno}: bad list property {raw!r}")
                elements[-1]["props"].append((tokens[4], "list", _PLY_TYPES[tokens[2]], _PLY_TYPES[tokens[3]]))
            else:
                if len(tokens) != 3 or tokens[1] not in _PLY_TYPES:
                    raise FormatError(f"{name}: line {lineno}: bad property {raw!r}")
                elements[-1]["props"].append((tokens[2], "scalar", _PLY_TYPES[tokens[1]], None))
        else:
            raise FormatError(f"{name}: line {lineno}: unexpected header keyword {tokens[0]!r}")
    if fmt is None:
        raise FormatError(f"{name}: missing format line")
    header_lines = data[:body_offset].count(b"\n")
    return fmt, elements, body_offset, header_lines


def _parse_ply(data: bytes, name: str):
    fmt, elements, offset, header_lines = _parse_ply_header(data, name)
    vertices = None
    faces = None
    for el in elements:
        if el["name"] not in ("vertex", "face"):
            logger.warning("%s: ignoring PLY element %r", name, el["name"])
    if fmt == "ascii":
        lines = data[offset:].decode("ascii", errors="replace").splitlines()
        cursor = 0
        for el in elements:
            rows = lines[cursor:cursor + el["count"]]
            if len(rows) < el["count"]:
                raise FormatError(
                    f"{name}: line {header_lines + len(lines) + 1}: file ends inside element {el['name']!r}"
                )
            if el["name"] == "vertex":
                vertices = _ascii_vertices(rows, el, name, header_lines + cursor)
            elif el["name"] == "face":
                faces = _ascii_faces(rows, el, name, header_lines + cursor)
            cursor += el["count"]
    else:
        for el in elements:
            if el["name"] == "vertex":
                vertices, offset = _binary_vertices(data, offset, el, name)
            elif el["name"] == "face":
                faces, offset = _binary_faces(data, offset, el, name)
            else:
                offset = _binary_skip(data, offset, el, name)
    if vertices is None:
        raise FormatError(f"{name}: no vertex element")
    if faces is None:
        faces = np.zeros((0, 3), dtype=np.int64)
    return vertices, faces


def _xyz_columns(el, name):
    names = [p[0] for p in el["props"]]
    try:
        cols = [names.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise FormatError(f"{name}: vertex element lacks x/y/z properties") from None
    if any(el["props"][c][1] == "list" for c in cols):
        raise FormatError(f"{name}: vertex coordinates cannot be list properties")
    extra = [p[0] for p in el["props"] if p[0] not in ("x", "y", "z")]
    if extra:
        logger.warning("%s: ignoring vertex properties %s", name, extra)
    return cols


def _ascii_vertices(rows, el, name, line0):
    cols = _xyz_columns(el, name)
    if any(p[1] == "list" for p in el["props"]):
        raise FormatError(f"{name}: list properties on vertices are not supported")
    out = np.empty((len(rows), 3))
    for i, row in enumerate(rows):
        tokens = row.split()
        try:
            out[i] = [float(tokens[c]) for c in cols]
        except (ValueError, IndexError):
            raise FormatError(f"{name}: line {line0 + i + 1}: malformed vertex {row!r}") from None
    return out


def _face_prop(el, name):
    lists = [i for i, p in enumerate(el["props"]) if p[1] == "list" and p[0] in ("vertex_indices", "vertex_index")]
    if not lists:
        raise FormatError(f"{name}: face element lacks a vertex_indices list")
    return lists[0]


def _ascii_faces(rows, el, name, line0):
    which = _face_prop(el, name)
    out = np.empty((len(rows), 3), dtype=np.int64)
    for i, row in enumerate(rows):
        tokens = row.split()
        try:
            pos = 0
            for j, prop in enumerate(el["props"]):
                if prop[1] == "list":
                    n = int(tokens[pos])
                    values = tokens[pos + 1:pos + 1 + n]
                    if len(values) != n:
                        raise IndexError
                    if j == which:
                        if n != 3:
                            raise FormatError(
                                f"{name}: line {line0 + i + 1}: face {i} has {n} vertices; only triangles are supported"
                            )
                        out[i] = [int(v) for v in values]
                    pos += 1 + n
                else:
                    pos += 1
        except (ValueError, IndexError):
            raise FormatError(f"{name}: line {line0 + i + 1}: malformed face {row!r}") from None
    return out


def _binary_vertices(data, offset, el, name):
    if any(p[1] == "list" for p in el["props"]):
        raise FormatError(f"{name}: list properties on vertices are not supported")
    cols = _xyz_columns(el, name)
    dtype = np.dtype([(f"p{i}", "<" + p[2]) for i, p in enumerate(el["props"])])
    need = dtype.itemsize * el["count"]
    if offset + need > len(data):
        raise FormatError(f"{name}: byte offset {offset}: file truncated inside vertex element")
    arr = np.frombuffer(data, dtype=dtype, count=el["count"], offset=offset)
    xyz = np.stack([arr[f"p{c}"].astype(np.float64) for c in cols], axis=1)
    return xyz, offset + need


def _binary_faces(data, offset, el, name):
    which = _face_prop(el, name)
    props = el["props"]
    if len(props) == 1:
        # fast path: every face is "count i0 i1 i2"
        _, _, ctype, itype = props[0]
        dtype = np.dtype([("n", "<" + ctype), ("idx", "<" + itype, (3,))])
        need = dtype.itemsize * el["count"]
        if offset + need <= len(data):
            arr = np.frombuffer(data, dtype=dtype, count=el["count"], offset=offset)
            if np.all(arr["n"] == 3):
                return arr["idx"].astype(np.int64), offset + need
    out = np.empty((el["count"], 3), dtype=np.int64)
    for i in range(el["count"]):
        for j, prop in enumerate(props):
            if prop[1] == "list":
                values, offset = _read_list(data, offset, prop, name)
                if j == which:
                    if len(values) != 3:
                        raise FormatError(
                            f"{name}: byte offset {offset}: face {i} has {len(values)} vertices; only triangles are supported"
                        )
                    out[i] = values
            else:
                offset += np.dtype(prop[2]).itemsize
                if offset > len(data):
                    raise FormatError(f"{name}: byte offset {offset}: file truncated inside face element")
    return out, offset


def _read_list(data, offset, prop, name):
    ctype = np.dtype("<" + prop[2])
    itype = np.dtype("<" + prop[3])
    if offset + ctype.itemsize > len(data):
        raise FormatError(f"{name}: byte offset {offset}: file truncated")
    n = int(np.frombuffer(data, dtype=ctype, count=1, offset=offset)[0])
    offset += ctype.itemsize
    if offset + n * itype.itemsize > len(data):
        raise FormatError(f"{name}: byte offset {offset}: file truncated")
    values = np.frombuffer(data, dtype=itype, count=n, offset=offset).astype(np.int64)
    return values, offset + n * itype.itemsize


def _binary_skip(data, offset, el, name):
    props = el["props"]
    if all(p[1] == "scalar" for p in props):
        size = sum(np.dtype(p[2]).itemsize for p in props) * el["count"]
        if offset + size > len(data):
            raise FormatError(f"{name}: byte offset {offset}: file truncated inside element {el['name']!r}")
        return offset + size
    for _ in range(el["count"]):
        for prop in props:
            if prop[1] == "list":
                _, offset = _read_list(data, offset, prop, name)
            else:
                offset += np.dtype(prop[2]).itemsize
    return offset


def _ply_bytes(mesh: TriMesh, binary: bool) -> bytes:
    encoding = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {encoding} 1.0\n"
        f"element vertex {mesh.n_vertices}\n"
        "property double x\nproperty double y\nproperty double z\n"
        f"element face {mesh.n_faces}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    ).encode("ascii")
    if binary:
        faces = np.empty(mesh.n_faces, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
        faces["n"] = 3
        faces["idx"] = mesh.faces
        return header + mesh.vertices.astype("<f8").tobytes() + faces.tobytes()
    body = "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in mesh.vertices.tolist())
    body += "".join(f"3 {a} {b} {c}\n" for a, b, c in mesh.faces.tolist())
    return header + body.encode("ascii")


# --------------------------------------------------------------------- OBJ

def _parse_obj(data: bytes, name: str):
    vertices = []
    faces = []
    for lineno, raw in enumerate(data.decode("utf-8", errors="replace").splitlines(), start=1):
        tokens = raw.split()
        if not tokens:
            continue
        if tokens[0] == "v":
            try:
                vertices.append([float(t) for t in tokens[1:4]])
            except ValueError:
                raise FormatError(f"{name}: line {lineno}: malformed vertex {raw!r}") from None
            if len(vertices[-1]) != 3:
                raise FormatError(f"{name}: line {lineno}: vertex needs 3 coordinates")
        elif tokens[0] == "f":
            if len(tokens) < 4:
                raise FormatError(f"{name}: line {lineno}: face needs at least 3 vertices")
            try:
                idx = []
                for t in tokens[1:]:
                    k = int(t.split("/")[0])
                    idx.append(k - 1 if k > 0 else len(vertices) + k)
                    if k == 0:
                        raise ValueError
            except ValueError:
                raise FormatError(f"{name}: line {lineno}: malformed face {raw!r}") from None
            for j in range(1, len(idx) - 1):
                faces.append([idx[0], idx[j], idx[j + 1]])
    if not vertices:
        raise FormatError(f"{name}: no vertex records")
    return np.asarray(vertices, dtype=np.float64), np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def _obj_bytes(mesh: TriMesh) -> bytes:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    return ("\n".join(lines) + "\n").encode("ascii")


# --------------------------------------------------------------- landmarks

def load_landmarks(path) -> LandmarkSet:
    """Read a landmark JSON file: ``{"name": [x, y, z], ...}`` in mm."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: landmark file must hold a JSON object")
    for key, value in raw.items():
        if not (isinstance(value, list) and len(value) == 3 and all(isinstance(c, (int, float)) for c in value)):
            raise ValidationError(f"{path}: landmark {key!r} must be a list of three numbers")
    return LandmarkSet(raw)


def save_landmarks(landmarks: LandmarkSet, path):
    text = json.dumps(landmarks.to_json_dict(), indent=2) + "\n"
    atomic_write_bytes(path, text.encode("utf-8"))
