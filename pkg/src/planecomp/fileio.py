"""Deterministic file formats: PLY point clouds, OBJ meshes, canonical JSON.

All JSON written here is byte-stable for identical inputs (sorted keys, fixed
separators).  PLY uses double precision so ground-truth partition tolerances
survive a round trip.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .diffkit import FormatError

FORMAT_VERSION = 1


def dump_json(obj, path) -> None:
    Path(path).write_text(canonical_json(obj) + "\n", encoding="utf-8")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2)


def load_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid JSON in {path}: {e}") from e


def write_ply(path, points: np.ndarray, binary: bool = True) -> None:
    pts = np.ascontiguousarray(np.asarray(points, dtype="<f8"))
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (n, 3) points, got {pts.shape}")
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {pts.shape[0]}\n"
        "property double x\n"
        "property double y\n"
        "property double z\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(pts.tobytes())
        else:
            lines = [" ".join(repr(float(c)) for c in row) for row in pts]
            fh.write(("\n".join(lines) + "\n").encode("ascii"))


def read_ply(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError(f"{path} is not a PLY file")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[end + len(b"end_header\n"):]
    fmt = None
    count = None
    props: list[str] = []
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element" and parts[1] == "vertex":
            count = int(parts[2])
        elif parts[0] == "property" and len(parts) == 3:
            props.append(parts[1])
    if fmt is None or count is None:
        raise FormatError(f"malformed PLY header in {path}")
    if len(props) < 3:
        raise FormatError(f"PLY in {path} lacks x/y/z properties")
    dtype_map = {"double": "<f8", "float": "<f4", "float64": "<f8", "float32": "<f4"}
    try:
        dtypes = [dtype_map[p] for p in props[:3]]
    except KeyError as e:
        raise FormatError(f"unsupported PLY property type {e} in {path}") from e
    if fmt == "ascii":
        rows = body.decode("ascii").split()
        vals = np.array(rows[: count * len(props)], dtype=np.float64)
        return vals.reshape(count, len(props))[:, :3].copy()
    if fmt == "binary_little_endian":
        rec = np.dtype([(f"c{i}", dt) for i, dt in enumerate(dtypes)])
        if len(props) > 3:
            raise FormatError("binary PLY with extra properties is not supported")
        arr = np.frombuffer(body[: count * rec.itemsize], dtype=rec, count=count)
        return np.stack([arr[f"c{i}"].astype(np.float64) for i in range(3)], axis=1)
    raise FormatError(f"unsupported PLY format '{fmt}' in {path}")


def write_obj(path, vertices: np.ndarray, faces) -> None:
    """Polygon OBJ; faces are iterables of 0-based vertex indices."""
    verts = np.asarray(vertices, dtype=np.float64)
    lines = [f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}" for v in verts]
    for face in faces:
        lines.append("f " + " ".join(str(int(i) + 1) for i in face))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_obj(path) -> tuple[np.ndarray, list[list[int]]]:
    verts = []
    faces = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(tok.split("/")[0]) - 1 for tok in parts[1:]])
    return np.array(verts, dtype=np.float64), faces
