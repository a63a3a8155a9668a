"""Mesh, scene and pose loading, plus synthetic maps.

Supported inputs: OBJ (``v``, ``f``, ``o`` records; everything else is
skipped), PLY (ascii and binary_little_endian), STL (ascii and binary),
pose CSV and a TOML placement sidecar. All coordinates are taken as meters.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import NonUnitQuaternion, ParseError, UnknownObjectName, UnsupportedFeature
from .math3d import Rotation, Transform
from .scene import Mesh, Scene
from .simulation import PoseBatch

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

MESH_SUFFIXES = (".obj", ".ply", ".stl")


@dataclass
class LoadReport:
    path: str
    format: str
    vertices: int = 0
    faces: int = 0
    # faces parsed, before degenerate ones were dropped
    faces_parsed: int = 0
    degenerate_dropped: int = 0
    objects: list = field(default_factory=list)
    units: str = "m"


def _fmt(path: Path, fmt):
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt not in ("obj", "ply", "stl"):
        raise UnsupportedFeature(f"{path}: unknown mesh format '{fmt}' (expected obj, ply or stl)")
    return fmt


def _open_error(path, e):
    return ParseError(f"cannot read file: {e.strerror or e}", path)


# -- OBJ ----------------------------------------------------------------------


def _obj_index(tok: str, n_verts: int, path, lineno) -> int:
    s = tok.split("/", 1)[0]
    try:
        i = int(s)
    except ValueError:
        raise ParseError(f"bad face index '{tok}'", path, lineno) from None
    if i > 0:
        i -= 1
    elif i < 0:
        i += n_verts
    else:
        raise ParseError("face index 0 is invalid (OBJ indices start at 1)", path, lineno)
    if not 0 <= i < n_verts:
        raise ParseError(f"face index {tok} refers to a missing vertex ({n_verts} defined so far)",
                         path, lineno)
    return i


def parse_obj(path) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """Named objects ``(name, vertices, faces)``; each object gets its own
    compacted vertex array. Faces before any ``o`` record go to the file stem."""
    path = Path(path)
    verts = []
    objects = []  # name, list of triangles in global indices, first line
    name = path.stem
    tris = []
    try:
        fh = open(path, encoding="utf-8", errors="replace")
    except OSError as e:
        raise _open_error(path, e) from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                try:
                    verts.append((float(parts[1]), float(parts[2]), float(parts[3])))
                except (IndexError, ValueError):
                    raise ParseError("vertex needs three numbers", path, lineno) from None
            elif tag == "f":
                idx = [_obj_index(t, len(verts), path, lineno) for t in parts[1:]]
                if len(idx) < 3:
                    raise ParseError(f"face needs at least 3 vertices, got {len(idx)}", path, lineno)
                for k in range(1, len(idx) - 1):
                    tris.append((idx[0], idx[k], idx[k + 1]))
            elif tag == "o":
                if tris:
                    objects.append((name, tris))
                name = " ".join(parts[1:]) or f"object{len(objects)}"
                tris = []
    if tris:
        objects.append((name, tris))
    v = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    out = []
    for name, t in objects:
        f = np.asarray(t, dtype=np.int64)
        used, inv = np.unique(f, return_inverse=True)
        out.append((name, v[used], inv.reshape(-1, 3)))
    return out


# -- PLY ----------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class _PlyElement:
    name: str
    count: int
    props: list = field(default_factory=list)  # (name, dtype) or (name, count_dtype, item_dtype)


def _ply_header(fh, path):
    magic = fh.readline()
    if magic.strip() != b"ply":
        raise ParseError("missing 'ply' magic", path, 1)
    fmt = None
    elements = []
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise ParseError("header has no end_header", path, lineno)
        parts = raw.decode("ascii", "replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "end_header":
            break
        if parts[0] == "format":
            fmt = parts[1] if len(parts) > 1 else None
            if fmt == "binary_big_endian":
                raise UnsupportedFeature(f"{path}: PLY binary_big_endian is not supported")
            if fmt not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unknown PLY format '{fmt}'", path, lineno)
        elif parts[0] == "element":
            try:
                elements.append(_PlyElement(parts[1], int(parts[2])))
            except (IndexError, ValueError):
                raise ParseError("bad element line", path, lineno) from None
        elif parts[0] == "property":
            if not elements:
                raise ParseError("property before any element", path, lineno)
            try:
                if parts[1] == "list":
                    elements[-1].props.append((parts[4], _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
                else:
                    elements[-1].props.append((parts[2], _PLY_TYPES[parts[1]]))
            except (IndexError, KeyError):
                raise ParseError(f"bad property line '{raw.decode().strip()}'", path, lineno) from None
        else:
            raise ParseError(f"unexpected header line '{parts[0]}'", path, lineno)
    if fmt is None:
        raise ParseError("header has no format line", path)
    return fmt, elements, lineno


def _face_prop(el):
    for p in el.props:
        if len(p) == 3 and p[0] in ("vertex_indices", "vertex_index"):
            return p[0]
    raise ParseError("face element has no vertex_indices list")


def _ply_binary(fh, elements, path):
    data = {}
    buf = fh.read()
    pos = 0
    for el in elements:
        has_list = any(len(p) == 3 for p in el.props)
        if not has_list:
            dt = np.dtype([(p[0], "<" + p[1]) for p in el.props])
            need = dt.itemsize * el.count
            if pos + need > len(buf):
                raise ParseError(f"file ends inside element '{el.name}'", path, offset=len(buf))
            data[el.name] = np.frombuffer(buf, dt, el.count, pos)
            pos += need
            continue
        # fast path: every list has 3 entries (plain triangles)
        fields = []
        for p in el.props:
            if len(p) == 3:
                fields += [(p[0] + "#n", "<" + p[1]), (p[0], "<" + p[2], (3,))]
            else:
                fields.append((p[0], "<" + p[1]))
        dt = np.dtype(fields)
        need = dt.itemsize * el.count
        if pos + need <= len(buf):
            arr = np.frombuffer(buf, dt, el.count, pos)
            if all(np.all(arr[p[0] + "#n"] == 3) for p in el.props if len(p) == 3):
                data[el.name] = arr
                pos += need
                continue
        rows, pos = _ply_binary_slow(buf, pos, el, path)
        data[el.name] = rows
    return data


def _ply_binary_slow(buf, pos, el, path):
    rows = {p[0]: [] for p in el.props}
    for _ in range(el.count):
        for p in el.props:
            try:
                if len(p) == 3:
                    ct = np.dtype("<" + p[1])
                    n = int(np.frombuffer(buf, ct, 1, pos)[0])
                    pos += ct.itemsize
                    it = np.dtype("<" + p[2])
                    rows[p[0]].append(np.frombuffer(buf, it, n, pos))
                    pos += it.itemsize * n
                else:
                    t = np.dtype("<" + p[1])
                    rows[p[0]].append(np.frombuffer(buf, t, 1, pos)[0])
                    pos += t.itemsize
            except ValueError:
                raise ParseError(f"file ends inside element '{el.name}'", path, offset=pos) from None
    return rows, pos


def _ply_ascii(fh, elements, path, lineno):
    data = {}
    lines = iter(fh)
    for el in elements:
        rows = {p[0]: [] for p in el.props}
        for _ in range(el.count):
            raw = next(lines, None)
            lineno += 1
            if raw is None:
                raise ParseError(f"file ends inside element '{el.name}'", path, lineno)
            tok = raw.split()
            k = 0
            try:
                for p in el.props:
                    if len(p) == 3:
                        n = int(tok[k])
                        rows[p[0]].append(np.array([int(x) for x in tok[k + 1:k + 1 + n]]))
                        if len(rows[p[0]][-1]) != n:
                            raise IndexError
                        k += 1 + n
                    else:
                        rows[p[0]].append(float(tok[k]))
                        k += 1
            except (IndexError, ValueError):
                raise ParseError(f"malformed '{el.name}' record", path, lineno) from None
        data[el.name] = rows
    return data


def parse_ply(path):
    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise _open_error(path, e) from None
    with fh:
        fmt, elements, lineno = _ply_header(fh, path)
        data = _ply_ascii(fh, elements, path, lineno) if fmt == "ascii" else _ply_binary(fh, elements, path)
    by_name = {el.name: el for el in elements}
    if "vertex" not in data:
        raise ParseError("no vertex element", path)
    vx = data["vertex"]
    try:
        v = np.stack([np.asarray(vx[a], dtype=np.float64) for a in "xyz"], axis=1).reshape(-1, 3)
    except (KeyError, ValueError):
        raise ParseError("vertex element needs x, y, z properties", path) from None
    tris = []
    if "face" in data:
        fp = _face_prop(by_name["face"])
        lists = data["face"][fp]
        if isinstance(lists, np.ndarray) and lists.ndim == 2:
            tris = lists.astype(np.int64)
        else:
            out = []
            for lst in lists:
                lst = [int(x) for x in lst]
                if len(lst) < 3:
                    raise ParseError(f"face with {len(lst)} vertices", path)
                out += [(lst[0], lst[k], lst[k + 1]) for k in range(1, len(lst) - 1)]
            tris = out
    f = np.asarray(tris, dtype=np.int64).reshape(-1, 3)
    if len(f) and (f.min() < 0 or f.max() >= len(v)):
        bad = int(np.flatnonzero((f < 0).any(1) | (f >= len(v)).any(1))[0])
        raise ParseError(f"face {bad} references a vertex outside [0, {len(v)})", path)
    return v, f


# -- STL ----------------------------------------------------------------------


def parse_stl(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise _open_error(path, e) from None
    corners = None
    if len(raw) >= 84:
        n = int(np.frombuffer(raw, "<u4", 1, 80)[0])
        if len(raw) == 84 + 50 * n:
            dt = np.dtype([("n", "<f4", (3,)), ("v", "<f4", (3, 3)), ("attr", "<u2")])
            corners = np.frombuffer(raw, dt, n, 84)["v"].astype(np.float64)
    if corners is None:
        text = raw.decode("ascii", "replace")
        if not text.lstrip().startswith("solid"):
            raise ParseError("neither binary STL (size mismatch) nor ascii STL (no 'solid')", path)
        pts = []
        for lineno, line in enumerate(text.splitlines(), 1):
            parts = line.split()
            if parts and parts[0] == "vertex":
                try:
                    pts.append((float(parts[1]), float(parts[2]), float(parts[3])))
                except (IndexError, ValueError):
                    raise ParseError("vertex needs three numbers", path, lineno) from None
        if len(pts) % 3:
            raise ParseError(f"{len(pts)} vertices is not a whole number of triangles", path)
        corners = np.asarray(pts, dtype=np.float64).reshape(-1, 3, 3)
    # STL repeats shared corners per facet; merge exact duplicates
    v, inv = np.unique(corners.reshape(-1, 3), axis=0, return_inverse=True)
    return v, inv.reshape(-1, 3)


# -- entry points -------------------------------------------------------------


def _load_objects(path: Path, fmt=None):
    fmt = _fmt(path, fmt)
    if not path.exists():
        raise ParseError("no such file", path)
    if fmt == "obj":
        return fmt, parse_obj(path)
    v, f = parse_ply(path) if fmt == "ply" else parse_stl(path)
    return fmt, [(path.stem, v, f)]


def load_mesh(path, format: str | None = None) -> tuple[Mesh, LoadReport]:
    """Whole file as one mesh (all OBJ objects merged)."""
    path = Path(path)
    fmt, objs = _load_objects(path, format)
    vs, fs, off = [], [], 0
    for _, v, f in objs:
        vs.append(v)
        fs.append(f + off)
        off += len(v)
    v = np.concatenate(vs) if vs else np.zeros((0, 3))
    f = np.concatenate(fs) if fs else np.zeros((0, 3), np.int64)
    mesh = Mesh(v, f)
    rep = LoadReport(str(path), fmt, mesh.n_vertices, mesh.n_faces, len(f), mesh.dropped_faces,
                     [name for name, _, _ in objs])
    return mesh, rep


def _placement(entry, path) -> Transform:
    pos = entry.get("position", [0.0, 0.0, 0.0])
    rpy = entry.get("rpy", [0.0, 0.0, 0.0])
    scale = entry.get("scale", [1.0, 1.0, 1.0])
    if isinstance(scale, (int, float)):
        scale = [scale] * 3
    if len(pos) != 3 or len(rpy) != 3 or len(scale) != 3:
        raise ParseError(f"instance '{entry.get('name')}': position, rpy and scale need 3 values", path)
    r, p, y = (math.radians(float(a)) for a in rpy)
    return Transform(Rotation.from_rpy(r, p, y), [float(a) for a in pos], [float(a) for a in scale])


def load_placements(path) -> list[tuple[str, Transform]]:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as e:
        raise _open_error(path, e) from None
    except tomllib.TOMLDecodeError as e:
        raise ParseError(str(e), path) from None
    out = []
    for entry in doc.get("instance", []):
        if "name" not in entry:
            raise ParseError("every [[instance]] needs a name", path)
        out.append((str(entry["name"]), _placement(entry, path)))
    return out


def _default_sidecar(path: Path) -> Path | None:
    cand = path / "scene.toml" if path.is_dir() else path.with_suffix(".toml")
    return cand if cand.is_file() else None


def load_scene(path, sidecar=None) -> tuple[Scene, list[LoadReport]]:
    """Scene from a mesh file or a directory of mesh files, committed.

    Each named object becomes a geometry. Objects named in the placement
    sidecar (``<file>.toml`` or ``<dir>/scene.toml`` unless given) are
    instanced from a shared sub-scene instead of being added directly.
    """
    path = Path(path)
    if not path.exists():
        raise ParseError("no such file or directory", path)
    reports = []
    objects: dict[str, Mesh] = {}
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in MESH_SUFFIXES) if path.is_dir() else [path]
    if not files:
        raise ParseError("directory holds no .obj, .ply or .stl files", path)
    for fp in files:
        fmt, objs = _load_objects(fp)
        rep = LoadReport(str(fp), fmt)
        for name, v, f in objs:
            m = Mesh(v, f)
            if name in objects:
                log.warning("duplicate object name '%s' in %s; keeping the first", name, fp)
                continue
            rep.vertices += m.n_vertices
            rep.faces += m.n_faces
            rep.faces_parsed += len(f)
            rep.degenerate_dropped += m.dropped_faces
            rep.objects.append(name)
            if m.n_faces:
                objects[name] = m
        reports.append(rep)
    if not objects:
        raise ParseError("no triangles found", path)

    sidecar = Path(sidecar) if sidecar is not None else _default_sidecar(path)
    places = load_placements(sidecar) if sidecar is not None else []
    for name, _ in places:
        if name not in objects:
            raise UnknownObjectName(f"{sidecar}: no object named '{name}' (have: {', '.join(objects)})")

    scene = Scene(name=path.stem)
    placed = {name for name, _ in places}
    for name, m in objects.items():
        if name not in placed:
            scene.add_geometry(m, name)
    subs = {}
    for name, t in places:
        if name not in subs:
            sub = Scene(name=name)
            sub.add_geometry(objects[name], name)
            sub.commit()
            subs[name] = sub
        scene.add_instance(subs[name], t)
    scene.commit()
    return scene, reports


def load_poses(path) -> PoseBatch:
    """CSV rows ``x,y,z,qx,qy,qz,qw``; a non-numeric first row is a header."""
    path = Path(path)
    xyz, quats = [], []
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise _open_error(path, e) from None
    with fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            try:
                vals = [float(x) for x in row]
            except ValueError:
                if not xyz and lineno == 1:
                    continue
                raise ParseError(f"non-numeric pose row {row}", path, lineno) from None
            if len(vals) != 7:
                raise ParseError(f"expected 7 columns x,y,z,qx,qy,qz,qw, got {len(vals)}", path, lineno)
            q = np.asarray(vals[3:])
            n = float(np.linalg.norm(q))
            if not 0.99 <= n <= 1.01:
                raise NonUnitQuaternion(f"{path}:line {lineno}: quaternion norm {n:.6g} outside [0.99, 1.01]")
            xyz.append(vals[:3])
            quats.append(q / n)
    return PoseBatch.from_arrays(np.asarray(xyz).reshape(-1, 3), np.asarray(quats).reshape(-1, 4))


# -- synthetic maps -----------------------------------------------------------


def icosphere_level(target_faces: int) -> int:
    """Smallest ``k`` with ``20 * 4**k >= target_faces``."""
    if target_faces < 20:
        raise ValueError(f"an icosphere has at least 20 faces, asked for {target_faces}")
    k = 0
    while 20 * 4 ** k < target_faces:
        k += 1
    return k


def _icosahedron():
    t = (1.0 + 5.0 ** 0.5) / 2.0
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
    ], dtype=np.int64)
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def unit_icosphere(k: int):
    """Vertices on the unit sphere and faces of a ``k`` times subdivided icosahedron."""
    v, f = _icosahedron()
    for _ in range(k):
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        edges, inv = np.unique(e, axis=0, return_inverse=True)
        mid = v[edges[:, 0]] + v[edges[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        ab, bc, ca = len(v) + inv.reshape(3, -1)
        v = np.concatenate([v, mid])
        a, b, c = f.T
        f = np.concatenate([
            np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1),
        ])
    return v, f


def make_icosphere(target_faces: int, radius: float = 1.0) -> Mesh:
    k = icosphere_level(target_faces)
    v, f = unit_icosphere(k)
    mesh = Mesh(v * radius, f)
    mesh.subdivision_level = k
    return mesh


@lru_cache(maxsize=None)
def icosphere_chord_bound(k: int) -> float:
    """Relative depth of the tessellation: every point of a level-``k``
    icosphere of radius ``R`` is at least ``R * (1 - bound)`` from the center.

    A face's plane cuts the sphere in the face's circumcircle, so its
    distance to the center is ``sqrt(R**2 - rho**2)`` for circumradius
    ``rho``; no point of the face is closer than that.
    """
    v, f = unit_icosphere(k)
    a = v[f[:, 1]] - v[f[:, 0]]
    b = v[f[:, 2]] - v[f[:, 0]]
    la, lb = np.einsum("ij,ij->i", a, a), np.einsum("ij,ij->i", b, b)
    axb = np.cross(a, b)
    # circumcenter offset from v0: ((|a|^2 b - |b|^2 a) x (a x b)) / (2 |a x b|^2)
    cc = np.cross(la[:, None] * b - lb[:, None] * a, axb) / (2.0 * np.einsum("ij,ij->i", axb, axb))[:, None]
    rho2 = np.einsum("ij,ij->i", cc, cc)
    return float(1.0 - np.sqrt(1.0 - rho2.max()))


def make_ground_plane(half_extent: float) -> Mesh:
    if not half_extent > 0:
        raise ValueError(f"half_extent must be positive, got {half_extent}")
    h = float(half_extent)
    v = np.array([[-h, -h, 0.0], [h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0]])
    return Mesh(v, np.array([[0, 1, 2], [0, 2, 3]]))
