"""PLY and CSV writers for meshes and simulation results."""

from __future__ import annotations

import datetime as _dt
from pathlib import Path

import numpy as np

from .simulation import ATTR_NAMES, SimResult

# PLY type names for numpy dtypes
_PLY_NAME = {
    np.dtype("u1"): "uchar", np.dtype("i1"): "char",
    np.dtype("u2"): "ushort", np.dtype("i2"): "short",
    np.dtype("u4"): "uint", np.dtype("i4"): "int",
    np.dtype("f4"): "float", np.dtype("f8"): "double",
}


def _timestamp_comment():
    return "generated " + _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def write_ply_mesh(path, vertices, faces, binary: bool = True, comments=()) -> None:
    """Vertices as doubles and faces as uchar/int lists, so a reload is exact."""
    v = np.ascontiguousarray(vertices, dtype="<f8").reshape(-1, 3)
    f = np.ascontiguousarray(faces, dtype="<i4").reshape(-1, 3)
    fmt = "binary_little_endian" if binary else "ascii"
    head = ["ply", f"format {fmt} 1.0"]
    head += [f"comment {c}" for c in comments]
    head += [
        f"element vertex {len(v)}",
        "property double x", "property double y", "property double z",
        f"element face {len(f)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode("ascii"))
        if binary:
            fh.write(v.tobytes())
            rec = np.empty(len(f), np.dtype([("n", "u1"), ("i", "<i4", (3,))]))
            rec["n"] = 3
            rec["i"] = f
            fh.write(rec.tobytes())
        else:
            for x, y, z in v.tolist():
                fh.write(f"{x!r} {y!r} {z!r}\n".encode("ascii"))
            for a, b, c in f.tolist():
                fh.write(f"3 {a} {b} {c}\n".encode("ascii"))


def write_ply_points(path, columns: list[tuple[str, np.ndarray]], binary: bool = True, comments=()) -> None:
    """One ``vertex`` element whose properties are the given 1-D columns."""
    n = len(columns[0][1]) if columns else 0
    dt = np.dtype([(name, a.dtype.newbyteorder("<")) for name, a in columns])
    rec = np.empty(n, dt)
    for name, a in columns:
        rec[name] = a
    head = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0"]
    head += [f"comment {c}" for c in comments]
    head.append(f"element vertex {n}")
    head += [f"property {_PLY_NAME[a.dtype]} {name}" for name, a in columns]
    head.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode("ascii"))
        if binary:
            fh.write(rec.tobytes())
        else:
            fmts = " ".join("%.9g" if a.dtype.kind == "f" else "%d" for _, a in columns)
            np.savetxt(fh, rec, fmt=fmts.split(" "), delimiter=" ")


# attribute -> output column names
_COLUMNS = {
    "hits": ["hit"],
    "ranges": ["range"],
    "points": ["x", "y", "z"],
    "normals": ["nx", "ny", "nz"],
    "prim_ids": ["prim_id"],
    "geom_ids": ["geom_id"],
    "inst_ids": ["inst_id"],
}


def result_columns(r: SimResult, poses=None, with_index=False, mask=None):
    """Flatten selected attributes into named 1-D columns for the given poses."""
    sel = slice(None) if poses is None else poses
    cols = []
    if with_index:
        p_idx, ray_idx = np.meshgrid(np.arange(r.n_poses, dtype=np.uint32)[sel],
                                     np.arange(r.n_rays, dtype=np.uint32), indexing="ij")
        cols += [("pose", p_idx.ravel()), ("ray", ray_idx.ravel())]
    for name in ATTR_NAMES:
        a = getattr(r, name)
        if a is None:
            continue
        a = a[sel]
        if a.ndim == 3:
            cols += [(c, a[..., k].ravel()) for k, c in enumerate(_COLUMNS[name])]
        else:
            cols.append((_COLUMNS[name][0], a.ravel()))
    if mask is not None:
        m = np.asarray(mask)[sel].ravel()
        cols = [(c, a[m]) for c, a in cols]
    return cols


def write_result_ply(path, r: SimResult, poses=None, with_index=False, mask=None,
                     binary=True, deterministic=False) -> int:
    """Point cloud of the given poses; ``with_index`` adds pose and ray columns."""
    cols = result_columns(r, poses, with_index=with_index, mask=mask)
    comments = ["meshray point cloud, sensor frame, meters"]
    if not deterministic:
        comments.append(_timestamp_comment())
    write_ply_points(path, cols, binary=binary, comments=comments)
    return len(cols[0][1]) if cols else 0


def write_result_csv(path, r: SimResult, mask=None) -> int:
    """Header ``pose,ray,<attributes>``, one row per measurement."""
    cols = result_columns(r, with_index=True, mask=mask)
    rec = np.empty(len(cols[0][1]), np.dtype([(c, a.dtype) for c, a in cols]))
    for c, a in cols:
        rec[c] = a
    fmts = ["%.9g" if a.dtype.kind == "f" else "%d" for _, a in cols]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(c for c, _ in cols) + "\n")
        np.savetxt(fh, rec, fmt=fmts, delimiter=",")
    return len(rec)


def split_path(out: Path, i: int, n: int) -> Path:
    """``cloud.ply`` -> ``cloud_0003.ply`` when writing one file per pose."""
    if n == 1:
        return out
    width = max(4, len(str(n - 1)))
    return out.with_name(f"{out.stem}_{i:0{width}d}{out.suffix}")
