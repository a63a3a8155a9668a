"""Batch simulation: many base poses, one rig, one traversal per ray.

For pose ``T_bm`` (base -> map) and mounting ``T_sb`` (sensor -> base) the
sensor-frame ray is carried into the map by ``T_bm ∘ T_sb``, traced once,
and every requested attribute is filled from that single closest hit.
All outputs are expressed in the sensor frame.

Buffers are pose-major: ``ranges[p, i]`` with ``i = v * W + h``. A miss is
encoded as hit 0, range +inf, NaN point and normal, ids ``0xFFFFFFFF``.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
from numba import njit, prange

from .bvh import NO_ID, STACK_SIZE, _trace, set_num_threads
from .errors import EmptyPoseBatch, InvalidModel, MissingAttributes
from .math3d import Rotation, Transform
from .scene import Scene
from .sensors import SensorRig

ATTR_NAMES = ("hits", "ranges", "points", "normals", "prim_ids", "geom_ids", "inst_ids")


@dataclass(frozen=True)
class AttrSelection:
    hits: bool = False
    ranges: bool = False
    points: bool = False
    normals: bool = False
    prim_ids: bool = False
    geom_ids: bool = False
    inst_ids: bool = False

    def __post_init__(self):
        if not any(self.flags()):
            raise InvalidModel("select at least one attribute")

    def flags(self) -> tuple:
        return tuple(bool(getattr(self, n)) for n in ATTR_NAMES)

    @property
    def names(self) -> list[str]:
        return [n for n in ATTR_NAMES if getattr(self, n)]

    @classmethod
    def from_names(cls, names) -> AttrSelection:
        """``"ranges,points"``, a list of names, or ``"all"``. ``ids`` selects all three id kinds."""
        if isinstance(names, str):
            names = [s.strip() for s in names.split(",") if s.strip()]
        chosen = set()
        for n in names:
            n = n.lower()
            if n == "all":
                chosen.update(ATTR_NAMES)
            elif n == "ids":
                chosen.update(("prim_ids", "geom_ids", "inst_ids"))
            elif n in ATTR_NAMES:
                chosen.add(n)
            elif n + "s" in ATTR_NAMES:
                chosen.add(n + "s")
            else:
                raise InvalidModel(f"unknown attribute '{n}', expected {', '.join(ATTR_NAMES)}, ids or all")
        return cls(**{n: True for n in chosen})

    @classmethod
    def all(cls) -> AttrSelection:
        return cls(*([True] * len(ATTR_NAMES)))

    @classmethod
    def every_nonempty(cls) -> list[AttrSelection]:
        return [cls(*bits) for bits in product((False, True), repeat=len(ATTR_NAMES)) if any(bits)]


class PoseBatch:
    """Rigid base -> map poses, stored as ``(P, 4, 4)`` matrices."""

    def __init__(self, poses):
        mats = []
        for t in poses:
            if isinstance(t, Transform):
                if not t.is_rigid:
                    raise InvalidModel(f"poses must be rigid, got scale {t.scale}")
                mats.append(t.matrix())
            else:
                m = np.asarray(t, dtype=np.float64)
                if m.shape != (4, 4):
                    raise InvalidModel(f"pose must be a Transform or 4x4 matrix, got shape {m.shape}")
                r = m[:3, :3]
                if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or np.linalg.det(r) < 0:
                    raise InvalidModel("pose matrix is not a rigid transform")
                mats.append(m)
        if not mats:
            raise EmptyPoseBatch("pose batch is empty")
        self.matrices = np.ascontiguousarray(np.stack(mats))

    @classmethod
    def from_arrays(cls, xyz, quat_xyzw) -> PoseBatch:
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        q = np.asarray(quat_xyzw, dtype=np.float64).reshape(-1, 4)
        if len(xyz) != len(q):
            raise InvalidModel(f"{len(xyz)} positions but {len(q)} orientations")
        return cls([Transform(Rotation.from_quaternion(w, x, y, z), p) for p, (x, y, z, w) in zip(xyz, q)])

    @classmethod
    def from_positions(cls, xyz) -> PoseBatch:
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        if len(xyz) == 0:
            raise EmptyPoseBatch("pose batch is empty")
        m = np.tile(np.eye(4), (len(xyz), 1, 1))
        m[:, :3, 3] = xyz
        return cls(m)

    def __len__(self):
        return len(self.matrices)

    def __getitem__(self, i) -> Transform:
        return Transform.from_matrix(self.matrices[i])


@dataclass
class SimResult:
    """Unselected attributes are ``None``. Arrays are ``(P, R)`` or ``(P, R, 3)``."""

    n_poses: int
    n_rays: int
    width: int
    selection: AttrSelection
    hits: np.ndarray | None = None
    ranges: np.ndarray | None = None
    points: np.ndarray | None = None
    normals: np.ndarray | None = None
    prim_ids: np.ndarray | None = None
    geom_ids: np.ndarray | None = None
    inst_ids: np.ndarray | None = None
    # rays traced per pose, from the kernel's own counter
    casts: np.ndarray | None = None

    def attributes(self) -> dict:
        return {n: getattr(self, n) for n in ATTR_NAMES if getattr(self, n) is not None}


_ATTR_SHAPES = {
    "hits": (np.uint8, False),
    "ranges": (np.float32, False),
    "points": (np.float32, True),
    "normals": (np.float32, True),
    "prim_ids": (np.uint32, False),
    "geom_ids": (np.uint32, False),
    "inst_ids": (np.uint32, False),
}


@njit(parallel=True, cache=True, error_model="numpy")
def _simulate_kernel(S, poses, o_s, d_s, tmin, tmax, width, want,
                     hits, ranges, points, normals, prim, geom, inst, casts):
    n_poses = poses.shape[0]
    n_rays = d_s.shape[0]
    height = n_rays // width
    for blk in prange(n_poses * height):
        p = blk // height
        v = blk - p * height
        stack = np.empty(STACK_SIZE, np.int32)
        stack_t = np.empty(STACK_SIZE)
        tstack = np.empty(STACK_SIZE, np.int32)
        tstack_t = np.empty(STACK_SIZE)
        M = poses[p]
        n_cast = 0
        for i in range(v * width, (v + 1) * width):
            sx = o_s[i, 0]
            sy = o_s[i, 1]
            sz = o_s[i, 2]
            ux = d_s[i, 0]
            uy = d_s[i, 1]
            uz = d_s[i, 2]
            ox = M[0, 0] * sx + M[0, 1] * sy + M[0, 2] * sz + M[0, 3]
            oy = M[1, 0] * sx + M[1, 1] * sy + M[1, 2] * sz + M[1, 3]
            oz = M[2, 0] * sx + M[2, 1] * sy + M[2, 2] * sz + M[2, 3]
            dx = M[0, 0] * ux + M[0, 1] * uy + M[0, 2] * uz
            dy = M[1, 0] * ux + M[1, 1] * uy + M[1, 2] * uz
            dz = M[2, 0] * ux + M[2, 1] * uy + M[2, 2] * uz
            found, t, e, f, bu, bv, nx, ny, nz = _trace(
                S, ox, oy, oz, dx, dy, dz, tmin, tmax, stack, stack_t, tstack, tstack_t, None, None)
            n_cast += 1
            if found:
                if want[0]:
                    hits[p, i] = 1
                if want[1]:
                    ranges[p, i] = t
                if want[2]:
                    points[p, i, 0] = sx + t * ux
                    points[p, i, 1] = sy + t * uy
                    points[p, i, 2] = sz + t * uz
                if want[3]:
                    # world normal back into the sensor frame: R^T n
                    qx = M[0, 0] * nx + M[1, 0] * ny + M[2, 0] * nz
                    qy = M[0, 1] * nx + M[1, 1] * ny + M[2, 1] * nz
                    qz = M[0, 2] * nx + M[1, 2] * ny + M[2, 2] * nz
                    if qx * ux + qy * uy + qz * uz > 0.0:
                        qx = -qx
                        qy = -qy
                        qz = -qz
                    normals[p, i, 0] = qx
                    normals[p, i, 1] = qy
                    normals[p, i, 2] = qz
                if want[4]:
                    prim[p, i] = f - S.geom_face_offset[S.ent_geom[e]]
                if want[5]:
                    geom[p, i] = S.ent_gid[e]
                if want[6]:
                    inst[p, i] = S.ent_inst[e]
            else:
                if want[0]:
                    hits[p, i] = 0
                if want[1]:
                    ranges[p, i] = np.inf
                if want[2]:
                    points[p, i, 0] = np.nan
                    points[p, i, 1] = np.nan
                    points[p, i, 2] = np.nan
                if want[3]:
                    normals[p, i, 0] = np.nan
                    normals[p, i, 1] = np.nan
                    normals[p, i, 2] = np.nan
                if want[4]:
                    prim[p, i] = NO_ID
                if want[5]:
                    geom[p, i] = NO_ID
                if want[6]:
                    inst[p, i] = NO_ID
        casts[blk] = n_cast


def _pose_array(poses) -> np.ndarray:
    if not isinstance(poses, PoseBatch):
        poses = PoseBatch(poses)
    return poses.matrices


def simulate(scene: Scene, rig: SensorRig, poses, sel: AttrSelection | None = None,
             threads: int | None = None) -> SimResult:
    """Trace ``rig`` from every pose in ``poses`` and fill the selected buffers.

    Raises DirtyScene if ``scene`` has uncommitted edits.
    """
    if sel is None:
        sel = AttrSelection(ranges=True)
    S = scene.packed()
    P = _pose_array(poses)
    mount = rig.t_sb.matrix()
    chain = np.ascontiguousarray(P @ mount)[:, :3, :]
    o_s, d_s = rig.model.rays()
    o_s = np.ascontiguousarray(o_s, dtype=np.float64)
    d_s = np.ascontiguousarray(d_s, dtype=np.float64)
    n_p, n_r, width = len(chain), len(d_s), rig.model.width

    want = np.array(sel.flags(), dtype=np.bool_)
    bufs = {}
    for name, on in zip(ATTR_NAMES, sel.flags()):
        dtype, vec = _ATTR_SHAPES[name]
        shape = (n_p, n_r, 3) if vec else (n_p, n_r)
        if not on:
            shape = (0,) * len(shape)
        bufs[name] = np.empty(shape, dtype)
    casts = np.zeros(n_p * rig.model.height, np.int64)

    if threads is not None:
        set_num_threads(threads)
    _simulate_kernel(S, chain, o_s, d_s, float(rig.model.t_min), float(rig.model.t_max), width, want,
                     *(bufs[n] for n in ATTR_NAMES), casts)
    out = {n: bufs[n] if on else None for n, on in zip(ATTR_NAMES, sel.flags())}
    return SimResult(n_p, n_r, width, sel, casts=casts.reshape(n_p, -1).sum(axis=1), **out)


def simulate_ranges(scene: Scene, rig: SensorRig, poses, threads: int | None = None) -> np.ndarray:
    return simulate(scene, rig, poses, AttrSelection(ranges=True), threads).ranges


def result_point_consistency_check(r: SimResult, rig: SensorRig, tol: float = 1e-4) -> int:
    """Count hits whose point is farther than ``tol`` from ``origin + range * dir``."""
    if r.ranges is None or r.points is None:
        raise MissingAttributes("consistency check needs ranges and points")
    o, d = rig.model.rays()
    rng = r.ranges.astype(np.float64)
    hit = np.isfinite(rng)
    expect = o[None] + np.where(hit, rng, 0.0)[..., None] * d[None]
    err = np.linalg.norm(r.points.astype(np.float64) - expect, axis=-1)
    return int(np.count_nonzero(hit & ~(err <= tol)))
