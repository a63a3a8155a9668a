"""Scene graph: geometries, instances of sub-scenes, staged edits and commit.

A :class:`Scene` holds triangle-mesh geometries and instances. An instance
places another (flat, committed) scene with an affine transform; many
instances can share one sub-scene without copying its meshes.

Edits are staged: any modification marks the scene dirty, and nothing
becomes visible to ray queries until :meth:`Scene.commit`. Commit decides
per geometry between a bottom-up refit (vertex moves only) and a fresh
build (new geometry), and rebuilds the small top-level BVH when the set or
placement of top-level entries changed.

Geometries and instances of one scene share a single id counter; ids are
never reused.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .bvh import NO_ID, Bvh, HitBatch, PackedScene, cast_packed, gather_triangles, triangle_bounds
from .errors import (
    DirtyScene,
    EmptyMesh,
    IndexOutOfRange,
    InvalidModel,
    UncommittedSubScene,
    UnknownId,
)
from .math3d import Aabb, Ray, Transform

log = logging.getLogger(__name__)


def degenerate_face_mask(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """True for faces with a repeated index or zero area."""
    f = faces
    rep = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
    if len(f) == 0:
        return rep
    v0 = vertices[f[:, 0]]
    cr = np.cross(vertices[f[:, 1]] - v0, vertices[f[:, 2]] - v0)
    zero = ~(np.einsum("ij,ij->i", cr, cr) > 0.0)
    return rep | zero


class Mesh:
    """Triangle mesh in meters.

    Faces that repeat an index or have zero area are dropped on construction
    and counted in :attr:`dropped_faces`.
    """

    def __init__(self, vertices, faces, drop_degenerate: bool = True):
        v = np.array(vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(faces, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            bad = int(np.flatnonzero((f < 0).any(axis=1) | (f >= len(v)).any(axis=1))[0])
            raise IndexOutOfRange(f"face {bad} references a vertex outside [0, {len(v)})")
        if not np.all(np.isfinite(v)):
            raise InvalidModel("mesh vertices must be finite")
        self.dropped_faces = 0
        if drop_degenerate and len(f):
            bad = degenerate_face_mask(v, f)
            self.dropped_faces = int(bad.sum())
            if self.dropped_faces:
                log.warning("dropped %d degenerate faces", self.dropped_faces)
                f = f[~bad]
        self.vertices = v
        self.faces = f.astype(np.int32)
        self._normals = None

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_normals(self) -> np.ndarray:
        if self._normals is None:
            v = self.vertices
            f = self.faces
            n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
            self._normals = n / np.linalg.norm(n, axis=1, keepdims=True)
        return self._normals

    def bounds(self) -> Aabb:
        return Aabb.from_points(self.vertices)

    def copy(self) -> Mesh:
        return Mesh(self.vertices.copy(), self.faces.copy(), drop_degenerate=False)

    def transformed(self, m) -> Mesh:
        m = _as_affine(m)
        return Mesh(self.vertices @ m[:3, :3].T + m[:3, 3], self.faces.copy(), drop_degenerate=False)

    def __repr__(self):
        return f"Mesh(vertices={self.n_vertices}, faces={self.n_faces})"


@dataclass(eq=False)
class Geometry:
    geom_id: int
    mesh: Mesh
    name: str | None = None
    bvh: Bvh | None = None
    # vertex indices moved since the last commit
    pending_vertices: set = field(default_factory=set)
    # triangle corners in BVH leaf order, kept in sync with mesh and bvh
    tris: np.ndarray | None = None
    _row_of_face: np.ndarray | None = None
    _vertex_faces: tuple | None = None

    @property
    def bvh_generation(self) -> int:
        return -1 if self.bvh is None else self.bvh.generation

    def faces_touching(self, vertex_ids) -> np.ndarray:
        if self._vertex_faces is None:
            f = self.mesh.faces.ravel()
            order = np.argsort(f, kind="stable")
            starts = np.searchsorted(f[order], np.arange(self.mesh.n_vertices + 1))
            self._vertex_faces = (order // 3, starts)
        face_of, starts = self._vertex_faces
        vids = np.asarray(sorted(vertex_ids), dtype=np.int64)
        if len(vids) == 0:
            return np.empty(0, np.int64)
        parts = [face_of[starts[i]:starts[i + 1]] for i in vids]
        return np.unique(np.concatenate(parts))


@dataclass(eq=False)
class Instance:
    inst_id: int
    target: Scene
    matrix: np.ndarray  # 4x4 local -> parent


@dataclass
class CommitStats:
    """What the last commit did, for instrumentation and tests."""

    nodes_rebuilt: int = 0
    nodes_refit: int = 0
    blas_built: list = field(default_factory=list)
    blas_refit: list = field(default_factory=list)
    tlas_rebuilt: bool = False
    tlas_refit: bool = False


def _as_affine(t) -> np.ndarray:
    if isinstance(t, Transform):
        return t.matrix()
    m = np.asarray(t, dtype=np.float64)
    if m.shape == (3, 4):
        m = np.vstack([m, [0, 0, 0, 1]])
    if m.shape != (4, 4):
        raise InvalidModel(f"placement must be a Transform or 4x4 matrix, got shape {m.shape}")
    if not np.allclose(m[3], [0, 0, 0, 1]):
        raise InvalidModel("placement must be affine")
    if not np.all(np.isfinite(m)) or abs(np.linalg.det(m[:3, :3])) < 1e-12:
        raise InvalidModel("placement must be finite and invertible")
    return m.copy()


class Scene:
    """A flat or two-level map. See the module docstring for semantics."""

    def __init__(self, name: str | None = None):
        self.name = name
        self._geoms: dict[int, Geometry] = {}
        self._insts: dict[int, Instance] = {}
        self._next_id = 0
        self._dirty = False
        self._structure_changed = False
        self._instances_changed = False
        self.generation = 0
        self.last_commit = CommitStats()
        self._packed: PackedScene | None = None
        self._pack_layout = None
        self._sub_generations: dict[int, int] = {}
        self._tlas: Bvh | None = None
        self._empty_packed = None

    # -- staging ------------------------------------------------------------

    def add_geometry(self, mesh: Mesh, name: str | None = None) -> int:
        if mesh.n_faces == 0:
            raise EmptyMesh("mesh has no (non-degenerate) faces")
        gid = self._next_id
        self._next_id += 1
        self._geoms[gid] = Geometry(gid, mesh, name)
        self._mark(structure=True)
        return gid

    def add_instance(self, sub: Scene, placement=None) -> int:
        if sub is self:
            raise InvalidModel("a scene cannot instance itself")
        if sub.dirty or sub.generation == 0:
            raise UncommittedSubScene("sub-scene must be committed before it is instanced")
        if sub._insts:
            raise InvalidModel("instanced sub-scenes must contain geometries only")
        m = _as_affine(Transform.identity() if placement is None else placement)
        iid = self._next_id
        self._next_id += 1
        self._insts[iid] = Instance(iid, sub, m)
        self._mark(structure=True)
        return iid

    def update_instance(self, inst_id: int, placement) -> None:
        if inst_id not in self._insts:
            raise UnknownId(f"no instance with id {inst_id}")
        self._insts[inst_id].matrix = _as_affine(placement)
        self._instances_changed = True
        self._mark()

    def remove(self, obj_id: int) -> None:
        if obj_id in self._geoms:
            del self._geoms[obj_id]
        elif obj_id in self._insts:
            del self._insts[obj_id]
        else:
            raise UnknownId(f"no geometry or instance with id {obj_id}")
        self._mark(structure=True)

    def update_vertices(self, geom_id: int, updates) -> None:
        """Stage vertex moves given as ``(index, xyz)`` pairs or ``(indices, positions)``."""
        geom = self._geoms.get(geom_id)
        if geom is None:
            raise UnknownId(f"no geometry with id {geom_id}")
        if isinstance(updates, tuple) and len(updates) == 2 and np.ndim(updates[0]) == 1 \
                and np.ndim(updates[1]) == 2:
            idx, pos = updates
        else:
            updates = list(updates)
            idx = [u[0] for u in updates]
            pos = [u[1] for u in updates]
        idx = np.asarray(idx, dtype=np.int64).reshape(-1)
        pos = np.asarray(pos, dtype=np.float64).reshape(-1, 3)
        if len(idx) != len(pos):
            raise InvalidModel("indices and positions differ in length")
        n = geom.mesh.n_vertices
        if len(idx) and (idx.min() < 0 or idx.max() >= n):
            raise IndexOutOfRange(f"vertex index outside [0, {n})")
        if not np.all(np.isfinite(pos)):
            raise InvalidModel("vertex positions must be finite")
        geom.mesh.vertices[idx] = pos
        geom.mesh._normals = None
        geom.pending_vertices.update(idx.tolist())
        self._mark()

    def _mark(self, structure=False):
        self._dirty = True
        if structure:
            self._structure_changed = True

    # -- state --------------------------------------------------------------

    @property
    def dirty(self) -> bool:
        if self._dirty:
            return True
        for inst in self._insts.values():
            sub = inst.target
            if sub.dirty or self._sub_generations.get(id(sub)) != sub.generation:
                return True
        return False

    def geometries(self) -> dict[int, Geometry]:
        return dict(self._geoms)

    def instances(self) -> dict[int, Instance]:
        return dict(self._insts)

    def geometry(self, geom_id: int) -> Geometry:
        try:
            return self._geoms[geom_id]
        except KeyError:
            raise UnknownId(f"no geometry with id {geom_id}") from None

    def instance(self, inst_id: int) -> Instance:
        try:
            return self._insts[inst_id]
        except KeyError:
            raise UnknownId(f"no instance with id {inst_id}") from None

    def sub_scenes(self) -> list[Scene]:
        seen = {}
        for inst in self._insts.values():
            seen.setdefault(id(inst.target), inst.target)
        return list(seen.values())

    def distinct_geometries(self) -> list[Geometry]:
        out = list(self._geoms.values())
        for sub in self.sub_scenes():
            out.extend(sub._geoms.values())
        return out

    @property
    def stored_face_count(self) -> int:
        """Triangles held in memory: each distinct geometry counted once."""
        return sum(g.mesh.n_faces for g in self.distinct_geometries())

    @property
    def instanced_face_count(self) -> int:
        """Triangles visible in the world, counting every instance."""
        n = sum(g.mesh.n_faces for g in self._geoms.values())
        for inst in self._insts.values():
            n += sum(g.mesh.n_faces for g in inst.target._geoms.values())
        return n

    def bounds(self) -> Aabb:
        box = Aabb.empty()
        for g in self._geoms.values():
            box = box.union(g.mesh.bounds())
        for inst in self._insts.values():
            for g in inst.target._geoms.values():
                box = box.union(g.mesh.bounds().transformed(inst.matrix))
        return box

    # -- commit -------------------------------------------------------------

    def commit(self) -> None:
        if not self.dirty:
            return
        stats = CommitStats()
        for sub in self.sub_scenes():
            if sub.dirty:
                raise UncommittedSubScene("commit instanced sub-scenes before their parent")
        for g in self._geoms.values():
            self._update_blas(g, stats)

        subs_changed = any(self._sub_generations.get(id(s)) != s.generation for s in self.sub_scenes())
        layout = self._layout()
        repack = layout != self._pack_layout or self._structure_changed or subs_changed \
            or self._instances_changed or stats.blas_refit or stats.blas_built
        if repack or self._packed is None:
            self._pack(layout, stats)
        self._sub_generations = {id(s): s.generation for s in self.sub_scenes()}
        self._structure_changed = False
        self._instances_changed = False
        self._dirty = False
        self.generation += 1
        self.last_commit = stats
        log.debug("commit %s gen=%d %s", self.name, self.generation, stats)

    @staticmethod
    def _update_blas(g: Geometry, stats: CommitStats) -> None:
        mesh = g.mesh
        if g.bvh is None:
            g.bvh = Bvh.build(triangle_bounds(mesh.vertices, mesh.faces))
            g.tris = gather_triangles(mesh.vertices, mesh.faces, g.bvh.prim_order)
            g._row_of_face = np.argsort(g.bvh.prim_order)
            stats.blas_built.append(g.geom_id)
            stats.nodes_rebuilt += g.bvh.n_nodes
        elif g.pending_vertices:
            changed = g.faces_touching(g.pending_vertices)
            pb = triangle_bounds(mesh.vertices, mesh.faces)
            stats.nodes_refit += g.bvh.refit(pb, changed)
            rows = g._row_of_face[changed]
            g.tris[rows] = mesh.vertices[mesh.faces[changed]].reshape(-1, 9)
            stats.blas_refit.append(g.geom_id)
        g.pending_vertices.clear()

    def _layout(self):
        geoms = [g for _, g in sorted(self._geoms.items())]
        for sub in self.sub_scenes():
            geoms.extend(g for _, g in sorted(sub._geoms.items()))
        return tuple(id(g) for g in geoms)

    def _pack(self, layout, stats: CommitStats) -> None:
        top = [g for _, g in sorted(self._geoms.items())]
        subs = self.sub_scenes()
        geoms = list(top)
        for sub in subs:
            geoms.extend(g for _, g in sorted(sub._geoms.items()))
        gindex = {id(g): i for i, g in enumerate(geoms)}

        if len(geoms) == 1:
            g = geoms[0]
            tris = g.tris
            prim_order, nb = g.bvh.prim_order, g.bvh.bounds
            nchild, ncount = g.bvh.child, g.bvh.count
            geom_root = np.zeros(1, np.int32)
            face_off = np.zeros(1, np.int64)
        elif geoms:
            f_off = np.cumsum([0] + [g.mesh.n_faces for g in geoms])
            n_off = np.cumsum([0] + [g.bvh.n_nodes for g in geoms])
            tris = np.concatenate([g.tris for g in geoms])
            prim_order = np.concatenate([g.bvh.prim_order + f_off[i] for i, g in enumerate(geoms)]).astype(np.int32)
            nb = np.concatenate([g.bvh.bounds for g in geoms])
            ncount = np.concatenate([g.bvh.count for g in geoms])
            nchild = np.concatenate([
                g.bvh.child + np.where(g.bvh.count > 0, f_off[i], n_off[i]) for i, g in enumerate(geoms)
            ]).astype(np.int32)
            geom_root = n_off[:-1].astype(np.int32)
            face_off = f_off[:-1].astype(np.int64)
        else:
            tris = np.zeros((0, 9))
            prim_order = np.zeros(0, np.int32)
            nb = np.zeros((0, 6))
            nchild = np.zeros(0, np.int32)
            ncount = np.zeros(0, np.int32)
            geom_root = np.zeros(0, np.int32)
            face_off = np.zeros(0, np.int64)

        ent_geom, ent_inst, ent_gid, ent_xf, ent_w2l, ent_bounds = [], [], [], [], [], []
        for g in top:
            ent_geom.append(gindex[id(g)])
            ent_inst.append(NO_ID)
            ent_gid.append(g.geom_id)
            ent_xf.append(False)
            ent_w2l.append(np.eye(4)[:3])
            ent_bounds.append(g.bvh.bounds[0])
        for iid, inst in sorted(self._insts.items()):
            w2l = np.linalg.inv(inst.matrix)[:3]
            for gid, g in sorted(inst.target._geoms.items()):
                ent_geom.append(gindex[id(g)])
                ent_inst.append(iid)
                ent_gid.append(gid)
                ent_xf.append(True)
                ent_w2l.append(w2l)
                b = Aabb(g.bvh.bounds[0, :3], g.bvh.bounds[0, 3:]).transformed(inst.matrix)
                ent_bounds.append(np.concatenate([b.min, b.max]))

        n_ent = len(ent_geom)
        if n_ent:
            eb = np.asarray(ent_bounds, dtype=np.float64)
            # moved instances keep the entry set, so the top level only needs a refit
            entries_same = layout == self._pack_layout and not self._structure_changed \
                and self._tlas is not None \
                and self._tlas.n_prims == n_ent
            if entries_same:
                stats.nodes_refit += self._tlas.refit(eb)
                stats.tlas_refit = True
            else:
                self._tlas = Bvh.build(eb)
                stats.nodes_rebuilt += self._tlas.n_nodes
                stats.tlas_rebuilt = True
            tl = self._tlas
            tb, tc, tn, to = tl.bounds, tl.child, tl.count, tl.prim_order
        else:
            self._tlas = None
            tb = np.zeros((0, 6))
            tc = np.zeros(0, np.int32)
            tn = np.zeros(0, np.int32)
            to = np.zeros(0, np.int32)

        self._packed = PackedScene(
            tris, prim_order, nb, nchild, ncount, geom_root, face_off,
            np.asarray(ent_geom, np.int32).reshape(-1), np.asarray(ent_inst, np.int64).reshape(-1),
            np.asarray(ent_gid, np.int64).reshape(-1), np.asarray(ent_xf, np.bool_).reshape(-1),
            np.asarray(ent_w2l, np.float64).reshape(-1, 3, 4), tb, tc, tn, to,
        )
        self._pack_layout = layout

    def packed(self) -> PackedScene:
        """Kernel view of the committed scene. Raises :class:`DirtyScene` if stale."""
        if self.dirty:
            raise DirtyScene("scene has uncommitted modifications; call commit()")
        if self._packed is None:
            self._pack(self._layout(), CommitStats())
        return self._packed

    def tlas(self) -> Bvh | None:
        return self._tlas


@dataclass
class Hit:
    t: float
    prim_id: int
    geom_id: int
    inst_id: int
    u: float
    v: float
    normal: np.ndarray


def cast_rays(scene: Scene, origins, dirs, t_min=0.0, t_max=np.inf) -> HitBatch:
    """Closest hits for many rays (world frame). ``t_min == 0`` means 1e-4 m."""
    return cast_packed(scene.packed(), origins, dirs, t_min, t_max)


def closest_hit(scene: Scene, ray: Ray) -> Hit | None:
    hb = cast_rays(scene, ray.origin[None], ray.dir[None], ray.t_min, ray.t_max)
    if not hb.hit[0]:
        return None
    return Hit(float(hb.t[0]), int(hb.prim_id[0]), int(hb.geom_id[0]), int(hb.inst_id[0]),
               float(hb.uv[0, 0]), float(hb.uv[0, 1]), hb.normal[0].copy())


# operation-style aliases

def scene_add_geometry(s: Scene, m: Mesh) -> int:
    return s.add_geometry(m)


def scene_add_instance(s: Scene, sub: Scene, t) -> int:
    return s.add_instance(sub, t)


def scene_update_instance(s: Scene, inst_id: int, t) -> None:
    s.update_instance(inst_id, t)


def scene_remove(s: Scene, obj_id: int) -> None:
    s.remove(obj_id)


def scene_update_vertices(s: Scene, geom_id: int, updates) -> None:
    s.update_vertices(geom_id, updates)


def scene_commit(s: Scene) -> None:
    s.commit()
