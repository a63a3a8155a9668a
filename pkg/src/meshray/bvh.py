"""Binary BVH: binned SAH construction, bottom-up refit and closest-hit traversal.

Nodes live in flat arrays. Siblings are allocated next to each other, so an
interior node stores only its left child index (the right child is
``left + 1``), and a parent always has a smaller index than its children.
Leaves store the start of their range in ``prim_order`` and a primitive
count; interior nodes have a count of zero.

The traversal kernels are shared by ``closest_hit`` and the batch simulation
engine and operate on a :class:`PackedScene`: every geometry's BVH and mesh
concatenated into global arrays, plus a top-level BVH over "entries" (one per
top-level geometry and one per (instance, sub-scene geometry) pair).
"""

from __future__ import annotations

import math
from collections import namedtuple
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from .errors import CountMismatch, EmptyInput
from .math3d import RAY_EPSILON, Aabb, Ray

MAX_LEAF_SIZE = 4
N_BINS = 16
TRAVERSAL_COST = 1.0
INTERSECTION_COST = 1.5
MAX_DEPTH = 64
BARY_EPS = 1e-9
NO_ID = 0xFFFFFFFF

STACK_SIZE = 2 * MAX_DEPTH + 8
# Slab intervals are widened by this relative/absolute amount so rounding in
# the box test can never cull a triangle the exact intersection would accept.
_SLAB_PAD = 1e-11


# --------------------------------------------------------------------------
# construction


@njit(cache=True)
def _area(b0, b1, b2, b3, b4, b5):
    dx = b3 - b0
    dy = b4 - b1
    dz = b5 - b2
    return 2.0 * (dx * dy + dy * dz + dz * dx)


@njit(cache=True)
def _ceil_log2(n):
    k = 0
    m = 1
    while m < n:
        m *= 2
        k += 1
    return k


@njit(cache=True)
def _build_kernel(pb, max_leaf, n_bins, c_trav, c_isect, max_depth):
    n = pb.shape[0]
    order = np.arange(n).astype(np.int32)
    cap = 2 * n - 1
    bounds = np.empty((cap, 6))
    child = np.full(cap, -1, np.int32)
    count = np.zeros(cap, np.int32)
    parent = np.full(cap, -1, np.int32)

    cen = np.empty((n, 3))
    for i in range(n):
        for a in range(3):
            cen[i, a] = 0.5 * (pb[i, a] + pb[i, a + 3])

    st_node = np.empty(4 * max_depth + 8, np.int64)
    st_start = np.empty(4 * max_depth + 8, np.int64)
    st_end = np.empty(4 * max_depth + 8, np.int64)
    st_depth = np.empty(4 * max_depth + 8, np.int64)
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = n
    st_depth[0] = 0
    sp = 1
    n_nodes = 1
    tree_depth = 0

    bin_cnt = np.zeros(n_bins, np.int64)
    bin_b = np.empty((n_bins, 6))
    left_area = np.empty(n_bins)
    left_cnt = np.empty(n_bins, np.int64)
    lo = np.empty(3)
    hi = np.empty(3)
    clo = np.empty(3)
    chi = np.empty(3)

    while sp > 0:
        sp -= 1
        node = st_node[sp]
        start = st_start[sp]
        end = st_end[sp]
        d = st_depth[sp]
        if d + 1 > tree_depth:
            tree_depth = d + 1

        for a in range(3):
            lo[a] = np.inf
            hi[a] = -np.inf
            clo[a] = np.inf
            chi[a] = -np.inf
        for i in range(start, end):
            p = order[i]
            for a in range(3):
                if pb[p, a] < lo[a]:
                    lo[a] = pb[p, a]
                if pb[p, a + 3] > hi[a]:
                    hi[a] = pb[p, a + 3]
                c = cen[p, a]
                if c < clo[a]:
                    clo[a] = c
                if c > chi[a]:
                    chi[a] = c
        for a in range(3):
            bounds[node, a] = lo[a]
            bounds[node, a + 3] = hi[a]

        cnt = end - start
        if cnt == 1:
            child[node] = start
            count[node] = 1
            continue

        node_area = _area(lo[0], lo[1], lo[2], hi[0], hi[1], hi[2])
        if not node_area > 0.0:
            node_area = 1.0

        best_cost = np.inf
        best_axis = -1
        best_split = -1
        any_extent = False
        for a in range(3):
            ext = chi[a] - clo[a]
            if not ext > 0.0:
                continue
            any_extent = True
            k = n_bins / ext
            for b in range(n_bins):
                bin_cnt[b] = 0
                for j in range(3):
                    bin_b[b, j] = np.inf
                    bin_b[b, j + 3] = -np.inf
            for i in range(start, end):
                p = order[i]
                bi = int((cen[p, a] - clo[a]) * k)
                if bi >= n_bins:
                    bi = n_bins - 1
                bin_cnt[bi] += 1
                for j in range(3):
                    if pb[p, j] < bin_b[bi, j]:
                        bin_b[bi, j] = pb[p, j]
                    if pb[p, j + 3] > bin_b[bi, j + 3]:
                        bin_b[bi, j + 3] = pb[p, j + 3]
            # prefix sweep
            l0 = np.inf
            l1 = np.inf
            l2 = np.inf
            l3 = -np.inf
            l4 = -np.inf
            l5 = -np.inf
            lc = 0
            for b in range(n_bins - 1):
                lc += bin_cnt[b]
                if bin_cnt[b] > 0:
                    l0 = min(l0, bin_b[b, 0])
                    l1 = min(l1, bin_b[b, 1])
                    l2 = min(l2, bin_b[b, 2])
                    l3 = max(l3, bin_b[b, 3])
                    l4 = max(l4, bin_b[b, 4])
                    l5 = max(l5, bin_b[b, 5])
                left_cnt[b] = lc
                left_area[b] = _area(l0, l1, l2, l3, l4, l5) if lc > 0 else 0.0
            r0 = np.inf
            r1 = np.inf
            r2 = np.inf
            r3 = -np.inf
            r4 = -np.inf
            r5 = -np.inf
            rc = 0
            for b in range(n_bins - 1, 0, -1):
                rc += bin_cnt[b]
                if bin_cnt[b] > 0:
                    r0 = min(r0, bin_b[b, 0])
                    r1 = min(r1, bin_b[b, 1])
                    r2 = min(r2, bin_b[b, 2])
                    r3 = max(r3, bin_b[b, 3])
                    r4 = max(r4, bin_b[b, 4])
                    r5 = max(r5, bin_b[b, 5])
                # split between bin b-1 and b
                lcnt = left_cnt[b - 1]
                if lcnt == 0 or rc == 0:
                    continue
                ra = _area(r0, r1, r2, r3, r4, r5)
                cost = c_trav + c_isect * (left_area[b - 1] * lcnt + ra * rc) / node_area
                if cost < best_cost:
                    best_cost = cost
                    best_axis = a
                    best_split = b - 1

        if cnt <= max_leaf and (not any_extent or best_cost >= c_isect * cnt):
            child[node] = start
            count[node] = cnt
            continue

        mid = -1
        force_median = d + 1 + _ceil_log2((cnt + max_leaf - 1) // max_leaf) >= max_depth - 1
        if best_axis >= 0 and not force_median:
            a = best_axis
            k = n_bins / (chi[a] - clo[a])
            i = start
            j = end - 1
            while i <= j:
                p = order[i]
                bi = int((cen[p, a] - clo[a]) * k)
                if bi >= n_bins:
                    bi = n_bins - 1
                if bi <= best_split:
                    i += 1
                else:
                    order[i] = order[j]
                    order[j] = p
                    j -= 1
            mid = i
        if mid <= start or mid >= end:
            # coincident centroids or depth budget: object median on widest axis
            a = 0
            for j in range(1, 3):
                if chi[j] - clo[j] > chi[a] - clo[a]:
                    a = j
            if chi[a] - clo[a] > 0.0:
                sub = order[start:end].copy()
                keys = np.empty(cnt)
                for i in range(cnt):
                    keys[i] = cen[sub[i], a]
                idx = np.argsort(keys, kind="mergesort")
                for i in range(cnt):
                    order[start + i] = sub[idx[i]]
            mid = start + cnt // 2

        left = n_nodes
        n_nodes += 2
        child[node] = left
        count[node] = 0
        parent[left] = node
        parent[left + 1] = node
        st_node[sp] = left + 1
        st_start[sp] = mid
        st_end[sp] = end
        st_depth[sp] = d + 1
        sp += 1
        st_node[sp] = left
        st_start[sp] = start
        st_end[sp] = mid
        st_depth[sp] = d + 1
        sp += 1

    return bounds[:n_nodes].copy(), child[:n_nodes].copy(), count[:n_nodes].copy(), \
        parent[:n_nodes].copy(), order, tree_depth


@njit(cache=True)
def _refit_kernel(nodes, pb, order, bounds, child, count):
    for k in range(nodes.shape[0]):
        node = nodes[k]
        cnt = count[node]
        if cnt > 0:
            first = child[node]
            for a in range(3):
                bounds[node, a] = np.inf
                bounds[node, a + 3] = -np.inf
            for i in range(first, first + cnt):
                p = order[i]
                for a in range(3):
                    if pb[p, a] < bounds[node, a]:
                        bounds[node, a] = pb[p, a]
                    if pb[p, a + 3] > bounds[node, a + 3]:
                        bounds[node, a + 3] = pb[p, a + 3]
        else:
            l = child[node]
            for a in range(3):
                bounds[node, a] = min(bounds[l, a], bounds[l + 1, a])
                bounds[node, a + 3] = max(bounds[l, a + 3], bounds[l + 1, a + 3])


@njit(cache=True)
def _triangle_bounds_kernel(verts, faces):
    n = faces.shape[0]
    pb = np.empty((n, 6))
    for f in range(n):
        for a in range(3):
            x0 = verts[faces[f, 0], a]
            x1 = verts[faces[f, 1], a]
            x2 = verts[faces[f, 2], a]
            pb[f, a] = min(x0, min(x1, x2))
            pb[f, a + 3] = max(x0, max(x1, x2))
    return pb


def triangle_bounds(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Per-face AABBs as an ``(F, 6)`` array ``[minx, miny, minz, maxx, maxy, maxz]``."""
    return _triangle_bounds_kernel(np.ascontiguousarray(vertices, dtype=np.float64),
                                   np.ascontiguousarray(faces, dtype=np.int32))


@dataclass
class BvhStats:
    nodes_rebuilt: int = 0
    nodes_refit: int = 0
    sah_cost: float = 0.0


BvhNode = namedtuple("BvhNode", "bounds left right first count")


class Bvh:
    """Binary BVH over a fixed set of primitive boxes."""

    def __init__(self, bounds, child, count, parent, prim_order, depth):
        self.bounds = bounds
        self.child = child
        self.count = count
        self.parent = parent
        self.prim_order = prim_order
        self.depth = int(depth)
        self.stats = BvhStats(nodes_rebuilt=len(bounds), sah_cost=self._sah_cost())
        self.generation = 0
        self._leaf_of_prim = None

    @classmethod
    def build(cls, prim_bounds) -> Bvh:
        pb = np.ascontiguousarray(prim_bounds, dtype=np.float64).reshape(-1, 6)
        if len(pb) == 0:
            raise EmptyInput("cannot build a BVH over zero primitives")
        out = _build_kernel(pb, MAX_LEAF_SIZE, N_BINS, TRAVERSAL_COST, INTERSECTION_COST, MAX_DEPTH)
        return cls(*out)

    @property
    def n_nodes(self) -> int:
        return len(self.bounds)

    @property
    def n_prims(self) -> int:
        return len(self.prim_order)

    def is_leaf(self, i: int) -> bool:
        return bool(self.count[i] > 0)

    def node(self, i: int) -> BvhNode:
        b = Aabb(self.bounds[i, :3], self.bounds[i, 3:])
        if self.count[i] > 0:
            return BvhNode(b, -1, -1, int(self.child[i]), int(self.count[i]))
        return BvhNode(b, int(self.child[i]), int(self.child[i]) + 1, -1, 0)

    def root_bounds(self) -> Aabb:
        return Aabb(self.bounds[0, :3], self.bounds[0, 3:])

    def _sah_cost(self) -> float:
        ext = self.bounds[:, 3:] - self.bounds[:, :3]
        area = 2.0 * (ext[:, 0] * ext[:, 1] + ext[:, 1] * ext[:, 2] + ext[:, 2] * ext[:, 0])
        root = area[0] if area[0] > 0 else 1.0
        leaf = self.count > 0
        return float((TRAVERSAL_COST * area[~leaf].sum()
                      + INTERSECTION_COST * (area[leaf] * self.count[leaf]).sum()) / root)

    def leaf_of_prim(self) -> np.ndarray:
        if self._leaf_of_prim is None:
            leaves = np.flatnonzero(self.count > 0)
            leaves = leaves[np.argsort(self.child[leaves], kind="stable")]
            per_pos = np.repeat(leaves, self.count[leaves])
            lop = np.empty(self.n_prims, np.int64)
            lop[self.prim_order] = per_pos
            self._leaf_of_prim = lop
        return self._leaf_of_prim

    def refit(self, prim_bounds, changed_prims=None) -> int:
        """Recompute node bounds bottom-up, keeping the topology.

        With ``changed_prims`` only the leaves holding those primitives and
        their ancestors are touched. Returns the number of nodes updated.
        """
        pb = np.ascontiguousarray(prim_bounds, dtype=np.float64).reshape(-1, 6)
        if len(pb) != self.n_prims:
            raise CountMismatch(f"BVH has {self.n_prims} primitives, got {len(pb)} boxes")
        if changed_prims is None:
            nodes = np.arange(self.n_nodes - 1, -1, -1, dtype=np.int64)
        else:
            changed = np.asarray(changed_prims, dtype=np.int64)
            marks = np.zeros(self.n_nodes, bool)
            frontier = np.unique(self.leaf_of_prim()[changed])
            while frontier.size:
                marks[frontier] = True
                frontier = self.parent[frontier]
                frontier = np.unique(frontier[frontier >= 0])
                frontier = frontier[~marks[frontier]]
            nodes = np.flatnonzero(marks)[::-1].astype(np.int64)
        _refit_kernel(nodes, pb, self.prim_order, self.bounds, self.child, self.count)
        self.stats.nodes_refit += len(nodes)
        self.stats.sah_cost = self._sah_cost()
        self.generation += 1
        return len(nodes)

    def audit(self) -> None:
        """Raise ``AssertionError`` if any structural invariant is broken."""
        n = self.n_nodes
        seen_prims = np.zeros(self.n_prims, np.int64)
        visited = np.zeros(n, bool)
        stack = [(0, 1)]
        while stack:
            i, depth = stack.pop()
            assert not visited[i], f"node {i} reached twice"
            assert depth <= MAX_DEPTH, "depth limit exceeded"
            visited[i] = True
            if self.count[i] > 0:
                assert 1 <= self.count[i] <= MAX_LEAF_SIZE
                s = self.child[i]
                seen_prims[self.prim_order[s:s + self.count[i]]] += 1
            else:
                for c in (self.child[i], self.child[i] + 1):
                    assert c > i and self.parent[c] == i
                    assert np.all(self.bounds[i, :3] <= self.bounds[c, :3])
                    assert np.all(self.bounds[c, 3:] <= self.bounds[i, 3:])
                    stack.append((c, depth + 1))
        assert visited.all(), "unreachable nodes"
        assert np.all(seen_prims == 1), "primitive not in exactly one leaf"


def bvh_build(prim_bounds) -> Bvh:
    return Bvh.build(prim_bounds)


def bvh_refit(b: Bvh, prim_bounds) -> None:
    b.refit(prim_bounds)


# --------------------------------------------------------------------------
# intersection


@njit(cache=True, inline="always", error_model="numpy")
def _tri_intersect(ox, oy, oz, dx, dy, dz, ax, ay, az, bx, by, bz, cx, cy, cz, tmin, tmax):
    e1x = bx - ax
    e1y = by - ay
    e1z = bz - az
    e2x = cx - ax
    e2y = cy - ay
    e2z = cz - az
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if det == 0.0:
        return False, 0.0, 0.0, 0.0
    inv = 1.0 / det
    sx = ox - ax
    sy = oy - ay
    sz = oz - az
    u = (sx * px + sy * py + sz * pz) * inv
    if not (u >= -BARY_EPS and u <= 1.0 + BARY_EPS):
        return False, 0.0, 0.0, 0.0
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if not (v >= -BARY_EPS and u + v <= 1.0 + BARY_EPS):
        return False, 0.0, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if not (t >= tmin and t <= tmax):
        return False, 0.0, 0.0, 0.0
    return True, t, u, v


@njit(cache=True)
def _tri_intersect_arrays(o, d, v0, v1, v2, tmin, tmax):
    return _tri_intersect(o[0], o[1], o[2], d[0], d[1], d[2],
                          v0[0], v0[1], v0[2], v1[0], v1[1], v1[2], v2[0], v2[1], v2[2], tmin, tmax)


def _clamp_bary(u, v):
    u = max(u, 0.0)
    v = max(v, 0.0)
    s = u + v
    if s > 1.0:
        u, v = u / s, v / s
    return u, v


def triangle_intersect(ray: Ray, v0, v1, v2):
    """Ray/triangle test without backface culling.

    Returns ``(t, u, v)`` with the hit point ``v0 + u (v1 - v0) + v (v2 - v0)``,
    or ``None``. Edges and vertices count as inside.
    """
    ok, t, u, v = _tri_intersect_arrays(ray.origin, ray.dir, np.asarray(v0, float), np.asarray(v1, float),
                                        np.asarray(v2, float), float(ray.t_min), float(ray.t_max))
    if not ok:
        return None
    u, v = _clamp_bary(u, v)
    return t, u, v


_JIT = dict(cache=True, error_model="numpy")


@njit(inline="always", **_JIT)
def _safe_inv(d):
    # 0 * 1e300 stays 0, so an origin on a slab plane never produces NaN
    if d == 0.0:
        return 1e300
    return 1.0 / d


@njit(inline="always", **_JIT)
def _slab(nb, i, oix, oiy, oiz, ix, iy, iz, tmin, tmax):
    t0 = nb[i, 0] * ix - oix
    t1 = nb[i, 3] * ix - oix
    tn = min(t0, t1)
    tf = max(t0, t1)
    t0 = nb[i, 1] * iy - oiy
    t1 = nb[i, 4] * iy - oiy
    tn = max(tn, min(t0, t1))
    tf = min(tf, max(t0, t1))
    t0 = nb[i, 2] * iz - oiz
    t1 = nb[i, 5] * iz - oiz
    tn = max(tn, min(t0, t1))
    tf = min(tf, max(t0, t1))
    # widen; a negative tn only ever gets replaced by tmin
    tn = max(tn * (1.0 - _SLAB_PAD), tmin)
    tf = min(tf * (1.0 + _SLAB_PAD), tmax)
    return tn <= tf, tn


def gather_triangles(vertices, faces, prim_order) -> np.ndarray:
    """Triangle corners in BVH leaf order, ``(F, 9)``: the traversal's only mesh view."""
    return np.ascontiguousarray(vertices[faces[prim_order]].reshape(-1, 9))


PackedScene = namedtuple(
    "PackedScene",
    [
        "tris",  # (F, 9) f8, corners of all geometries in leaf order
        "prim_order",  # (F,) i4, global face index of each tris row
        "node_bounds",  # (N, 6) f8
        "node_child",  # (N,) i4, global left child, or first tris row for leaves
        "node_count",  # (N,) i4
        "geom_root",  # (G,) i4
        "geom_face_offset",  # (G,) i8
        "ent_geom",  # (E,) i4, packed geometry index
        "ent_inst",  # (E,) i8, NO_ID for direct geometry
        "ent_gid",  # (E,) i8
        "ent_has_xf",  # (E,) bool
        "ent_w2l",  # (E, 3, 4) f8, world -> local affine
        "tlas_bounds",
        "tlas_child",
        "tlas_count",
        "tlas_order",
    ],
)


@njit(**_JIT)
def _blas_closest(nb, nchild, ncount, T, porder, root, tag, ox, oy, oz, dx, dy, dz, tmin, best_t, best_prim, rel,
                  stack, stack_t, trace, trace_n):
    """Closest hit inside one geometry. ``rel`` orders this entry's id key
    against the current best hit: -1 less, 0 same entry, +1 greater."""
    ix = _safe_inv(dx)
    iy = _safe_inv(dy)
    iz = _safe_inv(dz)
    oix = ox * ix
    oiy = oy * iy
    oiz = oz * iz
    best_row = -1
    best_u = 0.0
    best_v = 0.0
    found = False
    ok, tn = _slab(nb, root, oix, oiy, oiz, ix, iy, iz, tmin, best_t)
    if not ok:
        return found, best_t, best_prim, best_row, best_u, best_v
    stack[0] = root
    stack_t[0] = tn
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if stack_t[sp] > best_t:
            continue
        if trace is not None:
            k = trace_n[0]
            if k < trace.shape[0]:
                trace[k, 0] = tag
                trace[k, 1] = node
            trace_n[0] = k + 1
        cnt = ncount[node]
        if cnt > 0:
            first = nchild[node]
            for i in range(first, first + cnt):
                hit, t, u, v = _tri_intersect(ox, oy, oz, dx, dy, dz, T[i, 0], T[i, 1], T[i, 2],
                                              T[i, 3], T[i, 4], T[i, 5], T[i, 6], T[i, 7], T[i, 8],
                                              tmin, best_t)
                if hit:
                    f = porder[i]
                    if t < best_t or rel < 0 or (rel == 0 and f < best_prim):
                        best_t = t
                        best_prim = f
                        best_row = i
                        best_u = u
                        best_v = v
                        rel = 0
                        found = True
        else:
            l = nchild[node]
            hl, tl = _slab(nb, l, oix, oiy, oiz, ix, iy, iz, tmin, best_t)
            hr, tr = _slab(nb, l + 1, oix, oiy, oiz, ix, iy, iz, tmin, best_t)
            if hl and hr:
                if tl <= tr:
                    stack[sp] = l + 1
                    stack_t[sp] = tr
                    stack[sp + 1] = l
                    stack_t[sp + 1] = tl
                else:
                    stack[sp] = l
                    stack_t[sp] = tl
                    stack[sp + 1] = l + 1
                    stack_t[sp + 1] = tr
                sp += 2
            elif hl:
                stack[sp] = l
                stack_t[sp] = tl
                sp += 1
            elif hr:
                stack[sp] = l + 1
                stack_t[sp] = tr
                sp += 1
    return found, best_t, best_prim, best_row, best_u, best_v


@njit(inline="always", **_JIT)
def _key_rel(inst, gid, b_inst, b_gid, found):
    if not found:
        return -1
    if inst < b_inst or (inst == b_inst and gid < b_gid):
        return -1
    if inst == b_inst and gid == b_gid:
        return 0
    return 1


@njit(**_JIT)
def _trace(S, ox, oy, oz, dx, dy, dz, tmin, tmax, stack, stack_t, tstack, tstack_t, trace, trace_n):
    """Closest hit over the two-level structure.

    Returns ``(found, t, entry, global_face, u, v, nx, ny, nz)`` with the
    world-frame geometric normal facing against the ray direction.
    """
    if tmin <= 0.0:
        tmin = RAY_EPSILON
    best_t = tmax
    best_e = -1
    best_f = -1
    best_row = -1
    best_u = 0.0
    best_v = 0.0
    found = False
    b_inst = 0
    b_gid = 0
    tb = S.tlas_bounds
    tchild = S.tlas_child
    tcount = S.tlas_count
    torder = S.tlas_order
    nb = S.node_bounds
    nchild = S.node_child
    ncount = S.node_count
    T = S.tris
    porder = S.prim_order
    if tb.shape[0] == 0:
        return False, np.inf, -1, -1, 0.0, 0.0, np.nan, np.nan, np.nan
    ix = _safe_inv(dx)
    iy = _safe_inv(dy)
    iz = _safe_inv(dz)
    oix = ox * ix
    oiy = oy * iy
    oiz = oz * iz
    ok, tn = _slab(tb, 0, oix, oiy, oiz, ix, iy, iz, tmin, best_t)
    sp = 0
    if ok:
        tstack[0] = 0
        tstack_t[0] = tn
        sp = 1
    while sp > 0:
        sp -= 1
        node = tstack[sp]
        if tstack_t[sp] > best_t:
            continue
        if trace is not None:
            k = trace_n[0]
            if k < trace.shape[0]:
                trace[k, 0] = -1
                trace[k, 1] = node
            trace_n[0] = k + 1
        cnt = tcount[node]
        if cnt > 0:
            first = tchild[node]
            for i in range(first, first + cnt):
                e = torder[i]
                if S.ent_has_xf[e]:
                    M = S.ent_w2l[e]
                    lox = M[0, 0] * ox + M[0, 1] * oy + M[0, 2] * oz + M[0, 3]
                    loy = M[1, 0] * ox + M[1, 1] * oy + M[1, 2] * oz + M[1, 3]
                    loz = M[2, 0] * ox + M[2, 1] * oy + M[2, 2] * oz + M[2, 3]
                    ldx = M[0, 0] * dx + M[0, 1] * dy + M[0, 2] * dz
                    ldy = M[1, 0] * dx + M[1, 1] * dy + M[1, 2] * dz
                    ldz = M[2, 0] * dx + M[2, 1] * dy + M[2, 2] * dz
                else:
                    lox = ox
                    loy = oy
                    loz = oz
                    ldx = dx
                    ldy = dy
                    ldz = dz
                rel = _key_rel(S.ent_inst[e], S.ent_gid[e], b_inst, b_gid, found)
                h, t, f, row, u, v = _blas_closest(
                    nb, nchild, ncount, T, porder, S.geom_root[S.ent_geom[e]], e, lox, loy, loz, ldx, ldy, ldz, tmin, best_t,
                    best_f if rel == 0 else -1, rel, stack, stack_t, trace, trace_n)
                if h:
                    found = True
                    best_t = t
                    best_e = e
                    best_f = f
                    best_row = row
                    best_u = u
                    best_v = v
                    b_inst = S.ent_inst[e]
                    b_gid = S.ent_gid[e]
        else:
            l = tchild[node]
            hl, tl = _slab(tb, l, oix, oiy, oiz, ix, iy, iz, tmin, best_t)
            hr, tr = _slab(tb, l + 1, oix, oiy, oiz, ix, iy, iz, tmin, best_t)
            if hl and hr:
                if tl <= tr:
                    tstack[sp] = l + 1
                    tstack_t[sp] = tr
                    tstack[sp + 1] = l
                    tstack_t[sp + 1] = tl
                else:
                    tstack[sp] = l
                    tstack_t[sp] = tl
                    tstack[sp + 1] = l + 1
                    tstack_t[sp + 1] = tr
                sp += 2
            elif hl:
                tstack[sp] = l
                tstack_t[sp] = tl
                sp += 1
            elif hr:
                tstack[sp] = l + 1
                tstack_t[sp] = tr
                sp += 1

    if not found:
        return False, np.inf, -1, -1, 0.0, 0.0, np.nan, np.nan, np.nan

    r = best_row
    e1x = T[r, 3] - T[r, 0]
    e1y = T[r, 4] - T[r, 1]
    e1z = T[r, 5] - T[r, 2]
    e2x = T[r, 6] - T[r, 0]
    e2y = T[r, 7] - T[r, 1]
    e2z = T[r, 8] - T[r, 2]
    nx = e1y * e2z - e1z * e2y
    ny = e1z * e2x - e1x * e2z
    nz = e1x * e2y - e1y * e2x
    if S.ent_has_xf[best_e]:
        # inverse-transpose of the local->world linear part is W2L^T
        M = S.ent_w2l[best_e]
        wx = M[0, 0] * nx + M[1, 0] * ny + M[2, 0] * nz
        wy = M[0, 1] * nx + M[1, 1] * ny + M[2, 1] * nz
        wz = M[0, 2] * nx + M[1, 2] * ny + M[2, 2] * nz
        nx = wx
        ny = wy
        nz = wz
    nn = math.sqrt(nx * nx + ny * ny + nz * nz)
    nx /= nn
    ny /= nn
    nz /= nn
    if nx * dx + ny * dy + nz * dz > 0.0:
        nx = -nx
        ny = -ny
        nz = -nz
    if best_u < 0.0:
        best_u = 0.0
    if best_v < 0.0:
        best_v = 0.0
    s = best_u + best_v
    if s > 1.0:
        best_u /= s
        best_v /= s
    return True, best_t, best_e, best_f, best_u, best_v, nx, ny, nz


_CAST_BLOCK = 256


@njit(parallel=True, **_JIT)
def _cast_kernel(S, orig, dirs, tmin, tmax, out_t, out_ids, out_uv, out_n):
    n = orig.shape[0]
    n_blocks = (n + _CAST_BLOCK - 1) // _CAST_BLOCK
    for blk in prange(n_blocks):
        stack = np.empty(STACK_SIZE, np.int32)
        stack_t = np.empty(STACK_SIZE)
        tstack = np.empty(STACK_SIZE, np.int32)
        tstack_t = np.empty(STACK_SIZE)
        for r in range(blk * _CAST_BLOCK, min(n, (blk + 1) * _CAST_BLOCK)):
            found, t, e, f, u, v, nx, ny, nz = _trace(
                S, orig[r, 0], orig[r, 1], orig[r, 2], dirs[r, 0], dirs[r, 1], dirs[r, 2],
                tmin[r], tmax[r], stack, stack_t, tstack, tstack_t, None, None)
            if found:
                out_t[r] = t
                out_ids[r, 0] = S.ent_inst[e]
                out_ids[r, 1] = S.ent_gid[e]
                out_ids[r, 2] = f - S.geom_face_offset[S.ent_geom[e]]
                out_uv[r, 0] = u
                out_uv[r, 1] = v
                out_n[r, 0] = nx
                out_n[r, 1] = ny
                out_n[r, 2] = nz
            else:
                out_t[r] = np.inf
                out_ids[r, 0] = NO_ID
                out_ids[r, 1] = NO_ID
                out_ids[r, 2] = NO_ID
                out_uv[r, 0] = np.nan
                out_uv[r, 1] = np.nan
                out_n[r, 0] = np.nan
                out_n[r, 1] = np.nan
                out_n[r, 2] = np.nan


@njit(**_JIT)
def _cast_traced_kernel(S, orig, dirs, tmin, tmax, trace, trace_n, out_t):
    stack = np.empty(STACK_SIZE, np.int32)
    stack_t = np.empty(STACK_SIZE)
    tstack = np.empty(STACK_SIZE, np.int32)
    tstack_t = np.empty(STACK_SIZE)
    for r in range(orig.shape[0]):
        found, t, e, f, u, v, nx, ny, nz = _trace(
            S, orig[r, 0], orig[r, 1], orig[r, 2], dirs[r, 0], dirs[r, 1], dirs[r, 2],
            tmin[r], tmax[r], stack, stack_t, tstack, tstack_t, trace, trace_n)
        out_t[r] = t if found else np.inf


@dataclass
class HitBatch:
    """Closest hits for a batch of rays; misses carry ``t = inf`` and ``NO_ID``."""

    t: np.ndarray
    inst_id: np.ndarray
    geom_id: np.ndarray
    prim_id: np.ndarray
    uv: np.ndarray
    normal: np.ndarray

    @property
    def hit(self) -> np.ndarray:
        return np.isfinite(self.t)


def _ray_arrays(origins, dirs, t_min, t_max):
    orig = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(orig)
    tmin = np.broadcast_to(np.asarray(t_min, np.float64), (n,)).copy()
    tmax = np.broadcast_to(np.asarray(t_max, np.float64), (n,)).copy()
    return orig, dirs, tmin, tmax


def cast_packed(S: PackedScene, origins, dirs, t_min=0.0, t_max=np.inf) -> HitBatch:
    orig, dirs, tmin, tmax = _ray_arrays(origins, dirs, t_min, t_max)
    n = len(orig)
    out_t = np.empty(n)
    out_ids = np.empty((n, 3), np.int64)
    out_uv = np.empty((n, 2))
    out_n = np.empty((n, 3))
    _cast_kernel(S, orig, dirs, tmin, tmax, out_t, out_ids, out_uv, out_n)
    ids = out_ids.astype(np.uint32)
    return HitBatch(out_t, ids[:, 0], ids[:, 1], ids[:, 2], out_uv, out_n)


def trace_packed(S: PackedScene, origins, dirs, t_min=0.0, t_max=np.inf, max_records=1_000_000):
    """Instrumented single-threaded cast. Returns ``(t, visits)`` where each
    visit row is ``(entry, node)``; entry ``-1`` marks top-level nodes."""
    orig, dirs, tmin, tmax = _ray_arrays(origins, dirs, t_min, t_max)
    trace = np.empty((max_records, 2), np.int64)
    trace_n = np.zeros(1, np.int64)
    out_t = np.empty(len(orig))
    _cast_traced_kernel(S, orig, dirs, tmin, tmax, trace, trace_n, out_t)
    if trace_n[0] > max_records:
        raise OverflowError(f"trace needs {trace_n[0]} records, buffer holds {max_records}")
    return out_t, trace[: trace_n[0]].copy()


def set_num_threads(n: int | None) -> int:
    """Cap worker threads for the parallel kernels; returns the effective count."""
    limit = numba.config.NUMBA_NUM_THREADS
    if n is None or n <= 0:
        n = limit
    n = min(int(n), limit)
    numba.set_num_threads(n)
    return n
