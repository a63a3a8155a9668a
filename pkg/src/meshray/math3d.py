"""Value types for 3D geometry: rotations, transforms, rays and boxes.

Frames are right-handed with x forward, y left and z up. Vectors are plain
``numpy`` arrays of shape ``(3,)`` (or ``(N, 3)`` where a function says so).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidModel, NonComposableScale

#: Default near clip for rays whose caller asks for ``t_min == 0``.
RAY_EPSILON = 1e-4

_QUAT_TOL = 1e-6


def vec3(x, y=None, z=None) -> np.ndarray:
    """Build a float64 3-vector from three scalars or one sequence."""
    if y is None and z is None:
        v = np.asarray(x, dtype=np.float64).reshape(3)
    else:
        v = np.array([x, y, z], dtype=np.float64)
    return v


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Rotation:
    """Unit quaternion ``(w, x, y, z)``; ``q`` and ``-q`` are the same rotation."""

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        n = math.sqrt(self.w ** 2 + self.x ** 2 + self.y ** 2 + self.z ** 2)
        if not abs(n - 1.0) <= _QUAT_TOL:
            raise InvalidModel(f"quaternion norm {n} is not 1")

    @classmethod
    def identity(cls) -> Rotation:
        return cls()

    @classmethod
    def from_quaternion(cls, w, x, y, z, normalize=True) -> Rotation:
        q = np.array([w, x, y, z], dtype=np.float64)
        if normalize:
            n = np.linalg.norm(q)
            if n == 0.0:
                raise InvalidModel("zero quaternion")
            q = q / n
        return cls(*map(float, q))

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> Rotation:
        a = vec3(axis)
        n = np.linalg.norm(a)
        if n == 0.0:
            raise InvalidModel("zero rotation axis")
        a = a / n
        s = math.sin(angle / 2.0)
        return cls.from_quaternion(math.cos(angle / 2.0), a[0] * s, a[1] * s, a[2] * s)

    @classmethod
    def from_rpy(cls, roll: float, pitch: float, yaw: float) -> Rotation:
        """Fixed-axis roll (x), pitch (y), yaw (z) in radians: ``R = Rz @ Ry @ Rx``."""
        cr, sr = math.cos(roll / 2), math.sin(roll / 2)
        cp, sp = math.cos(pitch / 2), math.sin(pitch / 2)
        cy, sy = math.cos(yaw / 2), math.sin(yaw / 2)
        return cls.from_quaternion(
            cr * cp * cy + sr * sp * sy,
            sr * cp * cy - cr * sp * sy,
            cr * sp * cy + sr * cp * sy,
            cr * cp * sy - sr * sp * cy,
        )

    @classmethod
    def from_matrix(cls, m) -> Rotation:
        m = np.asarray(m, dtype=np.float64)
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = math.sqrt(tr + 1.0) * 2
            q = ((0.25 * s), (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q = ((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
        elif m[1, 1] > m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s)
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s)
        return cls.from_quaternion(*q)

    @property
    def quaternion(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def apply(self, v) -> np.ndarray:
        """Rotate a vector ``(3,)`` or a stack of vectors ``(N, 3)``."""
        return np.asarray(v, dtype=np.float64) @ self.matrix().T

    def inverse(self) -> Rotation:
        return Rotation(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: Rotation) -> Rotation:
        a, b = self, other
        return Rotation.from_quaternion(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )

    def is_identity(self, tol=1e-12) -> bool:
        return abs(abs(self.w) - 1.0) <= tol

    def angle_to(self, other: Rotation) -> float:
        d = abs(float(np.dot(self.quaternion, other.quaternion)))
        return 2.0 * math.acos(min(1.0, d))


def _signed_permutation(m: np.ndarray, tol=1e-12):
    """Return the axis permutation if ``m`` maps axes onto axes, else ``None``."""
    perm = np.argmax(np.abs(m), axis=1)
    if sorted(perm) != [0, 1, 2]:
        return None
    picked = np.abs(m[np.arange(3), perm])
    if np.any(np.abs(picked - 1.0) > tol):
        return None
    return perm


@dataclass(frozen=True)
class Transform:
    """``p -> R (s * p) + t`` with per-axis scale ``s > 0``."""

    rotation: Rotation = field(default_factory=Rotation)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        object.__setattr__(self, "translation", _frozen(vec3(self.translation)))
        object.__setattr__(self, "scale", _frozen(vec3(self.scale)))
        if not np.all(np.isfinite(self.translation)):
            raise InvalidModel("non-finite translation")
        if not np.all(self.scale > 0.0):
            raise InvalidModel(f"scale must be positive, got {self.scale}")

    @classmethod
    def identity(cls) -> Transform:
        return cls()

    @classmethod
    def from_translation(cls, x, y=None, z=None) -> Transform:
        return cls(translation=vec3(x, y, z))

    @classmethod
    def from_xyz_rpy(cls, x, y, z, roll, pitch, yaw, scale=(1.0, 1.0, 1.0)) -> Transform:
        """Angles in radians."""
        return cls(Rotation.from_rpy(roll, pitch, yaw), vec3(x, y, z), scale)

    @classmethod
    def from_matrix(cls, m) -> Transform:
        """Decompose a 4x4 affine whose linear part is ``R @ diag(s)``."""
        m = np.asarray(m, dtype=np.float64)
        lin = m[:3, :3]
        s = np.linalg.norm(lin, axis=0)
        r = lin / s
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or np.linalg.det(r) < 0:
            raise NonComposableScale("matrix is not rotation times positive diagonal scale")
        return cls(Rotation.from_matrix(r), m[:3, 3], s)

    @property
    def is_rigid(self) -> bool:
        return bool(np.allclose(self.scale, 1.0, rtol=0, atol=1e-12))

    @property
    def has_uniform_scale(self) -> bool:
        return bool(np.ptp(self.scale) <= 1e-12 * np.max(self.scale))

    def linear(self) -> np.ndarray:
        return self.rotation.matrix() * self.scale[None, :]

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.linear()
        m[:3, 3] = self.translation
        return m

    def apply(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return (p * self.scale) @ self.rotation.matrix().T + self.translation

    def apply_vector(self, d) -> np.ndarray:
        """Apply only the linear part (no translation)."""
        d = np.asarray(d, dtype=np.float64)
        return (d * self.scale) @ self.rotation.matrix().T

    def compose(self, other: Transform) -> Transform:
        """``self ∘ other``: apply ``other`` first."""
        ra, sa, ta = self.rotation, self.scale, self.translation
        rb, sb, tb = other.rotation, other.scale, other.translation
        if self.has_uniform_scale:
            scale = sa[0] * sb
        else:
            # s_a * (R_b y) == R_b ((P^T s_a) * y) when R_b only permutes axes
            perm = _signed_permutation(rb.matrix())
            if perm is None:
                raise NonComposableScale(
                    "non-uniform scale on the outer transform requires an axis-aligned inner rotation")
            scale = sa[perm] * sb
        return Transform(ra * rb, ra.apply(sa * tb) + ta, scale)

    def __matmul__(self, other: Transform) -> Transform:
        return self.compose(other)

    def inverse(self) -> Transform:
        """Exact inverse. Non-uniform scale requires an axis-aligned rotation."""
        rinv = self.rotation.inverse()
        if self.has_uniform_scale:
            sinv = 1.0 / self.scale
        else:
            perm = _signed_permutation(self.rotation.matrix())
            if perm is None:
                raise NonComposableScale(
                    "inverse of non-uniform scale under a general rotation is not a Transform")
            # s^-1 * (R^T p) == R^T ((P s^-1) * p)
            sinv = np.empty(3)
            sinv[perm] = 1.0 / self.scale
        inv_no_t = Transform(rinv, np.zeros(3), sinv)
        return Transform(rinv, -inv_no_t.apply(self.translation), sinv)


def transform_apply(t: Transform, p) -> np.ndarray:
    return t.apply(p)


def transform_compose(a: Transform, b: Transform) -> Transform:
    return a.compose(b)


def transform_inverse(t: Transform) -> Transform:
    return t.inverse()


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    dir: np.ndarray
    t_min: float = 0.0
    t_max: float = math.inf

    def __post_init__(self):
        object.__setattr__(self, "origin", _frozen(vec3(self.origin)))
        object.__setattr__(self, "dir", _frozen(vec3(self.dir)))
        n = float(np.linalg.norm(self.dir))
        if abs(n - 1.0) > 1e-6:
            raise InvalidModel(f"ray direction must be unit length, got norm {n}")
        if not (0.0 <= self.t_min < self.t_max):
            raise InvalidModel(f"invalid ray interval [{self.t_min}, {self.t_max}]")

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.dir


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray = field(default_factory=lambda: np.full(3, np.inf))
    max: np.ndarray = field(default_factory=lambda: np.full(3, -np.inf))

    def __post_init__(self):
        lo, hi = vec3(self.min), vec3(self.max)
        if not (np.all(lo <= hi) or (np.all(lo == np.inf) and np.all(hi == -np.inf))):
            raise InvalidModel(f"invalid box {lo} .. {hi}")
        object.__setattr__(self, "min", _frozen(lo))
        object.__setattr__(self, "max", _frozen(hi))

    @classmethod
    def empty(cls) -> Aabb:
        return cls()

    @classmethod
    def from_points(cls, pts) -> Aabb:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            return cls()
        return cls(pts.min(axis=0), pts.max(axis=0))

    @property
    def is_empty(self) -> bool:
        return bool(np.any(self.min > self.max))

    def union(self, other: Aabb) -> Aabb:
        if self.is_empty:
            return other
        if other.is_empty:
            return self
        return Aabb(np.minimum(self.min, other.min), np.maximum(self.max, other.max))

    def contains(self, other: Aabb) -> bool:
        if other.is_empty:
            return True
        return bool(np.all(self.min <= other.min) and np.all(other.max <= self.max))

    def contains_point(self, p) -> bool:
        p = np.asarray(p)
        return bool(np.all(self.min <= p) and np.all(p <= self.max))

    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    def extent(self) -> np.ndarray:
        return self.max - self.min

    def surface_area(self) -> float:
        if self.is_empty:
            return 0.0
        d = self.extent()
        return float(2.0 * (d[0] * d[1] + d[1] * d[2] + d[2] * d[0]))

    def corners(self) -> np.ndarray:
        return np.array([[(self.min, self.max)[i][0], (self.min, self.max)[j][1], (self.min, self.max)[k][2]]
                         for i in (0, 1) for j in (0, 1) for k in (0, 1)])

    def transformed(self, m) -> Aabb:
        """Bounds of this box under a 4x4 affine matrix."""
        if self.is_empty:
            return self
        m = np.asarray(m, dtype=np.float64)
        c = self.corners() @ m[:3, :3].T + m[:3, 3]
        return Aabb(c.min(axis=0), c.max(axis=0))


def aabb_ray_intersect(b: Aabb, r: Ray):
    """Slab test. Returns ``(t_near, t_far)`` clipped to the ray interval, or ``None``.

    Flat boxes (zero extent on an axis) work through the ordinary IEEE
    arithmetic; a ray parallel to a slab is inside it iff its origin is.
    """
    if b.is_empty:
        return None
    t_near, t_far = r.t_min, r.t_max
    for a in range(3):
        d = r.dir[a]
        if d == 0.0:
            if r.origin[a] < b.min[a] or r.origin[a] > b.max[a]:
                return None
            continue
        t0 = (b.min[a] - r.origin[a]) / d
        t1 = (b.max[a] - r.origin[a]) / d
        lo, hi = (t0, t1) if t0 <= t1 else (t1, t0)
        if lo > t_near:
            t_near = lo
        if hi < t_far:
            t_far = hi
    if t_near > t_far:
        return None
    return float(t_near), float(t_far)
