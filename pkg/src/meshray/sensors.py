"""Sensor models and their ray patterns.

Every model produces rays in the sensor frame (x forward, y left, z up).
Measurements are addressed by a scanline-major linear index ``v * W + h``
where ``W`` is the horizontal count (image width for pinhole cameras) and
``v`` the scanline/row. That layout is the buffer contract used by the
simulation module and all writers.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .errors import IndexOutOfRange, InvalidModel, ParseError, ResolutionOutOfRange
from .math3d import RAY_EPSILON, Ray, Transform

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

TWO_PI = 2.0 * math.pi
UNIT_TOL = 1e-6


@dataclass(frozen=True)
class DiscreteInterval:
    min: float
    increment: float
    count: int

    def __post_init__(self):
        if int(self.count) != self.count or self.count < 1:
            raise InvalidModel(f"interval count must be a positive integer, got {self.count}")
        object.__setattr__(self, "count", int(self.count))
        if self.count > 1 and not self.increment > 0:
            raise InvalidModel(f"interval increment must be positive, got {self.increment}")
        if not (math.isfinite(self.min) and math.isfinite(self.increment)):
            raise InvalidModel("interval bounds must be finite")

    def value(self, i: int) -> float:
        return self.min + i * self.increment

    def values(self) -> np.ndarray:
        return self.min + np.arange(self.count) * self.increment

    @property
    def span(self) -> float:
        """Angular coverage: ``count`` cells of width ``increment``."""
        return self.count * self.increment if self.count > 1 else 0.0


def _check_range(range_min, range_max):
    if not (0.0 <= range_min < range_max):
        raise InvalidModel(f"need 0 <= range_min < range_max, got [{range_min}, {range_max}]")


def _check_theta(theta: DiscreteInterval):
    # a full revolution is fine (VLP-16: 900 * 0.4 deg); more would repeat rays
    if theta.span > TWO_PI * (1.0 + 1e-9):
        raise InvalidModel(f"theta spans {math.degrees(theta.span):.6g} deg, more than a full turn")


def _unit_rows(a, what) -> np.ndarray:
    a = np.array(a, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0:
        raise InvalidModel(f"{what} must not be empty")
    n = np.linalg.norm(a, axis=1)
    bad = np.flatnonzero(np.abs(n - 1.0) > UNIT_TOL)
    if len(bad):
        raise InvalidModel(f"{what}[{bad[0]}] is not unit length (norm {n[bad[0]]:.9g})")
    a.setflags(write=False)
    return a


class _Model:
    range_min: float
    range_max: float

    @property
    def width(self) -> int:
        raise NotImplementedError

    @property
    def height(self) -> int:
        raise NotImplementedError

    @property
    def ray_count(self) -> int:
        return self.width * self.height

    @property
    def t_min(self) -> float:
        return max(RAY_EPSILON, self.range_min)

    @property
    def t_max(self) -> float:
        return self.range_max

    def _rays(self, v: np.ndarray, h: np.ndarray):
        raise NotImplementedError

    def rays(self):
        """All rays as ``(origins, dirs)``, each ``(ray_count, 3)``, in buffer order."""
        v, h = np.divmod(np.arange(self.ray_count), self.width)
        return self._rays(v, h)


@dataclass(frozen=True)
class SphericalModel(_Model):
    theta: DiscreteInterval
    phi: DiscreteInterval
    range_min: float = 0.0
    range_max: float = math.inf

    def __post_init__(self):
        _check_theta(self.theta)
        _check_range(self.range_min, self.range_max)

    @property
    def width(self):
        return self.theta.count

    @property
    def height(self):
        return self.phi.count

    def _rays(self, v, h):
        th = self.theta.min + h * self.theta.increment
        ph = self.phi.min + v * self.phi.increment
        cp = np.cos(ph)
        d = np.stack([cp * np.cos(th), cp * np.sin(th), np.sin(ph)], axis=-1)
        return np.zeros_like(d), d


@dataclass(frozen=True)
class PinholeModel(_Model):
    width_px: int
    height_px: int
    fx: float
    fy: float
    cx: float
    cy: float
    range_min: float = 0.0
    range_max: float = math.inf

    def __post_init__(self):
        if self.width_px < 1 or self.height_px < 1:
            raise InvalidModel("image must have at least one pixel")
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidModel("focal lengths must be positive")
        _check_range(self.range_min, self.range_max)

    @property
    def width(self):
        return int(self.width_px)

    @property
    def height(self):
        return int(self.height_px)

    def _rays(self, v, h):
        # optical axis -> +x, columns to the right -> -y, rows downward -> -z
        d = np.stack([np.ones(len(h)), -(h - self.cx) / self.fx, -(v - self.cy) / self.fy], axis=-1)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.zeros_like(d), d


@dataclass(frozen=True)
class CylindricalModel(_Model):
    theta: DiscreteInterval
    z: DiscreteInterval
    range_min: float = 0.0
    range_max: float = math.inf

    def __post_init__(self):
        _check_theta(self.theta)
        _check_range(self.range_min, self.range_max)

    @property
    def width(self):
        return self.theta.count

    @property
    def height(self):
        return self.z.count

    def _rays(self, v, h):
        th = self.theta.min + h * self.theta.increment
        d = np.stack([np.cos(th), np.sin(th), np.zeros(len(th))], axis=-1)
        o = np.zeros_like(d)
        o[:, 2] = self.z.min + v * self.z.increment
        return o, d


def _declared_width(width, n):
    w = n if width is None else int(width)
    if w < 1 or n % w:
        raise InvalidModel(f"width {width} does not divide the ray count {n}")
    return w


@dataclass(frozen=True)
class O1DnModel(_Model):
    origin: np.ndarray
    dirs: np.ndarray
    range_min: float = 0.0
    range_max: float = math.inf
    declared_width: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "origin", np.array(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "dirs", _unit_rows(self.dirs, "dirs"))
        _declared_width(self.declared_width, len(self.dirs))
        _check_range(self.range_min, self.range_max)

    @property
    def width(self):
        return _declared_width(self.declared_width, len(self.dirs))

    @property
    def height(self):
        return len(self.dirs) // self.width

    def _rays(self, v, h):
        d = self.dirs[v * self.width + h]
        return np.broadcast_to(self.origin, d.shape).copy(), d.copy()


@dataclass(frozen=True)
class OnDnModel(_Model):
    origins: np.ndarray
    dirs: np.ndarray
    range_min: float = 0.0
    range_max: float = math.inf
    declared_width: int | None = None

    def __post_init__(self):
        o = np.array(self.origins, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "dirs", _unit_rows(self.dirs, "dirs"))
        if len(o) != len(self.dirs):
            raise InvalidModel(f"{len(o)} origins but {len(self.dirs)} directions")
        o.setflags(write=False)
        object.__setattr__(self, "origins", o)
        _declared_width(self.declared_width, len(self.dirs))
        _check_range(self.range_min, self.range_max)

    @property
    def width(self):
        return _declared_width(self.declared_width, len(self.dirs))

    @property
    def height(self):
        return len(self.dirs) // self.width

    def _rays(self, v, h):
        i = v * self.width + h
        return self.origins[i].copy(), self.dirs[i].copy()


SensorModel = Union[SphericalModel, PinholeModel, CylindricalModel, O1DnModel, OnDnModel]


def model_ray_count(m: SensorModel) -> int:
    return m.ray_count


def generate_ray(m: SensorModel, v: int, h: int) -> Ray:
    """Sensor-frame ray of measurement ``v * W + h``."""
    if not (0 <= v < m.height and 0 <= h < m.width):
        raise IndexOutOfRange(f"(v={v}, h={h}) outside {m.height}x{m.width} pattern")
    # same vectorized path as the batch generator, so both agree bitwise
    o, d = m._rays(np.array([v]), np.array([h]))
    return Ray(o[0], d[0], m.t_min, m.t_max)


def vlp16_preset(horizontal_resolution: float = math.radians(0.4)) -> SphericalModel:
    """Velodyne VLP-16: 16 scanlines 2 deg apart, 360 deg sweep, 0..100 m."""
    res_deg = math.degrees(horizontal_resolution)
    if not (0.1 - 1e-9 <= res_deg <= 0.4 + 1e-9):
        raise ResolutionOutOfRange(f"horizontal resolution {res_deg:g} deg outside [0.1, 0.4] deg")
    count = int(round(360.0 / res_deg))
    return SphericalModel(
        theta=DiscreteInterval(math.radians(-180.0), horizontal_resolution, count),
        phi=DiscreteInterval(math.radians(-15.0), math.radians(2.0), 16),
        range_min=0.0,
        range_max=100.0,
    )


@dataclass(frozen=True)
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    t_min: float
    t_max: float

    def __len__(self):
        return len(self.dirs)

    def ray(self, i: int) -> Ray:
        return Ray(self.origins[i], self.dirs[i], self.t_min, self.t_max)


@dataclass(frozen=True)
class SensorRig:
    model: SensorModel
    t_sb: Transform = field(default_factory=Transform.identity)

    def __post_init__(self):
        if not self.t_sb.is_rigid:
            raise InvalidModel(f"sensor mounting must be rigid, got scale {self.t_sb.scale}")

    @property
    def n_rays(self) -> int:
        return self.model.ray_count

    def rays_in_sensor(self) -> RayBatch:
        o, d = self.model.rays()
        return RayBatch(o, d, self.model.t_min, self.model.t_max)

    def rays_in_base(self) -> RayBatch:
        o, d = self.model.rays()
        R = self.t_sb.rotation.matrix()
        return RayBatch(o @ R.T + self.t_sb.translation, d @ R.T, self.model.t_min, self.model.t_max)


def rig_rays_in_base(rig: SensorRig) -> RayBatch:
    return rig.rays_in_base()


# -- config files -------------------------------------------------------------

KINDS = ("spherical", "pinhole", "cylindrical", "o1dn", "ondn")


def _interval(tab, key, path, angle=True) -> DiscreteInterval:
    if key not in tab:
        raise ParseError(f"missing [{key}] interval", path)
    t = tab[key]
    try:
        lo, inc, n = float(t["min"]), float(t.get("increment", 0.0)), t["count"]
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"interval '{key}' needs min, increment, count ({e})", path) from None
    if angle:
        lo, inc = math.radians(lo), math.radians(inc)
    return DiscreteInterval(lo, inc, n)


def _read_vec_csv(path: Path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            try:
                rows.append([float(x) for x in row[:3]])
            except ValueError:
                if not rows and lineno == 1:
                    continue  # header
                raise ParseError(f"expected three numbers, got {row}", path, lineno) from None
            if len(rows[-1]) != 3:
                raise ParseError(f"expected three numbers, got {row}", path, lineno)
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def _vectors(tab, key, base: Path, path, normalize=False) -> np.ndarray:
    if key in tab:
        a = np.asarray(tab[key], dtype=np.float64).reshape(-1, 3)
    elif key + "_csv" in tab:
        a = _read_vec_csv(base / tab[key + "_csv"])
        if normalize:
            # CSV files carry rounded decimals; renormalize rather than reject
            a = a / np.linalg.norm(a, axis=1, keepdims=True)
    else:
        raise ParseError(f"missing '{key}' (inline array or '{key}_csv' file)", path)
    return a


def model_from_table(kind: str, tab: dict, base: Path = Path("."), path=None) -> SensorModel:
    kind = kind.lower()
    if "range" in tab:
        rmin, rmax = (float(x) for x in tab["range"])
    else:
        rmin, rmax = float(tab.get("range_min", 0.0)), float(tab.get("range_max", math.inf))
    try:
        if kind == "spherical":
            return SphericalModel(_interval(tab, "theta", path), _interval(tab, "phi", path), rmin, rmax)
        if kind == "cylindrical":
            return CylindricalModel(_interval(tab, "theta", path), _interval(tab, "z", path, angle=False),
                                    rmin, rmax)
        if kind == "pinhole":
            return PinholeModel(int(tab["width"]), int(tab["height"]), float(tab["fx"]), float(tab["fy"]),
                                float(tab["cx"]), float(tab["cy"]), rmin, rmax)
        if kind == "o1dn":
            return O1DnModel(tab.get("origin", [0.0, 0.0, 0.0]), _vectors(tab, "dirs", base, path, True),
                             rmin, rmax, tab.get("width"))
        if kind == "ondn":
            return OnDnModel(_vectors(tab, "origins", base, path), _vectors(tab, "dirs", base, path, True),
                             rmin, rmax, tab.get("width"))
    except KeyError as e:
        raise ParseError(f"{kind} sensor is missing key {e}", path) from None
    raise ParseError(f"unknown sensor kind '{kind}', expected one of {', '.join(KINDS)}", path)


def rig_from_dict(doc: dict, base: Path = Path("."), path=None) -> SensorRig:
    """Accepts ``[sensor]`` with a ``kind`` key, or a single table named after the kind."""
    if "sensor" in doc:
        tab = doc["sensor"]
        kind = tab.get("kind")
        if kind is None:
            raise ParseError("[sensor] table needs a 'kind' key", path)
    else:
        found = [k for k in KINDS if k in doc]
        if len(found) != 1:
            raise ParseError(f"expected one sensor table ([sensor] or one of {', '.join(KINDS)})", path)
        kind = found[0]
        tab = doc[kind]
    model = model_from_table(kind, tab, base, path)
    t_sb = tab.get("t_sb", doc.get("t_sb", [0, 0, 0, 0, 0, 0]))
    if len(t_sb) != 6:
        raise ParseError("t_sb must be [x, y, z, roll, pitch, yaw]", path)
    x, y, z, r, p, yw = (float(a) for a in t_sb)
    return SensorRig(model, Transform.from_xyz_rpy(x, y, z, math.radians(r), math.radians(p), math.radians(yw)))


def load_sensor(path) -> SensorRig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise ParseError(str(e), path) from None
    return rig_from_dict(doc, path.parent, path)


def bundled_sensor_path(name: str = "vlp16") -> Path:
    return Path(__file__).with_name("data") / f"{name}.toml"
