"""Range noise models applied after simulation.

Every random variate is a pure function of ``(seed, counter)``: element
``i`` of a buffer draws from counters ``2i`` and ``2i + 1``. Results are
therefore independent of processing order and worker count, and a permuted
buffer noised with the matching permuted indices gives the permuted output.

Misses (non-finite ranges) pass through untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from numba import njit, prange

from .errors import InvalidSpec
from .math3d import RAY_EPSILON

_M64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_C1 = 0xBF58476D1CE4E5B9
_C2 = 0x94D049BB133111EB
_STREAM = 0xD1B54A32D192ED03  # odd, so counter -> counter * _STREAM is a bijection
_INV_2_53 = 1.0 / 9007199254740992.0

_GAUSSIAN, _RELGAUSSIAN, _DUST = 0, 1, 2


@njit(inline="always", cache=True)
def _fmix(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_C1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_C2)
    return z ^ (z >> np.uint64(31))


@njit(inline="always", cache=True)
def _key(seed):
    return _fmix(seed + np.uint64(_GOLDEN))


@njit(inline="always", cache=True)
def _uniform(key, counter):
    x = _fmix(key ^ (counter * np.uint64(_STREAM) + np.uint64(_GOLDEN)))
    return np.float64(x >> np.uint64(11)) * _INV_2_53


@njit(cache=True)
def _uniform_many(seed, counters, out):
    key = _key(seed)
    for i in range(counters.shape[0]):
        out[i] = _uniform(key, counters[i])


def noise_rng(seed: int, index: int) -> float:
    """Uniform variate in ``[0, 1)`` determined by ``(seed, index)`` alone."""
    out = np.empty(1)
    _uniform_many(np.uint64(seed & _M64), np.array([index & _M64], dtype=np.uint64), out)
    return float(out[0])


def noise_uniforms(seed: int, counters) -> np.ndarray:
    c = np.ascontiguousarray(counters, dtype=np.uint64).ravel()
    out = np.empty(len(c))
    _uniform_many(np.uint64(seed & _M64), c, out)
    return out


@njit(parallel=True, cache=True)
def _noise_kernel(r, idx, kind, seed, p0, p1, p2, lo, hi, t_min):
    key = _key(seed)
    two = np.uint64(2)
    one = np.uint64(1)
    for i in prange(r.shape[0]):
        x = r[i]
        if not np.isfinite(x):
            continue
        c = idx[i] * two
        u1 = _uniform(key, c)
        u2 = _uniform(key, c + one)
        if kind == _DUST:
            p = 1.0 - (1.0 - p0) ** x
            if u1 < p and x > t_min:
                r[i] = t_min + u2 * (x - t_min)
            continue
        sigma = p0 if kind == _GAUSSIAN else p0 + p1 * x ** p2
        # Box-Muller; 1 - u1 lies in (0, 1] so the log is finite
        z = math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)
        y = x + sigma * z
        if y < lo:
            y = lo
        elif y > hi:
            y = hi
        r[i] = y


@dataclass(frozen=True)
class GaussianNoise:
    sigma: float
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0 or not math.isfinite(self.sigma):
            raise InvalidSpec(f"gaussian sigma must be finite and >= 0, got {self.sigma}")


@dataclass(frozen=True)
class RelGaussianNoise:
    """Gaussian with ``sigma(r) = sigma_a + sigma_b * r ** exp``."""

    sigma_a: float
    sigma_b: float
    exp: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma_a", "sigma_b"):
            v = getattr(self, name)
            if not v >= 0 or not math.isfinite(v):
                raise InvalidSpec(f"relgaussian {name} must be finite and >= 0, got {v}")
        if not self.exp > 0 or not math.isfinite(self.exp):
            raise InvalidSpec(f"relgaussian exp must be > 0, got {self.exp}")


@dataclass(frozen=True)
class DustNoise:
    """Each hit becomes, with probability ``1 - (1 - rho) ** r``, a phantom
    return uniform in ``[t_min, r)``."""

    rho: float
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.rho < 1.0):
            raise InvalidSpec(f"dust rho must be in [0, 1), got {self.rho}")


NoiseSpec = Union[GaussianNoise, RelGaussianNoise, DustNoise]

_PARSE = {
    "gaussian": (GaussianNoise, {"sigma": "sigma"}),
    "relgaussian": (RelGaussianNoise, {"a": "sigma_a", "sigma_a": "sigma_a", "b": "sigma_b",
                                       "sigma_b": "sigma_b", "exp": "exp"}),
    "dust": (DustNoise, {"rho": "rho"}),
}


def parse_noise(text: str, seed: int = 0):
    """Parse ``kind:key=value,...``, e.g. ``gaussian:sigma=0.01`` or ``dust:rho=0.01``."""
    kind, _, rest = text.strip().partition(":")
    kind = kind.strip().lower()
    if kind not in _PARSE:
        raise InvalidSpec(f"unknown noise model '{kind}', expected one of {', '.join(_PARSE)}")
    cls, keys = _PARSE[kind]
    kw = {}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        k, eq, v = item.partition("=")
        k = k.strip().lower()
        if not eq or k not in keys:
            raise InvalidSpec(f"bad parameter '{item}' for {kind} noise (allowed: {', '.join(keys)})")
        try:
            kw[keys[k]] = float(v)
        except ValueError:
            raise InvalidSpec(f"parameter {k} of {kind} noise is not a number: '{v}'") from None
    try:
        return cls(seed=seed, **kw)
    except TypeError as e:
        raise InvalidSpec(f"{kind} noise: {e}") from None


def apply_noise(ranges, spec, rig=None, index=None, range_min=None, range_max=None) -> np.ndarray:
    """Noisy copy of ``ranges`` (any shape, flattened in C order for indexing).

    Range limits come from ``rig.model`` unless given explicitly. ``index``
    overrides the per-element counter (defaults to the flat position).
    """
    r_in = np.asarray(ranges)
    if not np.issubdtype(r_in.dtype, np.floating):
        raise InvalidSpec("ranges must be a floating point buffer")
    r = np.ascontiguousarray(r_in, dtype=np.float64).ravel().copy()
    if index is None:
        idx = np.arange(len(r), dtype=np.uint64)
    else:
        idx = np.ascontiguousarray(index, dtype=np.uint64).ravel()
        if len(idx) != len(r):
            raise InvalidSpec(f"{len(idx)} indices for {len(r)} ranges")
    if rig is not None:
        range_min = rig.model.range_min if range_min is None else range_min
        range_max = rig.model.range_max if range_max is None else range_max
    lo = 0.0 if range_min is None else float(range_min)
    hi = math.inf if range_max is None else float(range_max)
    t_min = max(RAY_EPSILON, lo)

    if isinstance(spec, GaussianNoise):
        args = (_GAUSSIAN, spec.sigma, 0.0, 1.0)
    elif isinstance(spec, RelGaussianNoise):
        args = (_RELGAUSSIAN, spec.sigma_a, spec.sigma_b, spec.exp)
    elif isinstance(spec, DustNoise):
        args = (_DUST, spec.rho, 0.0, 1.0)
    else:
        raise InvalidSpec(f"not a noise spec: {spec!r}")
    kind, p0, p1, p2 = args
    _noise_kernel(r, idx, kind, np.uint64(spec.seed & _M64), float(p0), float(p1), float(p2), lo, hi, t_min)
    return r.astype(r_in.dtype, copy=False).reshape(r_in.shape)
