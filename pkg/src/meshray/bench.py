"""Benchmark harness: scan-count and map-size sweeps in scans per second."""

from __future__ import annotations

import logging
import os
import platform
import time
from dataclasses import dataclass, field

import numpy as np

from .assets import make_icosphere
from .errors import InvalidModel
from .math3d import Aabb
from .scene import Scene
from .sensors import SensorRig, vlp16_preset
from .simulation import AttrSelection, PoseBatch, simulate

log = logging.getLogger(__name__)

# poses per simulate() call; bounds the range buffer at ~60 MB for VLP-16
CHUNK = 1024


@dataclass
class BenchRecord:
    device: str
    workload: int  # scans for the scan sweep, faces for the map-size sweep
    seconds: float  # total over all repetitions
    scans_per_second: float
    reps: int
    n_scans: int
    times: list = field(default_factory=list)  # per repetition

    @property
    def median_seconds(self) -> float:
        return float(np.median(self.times))


def device_label() -> str:
    cpu = platform.processor() or platform.machine()
    return f"{cpu} ({os.cpu_count()} cpus)"


def _random_yaw_poses(xyz, rng) -> PoseBatch:
    yaw = rng.uniform(-np.pi, np.pi, len(xyz))
    m = np.tile(np.eye(4), (len(xyz), 1, 1))
    c, s = np.cos(yaw), np.sin(yaw)
    m[:, 0, 0], m[:, 0, 1], m[:, 1, 0], m[:, 1, 1] = c, -s, s, c
    m[:, :3, 3] = xyz
    return PoseBatch(m)


def poses_in_ball(n: int, center, radius: float, seed: int = 0) -> PoseBatch:
    """Uniform positions in a ball, uniform yaw."""
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.uniform(0.0, 1.0, n) ** (1.0 / 3.0)
    return _random_yaw_poses(np.asarray(center) + d * r[:, None], rng)


def poses_in_box(n: int, box: Aabb, seed: int = 0) -> PoseBatch:
    rng = np.random.default_rng(seed)
    return _random_yaw_poses(rng.uniform(box.min, box.max, (n, 3)), rng)


def sphere_scene(target_faces: int, radius: float = 10.0) -> Scene:
    s = Scene(name=f"icosphere{target_faces}")
    s.add_geometry(make_icosphere(target_faces, radius), "sphere")
    s.commit()
    return s


def time_scans(scene: Scene, rig: SensorRig, poses: PoseBatch, reps: int, threads=None) -> list[float]:
    """Wall time of each repetition of simulating ranges for all ``poses``."""
    sel = AttrSelection(ranges=True)
    mats = poses.matrices
    # warm-up: compile and touch the scene once outside the timed region
    simulate(scene, rig, PoseBatch(mats[:1]), sel, threads)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        for i in range(0, len(mats), CHUNK):
            simulate(scene, rig, PoseBatch(mats[i:i + CHUNK]), sel, threads)
        times.append(time.perf_counter() - t0)
    return times


def linear_fit(x, y):
    """Least squares ``y = a + b x``; returns ``(a, b, r2)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    b, a = np.polyfit(x, y, 1)
    ss_res = float(np.sum((y - (a + b * x)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(a), float(b), r2


def _check_reps(reps):
    if reps < 1:
        raise InvalidModel(f"reps must be at least 1, got {reps}")


def bench_scans(scene: Scene, counts, reps: int, rig: SensorRig | None = None, poses: PoseBatch | None = None,
                seed: int = 0, threads=None, progress=None) -> list[BenchRecord]:
    """Time ``reps`` simulations of the first ``N`` poses for each ``N`` in ``counts``."""
    _check_reps(reps)
    counts = [int(c) for c in counts]
    if not counts or min(counts) < 1:
        raise InvalidModel("counts must be positive")
    rig = rig or SensorRig(vlp16_preset())
    if poses is None:
        poses = poses_in_box(max(counts), scene.bounds(), seed)
    if len(poses) < max(counts):
        raise InvalidModel(f"need {max(counts)} poses, got {len(poses)}")
    dev = device_label()
    out = []
    for n in counts:
        times = time_scans(scene, rig, PoseBatch(poses.matrices[:n]), reps, threads)
        total = sum(times)
        out.append(BenchRecord(dev, n, total, n * reps / total, reps, n, times))
        if progress:
            progress(out[-1])
    return out


def scan_linearity(records: list[BenchRecord]):
    """Fit over every repetition and over per-count medians: ``((a, b, r2), (a, b, r2))``."""
    xs = [r.workload for r in records for _ in r.times]
    ys = [t for r in records for t in r.times]
    all_fit = linear_fit(xs, ys)
    med_fit = linear_fit([r.workload for r in records], [r.median_seconds for r in records])
    return all_fit, med_fit


def bench_mapsize(face_targets, scans: int, reps: int, rig: SensorRig | None = None, seed: int = 0,
                  radius: float = 10.0, threads=None, progress=None) -> list[BenchRecord]:
    """Icospheres of growing size, the same ``scans`` poses near the center of each."""
    _check_reps(reps)
    if scans < 1:
        raise InvalidModel(f"scans must be at least 1, got {scans}")
    targets = [int(f) for f in face_targets]
    if targets != sorted(targets):
        log.warning("face counts are not ascending; sorting them")
        targets = sorted(targets)
    rig = rig or SensorRig(vlp16_preset())
    poses = poses_in_ball(scans, np.zeros(3), 0.5 * radius, seed)
    dev = device_label()
    out = []
    for target in targets:
        scene = sphere_scene(target, radius)
        faces = scene.stored_face_count
        times = time_scans(scene, rig, poses, reps, threads)
        total = sum(times)
        out.append(BenchRecord(dev, faces, total, scans * reps / total, reps, scans, times))
        del scene
        if progress:
            progress(out[-1])
    return out


def step_ratios(records: list[BenchRecord]) -> list[float]:
    """Median time of each size over the previous size."""
    return [b.median_seconds / a.median_seconds for a, b in zip(records, records[1:])]
