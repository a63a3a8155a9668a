import hashlib
import math
import os
import subprocess
import sys
import textwrap

import numpy as np
import pytest

from meshray import Mesh, Scene, make_ground_plane
from meshray.errors import DirtyScene, EmptyPoseBatch, InvalidModel, MissingAttributes
from meshray.math3d import Transform
from meshray.sensors import DiscreteInterval, O1DnModel, SensorRig, SphericalModel, vlp16_preset
from meshray.simulation import (
    AttrSelection,
    PoseBatch,
    result_point_consistency_check,
    simulate,
    simulate_ranges,
)
from oracles import NO_ID, random_grid_mesh, rpy_matrix

IDENTITY = PoseBatch([np.eye(4)])


def ground(z=0.0, h=1000.0):
    s = Scene()
    m = make_ground_plane(h)
    m.vertices[:, 2] += z
    s.add_geometry(m)
    s.commit()
    return s


def check_miss_encoding(r):
    hit = r.hits.astype(bool)
    assert np.array_equal(hit, np.isfinite(r.ranges))
    assert np.all(np.isposinf(r.ranges[~hit]))
    assert np.all(np.isnan(r.points[~hit])) and np.all(np.isnan(r.normals[~hit]))
    assert not np.isnan(r.points[hit]).any() and not np.isnan(r.normals[hit]).any()
    assert np.all(r.prim_ids[~hit] == NO_ID) and np.all(r.geom_ids[~hit] == NO_ID)
    assert np.all(r.inst_ids[~hit] == NO_ID)


def test_selection_names():
    assert AttrSelection.from_names("ranges,points").names == ["ranges", "points"]
    assert AttrSelection.from_names("ids").names == ["prim_ids", "geom_ids", "inst_ids"]
    assert len(AttrSelection.from_names("all").names) == 7
    assert len(AttrSelection.every_nonempty()) == 127
    with pytest.raises(InvalidModel):
        AttrSelection()
    with pytest.raises(InvalidModel):
        AttrSelection.from_names("colors")


def test_pose_batch_validation():
    with pytest.raises(EmptyPoseBatch):
        PoseBatch([])
    with pytest.raises(InvalidModel):
        PoseBatch([np.diag([2.0, 1, 1, 1])])
    pb = PoseBatch.from_arrays([[1, 2, 3]], [[0, 0, 0, 1]])
    assert np.allclose(pb.matrices[0], np.eye(4) + np.pad(np.array([[1], [2], [3]]), ((0, 1), (3, 0))))


def test_sphere_center_all_hit(sphere_k5, vlp16_rig):
    r = simulate(sphere_k5, vlp16_rig, IDENTITY, AttrSelection(hits=True, ranges=True))
    assert r.ranges.shape == (1, 14_400)
    assert np.all(r.hits == 1)
    assert np.all((r.ranges >= 9.9) & (r.ranges <= 10.0))


def test_ground_plane_ring(vlp16_rig):
    s = ground()
    r = simulate(s, vlp16_rig, PoseBatch([Transform.from_translation(0, 0, 0.5)]), AttrSelection(ranges=True))
    ring = r.ranges[0, :900]  # phi = -15 deg
    assert np.all(np.isfinite(ring))
    assert np.allclose(ring, 0.5 / math.sin(math.radians(15)), atol=1e-5)
    # upward rings never return
    assert np.all(np.isinf(r.ranges[0, 8 * 900:]))


def test_empty_scene_all_miss(vlp16_rig):
    s = Scene()
    s.commit()
    r = simulate(s, vlp16_rig, IDENTITY, AttrSelection.all())
    assert np.all(r.hits == 0) and np.all(np.isposinf(r.ranges))
    check_miss_encoding(r)


def test_dirty_and_empty_batch(vlp16_rig):
    s = ground()
    s.update_vertices(0, [(0, (-1000, -1000, 0.1))])
    with pytest.raises(DirtyScene):
        simulate(s, vlp16_rig, IDENTITY)
    s.commit()
    with pytest.raises(EmptyPoseBatch):
        simulate(s, vlp16_rig, [])


def test_buffer_shapes_and_types(sphere_k5, vlp16_rig):
    poses = PoseBatch.from_positions([[0, 0, 0], [1, 0, 0], [0, 2, 0]])
    r = simulate(sphere_k5, vlp16_rig, poses, AttrSelection.all())
    assert r.hits.dtype == np.uint8 and r.ranges.dtype == np.float32
    assert r.points.shape == (3, 14_400, 3) and r.points.dtype == np.float32
    assert r.prim_ids.dtype == np.uint32
    assert simulate_ranges(sphere_k5, vlp16_rig, poses).size == 43_200
    assert np.array_equal(simulate_ranges(sphere_k5, vlp16_rig, poses), r.ranges)
    only = simulate(sphere_k5, vlp16_rig, poses, AttrSelection(points=True))
    assert only.ranges is None and only.normals is None
    assert np.array_equal(only.points, r.points)
    assert np.all(r.casts == 14_400)


def test_results_in_sensor_frame(vlp16_rig):
    # sensor above a floor, rolled upside down: the floor appears at +z in the sensor frame
    s = ground()
    pose = Transform.from_xyz_rpy(0, 0, 2.0, math.pi, 0, 0)
    r = simulate(s, vlp16_rig, PoseBatch([pose]), AttrSelection(points=True, normals=True))
    hit = ~np.isnan(r.points[0, :, 0])
    assert hit.any()
    assert np.allclose(r.points[0, hit, 2], 2.0, atol=1e-5)
    assert np.allclose(r.normals[0, hit], (0, 0, -1), atol=1e-6)


def test_point_consistency(sphere_k5, vlp16_rig):
    poses = PoseBatch.from_positions([[0, 0, 0], [3, -2, 1]])
    r = simulate(sphere_k5, vlp16_rig, poses, AttrSelection(ranges=True, points=True))
    assert result_point_consistency_check(r, vlp16_rig) == 0
    r.points[1, 777, 0] += 0.01
    assert result_point_consistency_check(r, vlp16_rig) == 1
    with pytest.raises(MissingAttributes):
        result_point_consistency_check(simulate(sphere_k5, vlp16_rig, poses), vlp16_rig)


def test_point_consistency_miss_only(vlp16_rig):
    s = Scene()
    s.commit()
    r = simulate(s, vlp16_rig, IDENTITY, AttrSelection(ranges=True, points=True))
    assert result_point_consistency_check(r, vlp16_rig) == 0


def test_mounting_chain(vlp16_rig):
    # base at z=1, sensor mounted 0.5 m higher: floor ring at phi=-15 deg sees 1.5 m height
    s = ground()
    rig = SensorRig(vlp16_preset(), Transform.from_translation(0, 0, 0.5))
    r = simulate(s, rig, PoseBatch([Transform.from_translation(0, 0, 1.0)]), AttrSelection(ranges=True))
    assert np.allclose(r.ranges[0, :900], 1.5 / math.sin(math.radians(15)), atol=1e-5)


def test_range_limits():
    s = ground()
    dirs = np.array([[0.0, 0, -1], [math.cos(math.radians(1)), 0, -math.sin(math.radians(1))]])
    rig = SensorRig(O1DnModel((0, 0, 0), dirs, range_min=0.0, range_max=10.0))
    r = simulate(s, rig, PoseBatch([Transform.from_translation(0, 0, 0.5)]), AttrSelection(ranges=True))
    assert r.ranges[0, 0] == pytest.approx(0.5)
    assert np.isinf(r.ranges[0, 1])  # floor at ~28.6 m is beyond range_max
    near = SensorRig(O1DnModel((0, 0, 0), dirs, range_min=1.0, range_max=100.0))
    r = simulate(s, near, PoseBatch([Transform.from_translation(0, 0, 0.5)]), AttrSelection(ranges=True))
    assert np.isinf(r.ranges[0, 0]) and np.isfinite(r.ranges[0, 1])


def test_miss_encoding_and_normal_orientation(rng):
    v, f = random_grid_mesh(rng, 40, bump=2.0)
    s = Scene()
    s.add_geometry(Mesh(v, f))
    s.commit()
    rig = SensorRig(vlp16_preset())
    poses = PoseBatch([Transform.from_xyz_rpy(*rng.uniform(-5, 5, 2), z, *rng.uniform(-1, 1, 3))
                       for z in (-3.0, 3.0, 0.0)])
    r = simulate(s, rig, poses, AttrSelection.all())
    check_miss_encoding(r)
    _, d = rig.model.rays()
    hit = r.hits.astype(bool)
    dots = np.einsum("prk,rk->pr", r.normals.astype(np.float64), d)
    assert np.all(dots[hit] <= 1e-6)
    assert np.allclose(np.linalg.norm(r.normals[hit], axis=-1), 1.0, atol=1e-6)


def test_frame_covariance(rng):
    v, f = random_grid_mesh(rng, 40, bump=2.0)
    rig = SensorRig(vlp16_preset(), Transform.from_xyz_rpy(0.1, 0, 0.3, 0, 0.1, 0))
    poses = [Transform.from_xyz_rpy(*rng.uniform(-5, 5, 2), 3.0, *rng.uniform(-0.5, 0.5, 3)) for _ in range(4)]
    G = Transform.from_xyz_rpy(12.0, -7.0, 3.0, 0.3, -0.2, 1.1)
    a = Scene()
    a.add_geometry(Mesh(v, f))
    a.commit()
    b = Scene()
    b.add_geometry(Mesh(G.apply(v), f))
    b.commit()
    sel = AttrSelection(ranges=True, points=True, prim_ids=True)
    ra = simulate(a, rig, PoseBatch(poses), sel)
    rb = simulate(b, rig, PoseBatch([G @ p for p in poses]), sel)
    assert np.array_equal(np.isfinite(ra.ranges), np.isfinite(rb.ranges))
    hit = np.isfinite(ra.ranges)
    assert np.allclose(ra.ranges[hit], rb.ranges[hit], rtol=0, atol=1e-5)
    assert np.allclose(ra.points[hit], rb.points[hit], rtol=0, atol=1e-5)
    assert np.mean(ra.prim_ids == rb.prim_ids) > 0.999


def test_rotation_matches_oracle_frame(rng):
    # the rig rotation in simulate follows the same rpy convention as the independent oracle
    s = ground()
    rig = SensorRig(O1DnModel((0, 0, 0), [[1.0, 0, 0]]))
    roll, pitch, yaw = 0.2, 0.7, -0.4
    pose = Transform.from_xyz_rpy(0, 0, 3.0, roll, pitch, yaw)
    r = simulate(s, rig, PoseBatch([pose]), AttrSelection(ranges=True))
    d = rpy_matrix(roll, pitch, yaw) @ [1.0, 0, 0]
    assert r.ranges[0, 0] == pytest.approx(3.0 / -d[2], rel=1e-6)


def test_repeatable(sphere_k5, vlp16_rig):
    poses = PoseBatch.from_positions(np.random.default_rng(1).uniform(-5, 5, (8, 3)))
    a = simulate(sphere_k5, vlp16_rig, poses, AttrSelection.all())
    b = simulate(sphere_k5, vlp16_rig, poses, AttrSelection.all())
    for n in ("ranges", "points", "normals", "prim_ids"):
        assert np.array_equal(getattr(a, n), getattr(b, n), equal_nan=True)


DETERMINISM_SCRIPT = textwrap.dedent("""
    import hashlib, numpy as np
    from meshray import Scene, make_icosphere
    from meshray.sensors import SensorRig, vlp16_preset
    from meshray.simulation import AttrSelection, PoseBatch, simulate
    from meshray.noise import GaussianNoise, DustNoise, apply_noise
    s = Scene(); s.add_geometry(make_icosphere(20 * 4**4, 10.0)); s.commit()
    rig = SensorRig(vlp16_preset())
    poses = PoseBatch.from_positions(np.random.default_rng(3).uniform(-4, 4, (6, 3)))
    r = simulate(s, rig, poses, AttrSelection.all())
    n1 = apply_noise(r.ranges, GaussianNoise(0.01, seed=5), rig)
    n2 = apply_noise(r.ranges, DustNoise(0.01, seed=5), rig)
    h = hashlib.sha256()
    for a in (r.hits, r.ranges, r.points, r.normals, r.prim_ids, r.geom_ids, r.inst_ids, n1, n2):
        h.update(np.ascontiguousarray(a).tobytes())
    print(h.hexdigest())
""")


def run_with_threads(n):
    env = dict(os.environ, NUMBA_NUM_THREADS=str(n))
    out = subprocess.run([sys.executable, "-c", DETERMINISM_SCRIPT], env=env, capture_output=True,
                         text=True, check=True)
    return out.stdout.strip().splitlines()[-1]


def test_determinism_across_thread_counts():
    assert run_with_threads(1) == run_with_threads(4)


def test_thread_cap_argument(sphere_k5, vlp16_rig):
    a = simulate(sphere_k5, vlp16_rig, IDENTITY, threads=1)
    b = simulate(sphere_k5, vlp16_rig, IDENTITY, threads=None)
    assert hashlib.sha1(a.ranges.tobytes()).digest() == hashlib.sha1(b.ranges.tobytes()).digest()


def test_cylindrical_rig_in_tube():
    # open cylinder of radius 2 around the z axis; the ring sensor sees range 2 at every height
    n = 256
    ang = np.linspace(0, 2 * np.pi, n, endpoint=False)
    zs = np.array([-3.0, 3.0])
    v = np.array([[2 * np.cos(a), 2 * np.sin(a), z] for z in zs for a in ang])
    i = np.arange(n)
    j = (i + 1) % n
    f = np.concatenate([np.stack([i, j, j + n], 1), np.stack([i, j + n, i + n], 1)])
    s = Scene()
    s.add_geometry(Mesh(v, f))
    s.commit()
    from meshray.sensors import CylindricalModel

    rig = SensorRig(CylindricalModel(DiscreteInterval(0, 2 * np.pi / 90, 90), DiscreteInterval(-1, 0.5, 5)))
    r = simulate(s, rig, IDENTITY, AttrSelection(ranges=True, points=True))
    chord = 2 * (1 - np.cos(np.pi / n))
    assert np.all((r.ranges >= 2 - chord - 1e-6) & (r.ranges <= 2 + 1e-6))
    assert np.allclose(r.points[0, :, 2], np.repeat(np.arange(-1, 1.01, 0.5), 90), atol=1e-6)


def test_spherical_pattern_subset():
    m = SphericalModel(DiscreteInterval(0, 0.1, 10), DiscreteInterval(-0.3, 0.1, 3), 0.0, 50.0)
    s = ground()
    r = simulate(s, SensorRig(m), PoseBatch([Transform.from_translation(0, 0, 1.0)]), AttrSelection(ranges=True))
    assert r.ranges.shape == (1, 30)
    assert np.allclose(r.ranges[0, :10], 1.0 / math.sin(0.3), atol=1e-5)
    assert np.allclose(r.ranges[0, 20:], 1.0 / math.sin(0.1), atol=1e-5)
