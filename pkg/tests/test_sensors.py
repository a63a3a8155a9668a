import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meshray.errors import IndexOutOfRange, InvalidModel, ParseError, ResolutionOutOfRange
from meshray.math3d import Transform
from meshray.sensors import (
    CylindricalModel,
    DiscreteInterval,
    O1DnModel,
    OnDnModel,
    PinholeModel,
    SensorRig,
    SphericalModel,
    bundled_sensor_path,
    generate_ray,
    load_sensor,
    model_ray_count,
    rig_rays_in_base,
    vlp16_preset,
)
from oracles import rpy_matrix, sphere_dirs

deg = math.radians


def test_interval_values():
    iv = DiscreteInterval(-1.0, 0.5, 5)
    assert iv.value(0) == -1.0 and iv.value(4) == 1.0
    assert np.allclose(iv.values(), [-1, -0.5, 0, 0.5, 1])
    with pytest.raises(InvalidModel):
        DiscreteInterval(0.0, 0.0, 3)
    with pytest.raises(InvalidModel):
        DiscreteInterval(0.0, 1.0, 0)


def test_ray_counts():
    assert model_ray_count(vlp16_preset()) == 14_400
    assert model_ray_count(PinholeModel(640, 480, 500, 500, 320, 240)) == 307_200
    dirs = np.tile([1.0, 0, 0], (7, 1))
    assert model_ray_count(O1DnModel((0, 0, 0), dirs)) == 7
    cyl = CylindricalModel(DiscreteInterval(0, deg(1), 360), DiscreteInterval(-0.5, 0.1, 11))
    assert model_ray_count(cyl) == 3960


def test_spherical_forward_ray():
    m = SphericalModel(DiscreteInterval(0.0, 0.1, 3), DiscreteInterval(0.0, 0.1, 2), 0.0, 10.0)
    r = generate_ray(m, 0, 0)
    assert np.allclose(r.dir, (1, 0, 0)) and np.allclose(r.origin, 0)


def test_vlp16_lowest_ring_forward():
    m = vlp16_preset()
    h = int(round(math.pi / m.theta.increment))  # theta index of 0 deg
    r = generate_ray(m, 0, h)
    assert np.allclose(r.dir, (math.cos(deg(15)), 0, -math.sin(deg(15))), atol=1e-12)
    assert np.allclose(r.dir, (0.9659, 0, -0.2588), atol=1e-4)


def test_pinhole_principal_point():
    m = PinholeModel(640, 480, 525.0, 525.0, 319.0, 239.0)
    assert np.allclose(generate_ray(m, 239, 319).dir, (1, 0, 0))
    # a pixel to the right of the center looks toward -y, one below looks toward -z
    assert generate_ray(m, 239, 400).dir[1] < 0
    assert generate_ray(m, 300, 319).dir[2] < 0


def test_cylindrical_rays():
    m = CylindricalModel(DiscreteInterval(0, deg(90), 4), DiscreteInterval(-1.0, 1.0, 3))
    r = generate_ray(m, 2, 1)
    assert np.allclose(r.origin, (0, 0, 1)) and np.allclose(r.dir, (0, 1, 0), atol=1e-12)


def test_custom_patterns():
    dirs = np.eye(3)[[0, 1, 2, 0, 1, 2]]
    m = O1DnModel((1, 2, 3), dirs, declared_width=3)
    assert (m.width, m.height) == (3, 2)
    r = generate_ray(m, 1, 2)
    assert np.allclose(r.dir, (0, 0, 1)) and np.allclose(r.origin, (1, 2, 3))
    m2 = OnDnModel(np.arange(18.0).reshape(6, 3), dirs)
    assert np.allclose(generate_ray(m2, 0, 4).origin, (12, 13, 14))
    with pytest.raises(InvalidModel):
        OnDnModel(np.zeros((5, 3)), dirs)
    with pytest.raises(InvalidModel):
        O1DnModel((0, 0, 0), [[1.0, 1.0, 0]])
    with pytest.raises(InvalidModel):
        O1DnModel((0, 0, 0), dirs, declared_width=4)


def test_generate_ray_bounds():
    m = vlp16_preset()
    with pytest.raises(IndexOutOfRange):
        generate_ray(m, 16, 0)
    with pytest.raises(IndexOutOfRange):
        generate_ray(m, 0, 900)


def test_t_min_defaults_to_epsilon():
    m = vlp16_preset()
    r = generate_ray(m, 0, 0)
    assert r.t_min == 1e-4 and r.t_max == 100.0
    m2 = SphericalModel(DiscreteInterval(0, 0.1, 2), DiscreteInterval(0, 0.1, 2), 2.0, 5.0)
    assert generate_ray(m2, 0, 0).t_min == 2.0


def test_vlp16_preset_resolutions():
    m = vlp16_preset(deg(0.4))
    assert m.theta.count == 900 and m.ray_count == 14_400 and m.range_max == 100.0
    assert vlp16_preset(deg(0.1)).ray_count == 57_600
    with pytest.raises(ResolutionOutOfRange):
        vlp16_preset(deg(1.0))
    with pytest.raises(ResolutionOutOfRange):
        vlp16_preset(deg(0.05))


def test_theta_span_over_full_turn_rejected():
    with pytest.raises(InvalidModel):
        SphericalModel(DiscreteInterval(0, deg(1), 361), DiscreteInterval(0, 0.1, 1))


def test_range_validation():
    with pytest.raises(InvalidModel):
        SphericalModel(DiscreteInterval(0, 0.1, 2), DiscreteInterval(0, 0.1, 2), 5.0, 1.0)
    with pytest.raises(InvalidModel):
        SphericalModel(DiscreteInterval(0, 0.1, 2), DiscreteInterval(0, 0.1, 2), -1.0, 1.0)


def test_batch_matches_trig_oracle_and_layout():
    m = vlp16_preset()
    o, d = m.rays()
    ref = sphere_dirs(m.theta.values(), m.phi.values())
    assert np.allclose(d, ref, atol=1e-12)
    assert np.all(o == 0)
    # scanline-major: index v * W + h
    i = 5 * 900 + 123
    assert np.allclose(d[i], generate_ray(m, 5, 123).dir)


def test_rig_mounting():
    m = vlp16_preset()
    base = rig_rays_in_base(SensorRig(m))
    o, d = m.rays()
    assert np.array_equal(base.dirs, d) and np.array_equal(base.origins, o)
    lifted = rig_rays_in_base(SensorRig(m, Transform.from_translation(0, 0, 0.5)))
    assert np.allclose(lifted.origins, (0, 0, 0.5))
    yawed = rig_rays_in_base(SensorRig(m, Transform.from_xyz_rpy(0, 0, 0, 0, 0, math.pi / 2)))
    fwd = 8 * 900 + 450  # phi = +1 deg, theta = 0
    assert np.allclose(yawed.dirs[fwd], (0, math.cos(deg(1)), math.sin(deg(1))), atol=1e-12)
    assert np.allclose(np.linalg.norm(yawed.dirs, axis=1), 1.0, atol=1e-12)
    with pytest.raises(InvalidModel):
        SensorRig(m, Transform(scale=(2, 2, 2)))


def test_rig_matches_rotation_oracle():
    m = vlp16_preset()
    t = Transform.from_xyz_rpy(0.1, -0.2, 0.3, 0.4, -0.5, 0.6)
    b = rig_rays_in_base(SensorRig(m, t))
    _, d = m.rays()
    assert np.allclose(b.dirs, d @ rpy_matrix(0.4, -0.5, 0.6).T, atol=1e-12)
    assert np.allclose(b.origins, (0.1, -0.2, 0.3))


def test_bundled_vlp16_file():
    rig = load_sensor(bundled_sensor_path("vlp16"))
    m = rig.model
    assert isinstance(m, SphericalModel)
    assert m.ray_count == 14_400
    assert np.allclose(np.degrees(m.phi.values()), np.arange(-15, 16, 2))
    assert (m.range_min, m.range_max) == (0.0, 100.0)
    assert np.allclose(m.rays()[1], vlp16_preset().rays()[1], atol=1e-12)


def test_sensor_files(tmp_path):
    (tmp_path / "pin.toml").write_text(
        '[pinhole]\nwidth = 4\nheight = 3\nfx = 2.0\nfy = 2.0\ncx = 1.5\ncy = 1.0\nrange = [0.1, 8]\n'
        't_sb = [0, 0, 1, 0, 0, 90]\n')
    rig = load_sensor(tmp_path / "pin.toml")
    assert rig.n_rays == 12 and rig.model.range_min == 0.1
    assert np.allclose(rig.t_sb.translation, (0, 0, 1))
    (tmp_path / "dirs.csv").write_text("x,y,z\n1,0,0\n0,1,0\n0,0.7071,0.7071\n")
    (tmp_path / "o1dn.toml").write_text('[sensor]\nkind = "o1dn"\ndirs_csv = "dirs.csv"\nrange_max = 5\n')
    rig = load_sensor(tmp_path / "o1dn.toml")
    assert rig.n_rays == 3
    assert np.allclose(np.linalg.norm(rig.model.dirs, axis=1), 1.0, atol=1e-12)
    (tmp_path / "bad.toml").write_text('[sensor]\nkind = "laser"\n')
    with pytest.raises(ParseError):
        load_sensor(tmp_path / "bad.toml")
    (tmp_path / "broken.toml").write_text('[sensor\n')
    with pytest.raises(ParseError):
        load_sensor(tmp_path / "broken.toml")


@settings(max_examples=50, deadline=None)
@given(st.floats(-3.1, 0.0), st.floats(1e-3, 0.1), st.integers(1, 60),
       st.floats(-1.5, 0.0), st.floats(1e-3, 0.2), st.integers(1, 15))
def test_spherical_unit_norm_and_bijection(t0, ti, tn, p0, pi, pn):
    if ti * (tn - 1) > 2 * math.pi:
        return
    m = SphericalModel(DiscreteInterval(t0, ti, tn), DiscreteInterval(p0, pi, pn), 0.0, 10.0)
    _, d = m.rays()
    assert len(d) == tn * pn
    assert np.all(np.abs(np.linalg.norm(d, axis=1) - 1.0) <= 1e-6)
    v, h = np.divmod(np.arange(m.ray_count), m.width)
    assert np.array_equal(v * m.width + h, np.arange(m.ray_count))


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1.0), st.integers(1, 100), st.floats(-1.0, 1.0), st.floats(1e-3, 0.2), st.integers(1, 8))
def test_spherical_mirror_symmetry(inc, half, p0, pinc, pn):
    # theta symmetric about zero: min = -inc * half, count = 2 * half + 1
    if 2 * half * inc > 2 * math.pi:
        return
    th = DiscreteInterval(-inc * half, inc, 2 * half + 1)
    m = SphericalModel(th, DiscreteInterval(p0, pinc, pn), 0.0, 10.0)
    _, d = m.rays()
    d = d.reshape(pn, 2 * half + 1, 3)
    mirrored = d[:, ::-1]
    assert np.allclose(d[..., 0], mirrored[..., 0], atol=1e-12)
    assert np.allclose(d[..., 2], mirrored[..., 2], atol=1e-12)
    assert np.allclose(d[..., 1], -mirrored[..., 1], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 50), st.integers(1, 50), st.floats(0.01, 1e4), st.floats(0.01, 1e4),
       st.floats(-100, 100), st.floats(-100, 100))
def test_pinhole_forward_facing(w, h, fx, fy, cx, cy):
    _, d = PinholeModel(w, h, fx, fy, cx, cy).rays()
    assert np.all(d[:, 0] > 0)
    assert np.all(np.abs(np.linalg.norm(d, axis=1) - 1.0) <= 1e-6)
