import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from meshray.errors import InvalidSpec
from meshray.noise import (
    DustNoise,
    GaussianNoise,
    RelGaussianNoise,
    apply_noise,
    noise_rng,
    noise_uniforms,
    parse_noise,
)
from meshray.sensors import SensorRig, vlp16_preset

N = 1_000_000


def test_rng_is_pure():
    assert noise_rng(7, 123) == noise_rng(7, 123)
    assert 0.0 <= noise_rng(0, 0) < 1.0
    a = noise_uniforms(1, np.arange(1000))
    b = noise_uniforms(2, np.arange(1000))
    assert not np.array_equal(a, b)
    assert np.array_equal(a[10:20], noise_uniforms(1, np.arange(10, 20)))


def test_rng_scalar_matches_batch():
    u = noise_uniforms(99, np.arange(5))
    assert [noise_rng(99, i) for i in range(5)] == list(u)


def test_rng_chi_square():
    u = noise_uniforms(2024, np.arange(N))
    counts, _ = np.histogram(u, bins=100, range=(0.0, 1.0))
    assert stats.chisquare(counts).pvalue > 0.01
    assert u.min() >= 0.0 and u.max() < 1.0


def test_rng_lag_one_correlation():
    u = noise_uniforms(5, np.arange(N))
    assert abs(np.corrcoef(u[:-1], u[1:])[0, 1]) < 0.01


def test_rng_neighbouring_seeds_uncorrelated():
    a = noise_uniforms(10, np.arange(N))
    b = noise_uniforms(11, np.arange(N))
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.01


def test_gaussian_statistics():
    r = np.full(N, 10.0)
    out = apply_noise(r, GaussianNoise(0.01, seed=1))
    err = out - 10.0
    assert abs(err.mean()) <= 4 * 0.01 / math.sqrt(N)
    assert abs(err.std() - 0.01) <= 0.01 * 0.01
    assert stats.normaltest(err[:100_000]).pvalue > 0.01


def test_zero_sigma_is_bitwise_identity():
    r = np.random.default_rng(0).uniform(1, 50, 1000).astype(np.float32)
    r[::7] = np.inf
    out = apply_noise(r, GaussianNoise(0.0, seed=3))
    assert out.dtype == np.float32
    assert out.tobytes() == r.tobytes()


def test_rel_gaussian_with_zero_slope_equals_gaussian():
    r = np.random.default_rng(1).uniform(1, 50, 10_000)
    a = apply_noise(r, RelGaussianNoise(0.02, 0.0, 1.0, seed=8))
    b = apply_noise(r, GaussianNoise(0.02, seed=8))
    assert np.array_equal(a, b)


def test_rel_gaussian_grows_with_range():
    near = apply_noise(np.full(200_000, 1.0), RelGaussianNoise(0.001, 0.01, 1.0, seed=2))
    far = apply_noise(np.full(200_000, 40.0), RelGaussianNoise(0.001, 0.01, 1.0, seed=2))
    assert np.std(near - 1.0) == pytest.approx(0.011, rel=0.02)
    assert np.std(far - 40.0) == pytest.approx(0.401, rel=0.02)


def test_dust_rate_and_phantom_range():
    r = np.full(N, 10.0)
    out = apply_noise(r, DustNoise(0.01, seed=4))
    replaced = out != 10.0
    p = 1 - 0.99**10
    assert p == pytest.approx(0.0956, abs=1e-4)
    assert abs(replaced.mean() - p) <= 0.003
    ph = out[replaced]
    assert ph.min() >= 1e-4 and ph.max() < 10.0
    assert stats.kstest(ph, stats.uniform(loc=1e-4, scale=10.0 - 1e-4).cdf).pvalue > 0.01


def test_dust_zero_density_is_identity():
    r = np.random.default_rng(2).uniform(1, 50, 1000)
    assert np.array_equal(apply_noise(r, DustNoise(0.0, seed=1)), r)


def test_misses_stay_misses():
    r = np.random.default_rng(3).uniform(0.5, 99, 10_000).astype(np.float32)
    r[::3] = np.inf
    for spec in (GaussianNoise(5.0, 1), RelGaussianNoise(0.1, 0.5, 1.0, 1), DustNoise(0.5, 1)):
        out = apply_noise(r, spec, SensorRig(vlp16_preset()))
        assert np.array_equal(np.isinf(out), np.isinf(r))
        fin = out[np.isfinite(out)]
        assert fin.min() >= 0.0 and fin.max() <= 100.0


def test_gaussian_clamps_to_sensor_interval():
    out = apply_noise(np.full(10_000, 99.99), GaussianNoise(1.0, 1), range_min=0.5, range_max=100.0)
    assert out.max() == 100.0 and np.mean(out == 100.0) > 0.4
    out = apply_noise(np.full(10_000, 0.6), GaussianNoise(1.0, 1), range_min=0.5, range_max=100.0)
    assert out.min() == 0.5


def test_order_independence():
    rng = np.random.default_rng(5)
    r = rng.uniform(1, 50, 5000)
    perm = rng.permutation(len(r))
    for spec in (GaussianNoise(0.1, 9), DustNoise(0.05, 9)):
        direct = apply_noise(r, spec)
        shuffled = apply_noise(r[perm], spec, index=perm)
        back = np.empty_like(shuffled)
        back[perm] = shuffled
        assert np.array_equal(back, direct)


def test_shape_preserved():
    r = np.full((3, 4), 5.0, np.float32)
    out = apply_noise(r, GaussianNoise(0.1, 0))
    assert out.shape == (3, 4) and out.dtype == np.float32


def test_invalid_specs():
    with pytest.raises(InvalidSpec):
        GaussianNoise(-1.0)
    with pytest.raises(InvalidSpec):
        DustNoise(1.0)
    with pytest.raises(InvalidSpec):
        RelGaussianNoise(0.1, 0.1, 0.0)
    with pytest.raises(InvalidSpec):
        apply_noise(np.arange(3), GaussianNoise(0.1))


def test_parse_noise():
    assert parse_noise("gaussian:sigma=0.01", 3) == GaussianNoise(0.01, 3)
    assert parse_noise("relgaussian:a=0.005,b=0.002,exp=1") == RelGaussianNoise(0.005, 0.002, 1.0)
    assert parse_noise("dust:rho=0.01") == DustNoise(0.01)
    for bad in ("fog:x=1", "gaussian:sigma=abc", "gaussian:width=1", "dust:rho=2"):
        with pytest.raises(InvalidSpec):
            parse_noise(bad)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**64 - 1), st.integers(0, 2**40))
def test_rng_range(seed, index):
    u = noise_rng(seed, index)
    assert 0.0 <= u < 1.0
