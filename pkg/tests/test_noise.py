import math

import numpy as np

from pdvkit.noise import NoiseStream, block_increments


def test_stream_depends_only_on_seed_and_index():
    a = NoiseStream(3, 17).normals(100)
    b = NoiseStream(3, 17).normals(100)
    c = NoiseStream(3, 18).normals(100)
    d = NoiseStream(4, 17).normals(100)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_prefix_stability():
    long = NoiseStream(1, 5).normals(1000)
    short = NoiseStream(1, 5).normals(10)
    np.testing.assert_array_equal(long[:10], short)


def test_antithetic_pairs():
    even = NoiseStream(9, 4, antithetic=True).normals(50)
    odd = NoiseStream(9, 5, antithetic=True).normals(50)
    np.testing.assert_array_equal(odd, -even)
    np.testing.assert_array_equal(even, NoiseStream(9, 4).normals(50))


def test_zero_driver():
    assert not NoiseStream(0, 0, driver="zero").increments(10, 0.1).any()


def test_coarse_increments_are_sums_of_fine():
    dt = 1e-3
    fine = NoiseStream(2, 0).increments(8, dt / 4)
    coarse = NoiseStream(2, 0).increments(2, dt, substeps=4)
    z = NoiseStream(2, 0).normals(8)
    np.testing.assert_array_equal(coarse, z.reshape(2, 4).sum(axis=1) * math.sqrt(dt / 4))
    np.testing.assert_allclose(coarse, fine.reshape(2, 4).sum(axis=1), rtol=1e-14)


def test_increment_variance():
    dW = NoiseStream(0, 0).increments(200_000, 0.01)
    # sample variance of 2e5 normals: relative SE about sqrt(2 / 2e5) = 0.3%
    assert abs(dW.var() / 0.01 - 1) < 0.015
    assert abs(dW.mean()) < 4 * math.sqrt(0.01 / 200_000)


def test_block_grouping_does_not_matter():
    whole = block_increments(0, range(6), 20, 0.01)
    parts = np.concatenate([block_increments(0, [0, 1], 20, 0.01), block_increments(0, [2, 3, 4, 5], 20, 0.01)], axis=1)
    np.testing.assert_array_equal(whole, parts)
    np.testing.assert_array_equal(whole[:, 3], NoiseStream(0, 3).increments(20, 0.01))
