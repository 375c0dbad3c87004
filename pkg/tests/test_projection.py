import numpy as np
import pytest

from stackalign.projection import RandomProjection, rp_apply, rp_from_seed, rp_new
from stackalign.tensorcore import ParameterError, Rng, ShapeError

S3 = np.sqrt(3.0)


def test_entry_distribution_and_variance():
    R = rp_new(Rng(0), 768, 300).matrix
    freq = [np.mean(R == S3), np.mean(R == 0), np.mean(R == -S3)]
    np.testing.assert_allclose(freq, [1 / 6, 2 / 3, 1 / 6], atol=0.02)
    assert abs(R.var() - 1.0) < 0.02
    assert set(np.unique(R)) <= {S3, 0.0, -S3}


def test_determinism_and_read_only():
    a, b = rp_from_seed(3, 11, 20, 5), rp_from_seed(3, 11, 20, 5)
    np.testing.assert_array_equal(a.matrix, b.matrix)
    with pytest.raises(ValueError):
        a.matrix[0, 0] = 1.0


def test_apply_hand_value_and_zero():
    R = np.array([[S3, 0.0], [0.0, -S3], [0.0, 0.0]])
    proj = RandomProjection(R, 2, 3, 0)
    np.testing.assert_array_equal(rp_apply(proj, [1.0, 1.0]), [S3, -S3, 0.0])
    np.testing.assert_array_equal(rp_apply(proj, np.zeros((4, 2))), np.zeros((4, 3)))
    with pytest.raises(ShapeError):
        rp_apply(proj, np.zeros(3))


def test_errors():
    with pytest.raises(ParameterError):
        rp_new(Rng(0), 0, 3)


def test_norm_preserved_in_expectation():
    rng = np.random.default_rng(0)
    D, P = 32, 64
    vals = []
    for i in range(2000):
        x = rng.standard_normal(D)
        x /= np.linalg.norm(x)
        y = rp_apply(rp_new(Rng(i), D, P), x)
        vals.append(y @ y / P)
    assert 0.95 <= np.mean(vals) <= 1.05


def test_pairwise_distance_preservation():
    proj = rp_new(Rng(1), 768, 300)
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((100, 768)), rng.standard_normal((100, 768))
    d = rp_apply(proj, x - y)
    ratio = (d ** 2).sum(1) / (300 * ((x - y) ** 2).sum(1))
    assert np.mean((ratio >= 0.75) & (ratio <= 1.25)) >= 0.95


def test_linearity():
    proj = rp_new(Rng(2), 10, 4)
    rng = np.random.default_rng(2)
    x, z = rng.standard_normal(10), rng.standard_normal(10)
    np.testing.assert_allclose(rp_apply(proj, 2.5 * x - 3 * z),
                               2.5 * rp_apply(proj, x) - 3 * rp_apply(proj, z), rtol=1e-12, atol=1e-12)
