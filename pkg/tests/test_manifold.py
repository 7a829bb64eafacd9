import math

import numpy as np
import pytest
from scipy import stats

from rdmix.errors import CutLocusError, NumericInputError, UnsupportedPriorError
from rdmix.manifold import Euclidean, FlatTorus, Hyperboloid, Sphere, from_spec

S2 = Sphere(2)
N_POLE = np.array([0.0, 0.0, 1.0])


def random_pairs(m, rng, n=200):
    if isinstance(m, Hyperboloid):
        o = np.tile(m.origin, (2 * n, 1))
        pts = m.exp(o, m.tangent_gaussian(o, rng, 1.0))
        return pts[:n], pts[n:]
    if isinstance(m, Euclidean):
        return rng.standard_normal((n, m.dim)), rng.standard_normal((n, m.dim))
    return m.sample_uniform(rng, n), m.sample_uniform(rng, n)


ALL = [Euclidean(3), Sphere(2), Sphere(4), FlatTorus(3), Hyperboloid()]


def test_sphere_exp_example():
    out = S2.exp(N_POLE, np.array([np.pi / 2, 0.0, 0.0]))
    np.testing.assert_allclose(out, [1.0, 0.0, 0.0], atol=1e-15)


@pytest.mark.parametrize("m", ALL, ids=repr)
def test_exp_zero_is_identity(m, rng):
    x, _ = random_pairs(m, rng, 5)
    np.testing.assert_allclose(m.exp(x, np.zeros((5, m.tangent_dim))), x, atol=1e-14)


def test_torus_exp_wraps():
    assert FlatTorus(1).exp(np.array([6.0]), np.array([0.5]))[0] == pytest.approx(6.5 - 2 * np.pi, abs=1e-12)
    assert 6.5 - 2 * np.pi == pytest.approx(0.2168, abs=1e-4)


def test_sphere_log_example():
    np.testing.assert_allclose(S2.log(N_POLE, np.array([1.0, 0.0, 0.0])), [np.pi / 2, 0, 0], atol=1e-15)


def test_torus_log_example():
    assert FlatTorus(1).log(np.array([0.1]), np.array([6.2]))[0] == pytest.approx(6.1 - 2 * np.pi, abs=1e-12)


def test_hyperboloid_log_example():
    H = Hyperboloid()
    y = np.array([math.cosh(1.0), math.sinh(1.0), 0.0])
    v = H.log(H.origin, y)
    np.testing.assert_allclose(v, [0.0, 1.0, 0.0], atol=1e-12)
    assert H.norm(H.origin, v) == pytest.approx(1.0, abs=1e-12)
    assert math.acosh(-(-y[0])) == pytest.approx(1.0)
    np.testing.assert_allclose(H.exp(H.origin, v), y, atol=1e-12)


def test_sphere_antipodal_log_raises():
    with pytest.raises(CutLocusError):
        S2.log(N_POLE, -N_POLE)
    _, ok = S2.log_checked(np.stack([N_POLE, N_POLE]), np.stack([-N_POLE, [1.0, 0, 0]]))
    assert ok.tolist() == [False, True]


@pytest.mark.parametrize("m", ALL, ids=repr)
def test_round_trip_and_norm(m, rng):
    x, y = random_pairs(m, rng)
    v = m.log(x, y)
    if isinstance(m, FlatTorus):
        d = m.log(m.exp(x, v), y)
        np.testing.assert_allclose(d, 0.0, atol=1e-7)
    else:
        np.testing.assert_allclose(m.exp(x, v), y, atol=1e-7)
    np.testing.assert_allclose(m.norm(x, v), m.dist(x, y), atol=1e-9)


def test_geodesic_dist_examples():
    assert S2.dist(N_POLE, -N_POLE) == pytest.approx(np.pi, abs=1e-12)
    assert S2.dist(N_POLE, N_POLE) == 0.0
    T2 = FlatTorus(2)
    assert T2.dist(np.zeros(2), np.array([np.pi, np.pi])) == pytest.approx(np.pi * np.sqrt(2))


@pytest.mark.parametrize("m", ALL, ids=repr)
def test_dist_symmetric(m, rng):
    x, y = random_pairs(m, rng)
    np.testing.assert_allclose(m.dist(x, y), m.dist(y, x), atol=1e-10)


def test_projection_examples():
    np.testing.assert_allclose(S2.proj(N_POLE, np.array([1.0, 1.0, 1.0])), [1, 1, 0])
    w = np.array([0.3, -0.2, 0.0])
    np.testing.assert_allclose(S2.proj(N_POLE, w), w)
    np.testing.assert_array_equal(Euclidean(3).proj(np.zeros(3), w), w)


@pytest.mark.parametrize("m", ALL, ids=repr)
def test_projection_idempotent_and_tangent(m, rng):
    x, _ = random_pairs(m, rng, 50)
    w = rng.standard_normal((50, m.tangent_dim))
    p = m.proj(x, w)
    np.testing.assert_allclose(m.proj(x, p), p, atol=1e-12)
    m.check_tangent(x, p)


@pytest.mark.parametrize("m", ALL, ids=repr)
def test_proj_vjp_is_adjoint(m, rng):
    x, _ = random_pairs(m, rng, 20)
    w = rng.standard_normal((20, m.tangent_dim))
    g = rng.standard_normal((20, m.tangent_dim))
    lhs = np.sum(g * m.proj(x, w), axis=1)
    rhs = np.sum(m.proj_vjp(x, g) * w, axis=1)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_torus_log_range(rng):
    T = FlatTorus(4)
    v = T.log(T.sample_uniform(rng, 1000), T.sample_uniform(rng, 1000))
    assert np.all(v > -np.pi) and np.all(v <= np.pi)
    assert T.log(np.array([0.0]), np.array([np.pi]))[0] == pytest.approx(np.pi)


def test_hyperboloid_stays_on_sheet(rng):
    H = Hyperboloid()
    x = np.tile(H.origin, (100, 1))
    for _ in range(200):
        x = H.exp(x, H.tangent_gaussian(x, rng, 0.1))
    H.check_point(x, tol=1e-9)


def test_sphere_uniform_mean_and_chi2(rng):
    x = S2.sample_uniform(rng, 100_000)
    assert np.all(np.abs(x.mean(axis=0)) < 0.02)
    # z is uniform on [-1, 1] for the uniform measure on S^2 (equal-area bands)
    counts = np.histogram(x[:, 2], bins=20, range=(-1, 1))[0]
    assert stats.chisquare(counts).pvalue > 0.01


def test_torus_uniform_marginals(rng):
    x = FlatTorus(2).sample_uniform(rng, 50_000)
    for c in range(2):
        assert stats.kstest(x[:, c] / (2 * np.pi), "uniform").pvalue > 0.01


def test_sample_uniform_empty_and_noncompact(rng):
    assert S2.sample_uniform(rng, 0).shape == (0, 3)
    with pytest.raises(UnsupportedPriorError):
        Euclidean(2).sample_uniform(rng, 3)
    with pytest.raises(UnsupportedPriorError):
        Hyperboloid().sample_uniform(rng, 3)


def test_sphere_tangent_gaussian_covariance(rng):
    x = np.tile(N_POLE, (100_000, 1))
    v = S2.tangent_gaussian(x, rng, 1.0)
    np.testing.assert_allclose(v[:, 2], 0.0, atol=1e-15)
    np.testing.assert_allclose(np.cov(v[:, :2].T), np.eye(2), atol=0.02)


def test_tangent_gaussian_small_scale(rng):
    v = S2.tangent_gaussian(np.tile(N_POLE, (10, 1)), rng, 1e-12)
    assert np.abs(v).max() < 1e-10


def test_euclidean_gaussian_moments(rng):
    v = Euclidean(3).tangent_gaussian(np.zeros((50_000, 3)), rng, 2.0)
    np.testing.assert_allclose(v.mean(axis=0), 0.0, atol=0.05)
    np.testing.assert_allclose(v.std(axis=0), 2.0, atol=0.05)


@pytest.mark.parametrize("m", ALL, ids=repr)
def test_tangent_basis_orthonormal(m, rng):
    x, _ = random_pairs(m, rng, 10)
    E = m.tangent_basis(x)
    assert E.shape == (10, m.dim, m.tangent_dim)
    for i in range(m.dim):
        for j in range(m.dim):
            np.testing.assert_allclose(m.inner(x, E[:, i], E[:, j]), float(i == j), atol=1e-12)


def test_non_finite_rejected():
    with pytest.raises(NumericInputError):
        S2.exp(N_POLE, np.array([np.nan, 0.0, 0.0]))


def test_sphere_volume():
    assert S2.log_volume() == pytest.approx(math.log(4 * math.pi))


@pytest.mark.parametrize("m", ALL, ids=repr)
def test_spec_round_trip(m):
    assert from_spec(m.spec()) == m
