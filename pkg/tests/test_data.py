import math

import numpy as np
import pytest
import scipy.sparse as sp
from scipy import integrate, stats
from scipy.sparse.csgraph import connected_components

from oracles import vmf_entropy_numeric
from rdmix.data import (
    Dataset,
    GaussianPrior,
    UniformPrior,
    WrappedGaussianSpec,
    WrappedNormalPrior,
    circular_variance,
    default_prior,
    gen_mesh_target,
    gen_vmf,
    gen_wrapped_gaussian,
    latlon_to_xyz,
    load_dataset,
    load_points_csv,
    load_sphere_csv,
    load_torus_csv,
    prior_from_spec,
    sample_vmf,
    save_dataset,
    save_points_csv,
    split,
    vmf_entropy,
    vmf_logpdf,
    wrapped_normal_circular_variance,
    wrapped_normal_entropy,
    wrapped_normal_logpdf,
    xyz_to_latlon,
)
from rdmix.errors import ConfigError, DataFormatError, RangeError
from rdmix.manifold import Euclidean, FlatTorus, Hyperboloid, Sphere
from rdmix.mesh import MeshManifold, compute_basis, grid_mesh, icosphere, subdivide


def test_latlon_examples():
    np.testing.assert_allclose(latlon_to_xyz(90.0, 123.0), [0, 0, 1], atol=1e-15)
    np.testing.assert_allclose(latlon_to_xyz(0.0, 0.0), [1, 0, 0], atol=1e-15)


def test_latlon_round_trip(rng):
    x = Sphere(2).sample_uniform(rng, 1000)
    lat, lon = xyz_to_latlon(x)
    np.testing.assert_allclose(latlon_to_xyz(lat, lon), x, atol=1e-9)


def test_load_sphere_csv(tmp_path):
    p = tmp_path / "quakes.csv"
    p.write_text("lat,lon\n90,10\n0,0\n-45.5,170.25\n")
    ds = load_sphere_csv(str(p))
    assert len(ds) == 3 and ds.name == "quakes"
    np.testing.assert_allclose(ds.points[:2], [[0, 0, 1], [1, 0, 0]], atol=1e-15)
    Sphere(2).check_point(ds.points)


def test_sphere_csv_bad_rows_report_lines(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("lat,lon\n10,10\n95,0\nabc,3\n0,0\n")
    with pytest.raises(DataFormatError, match=r"\[3, 4\]"):
        load_sphere_csv(str(p))
    with pytest.raises(DataFormatError):
        load_sphere_csv(str(tmp_path / "missing.csv"))


def test_load_torus_csv(tmp_path):
    p = tmp_path / "rna.csv"
    p.write_text("a,b\n-180,0\n90,-90\n")
    ds = load_torus_csv(str(p), 2)
    np.testing.assert_allclose(ds.points, [[np.pi, 0.0], [np.pi / 2, 3 * np.pi / 2]], atol=1e-15)
    assert np.all(ds.points >= 0) and np.all(ds.points < 2 * np.pi)
    seven = tmp_path / "seven.csv"
    seven.write_text("10,20,30,40,50,60,-70\n")
    assert load_torus_csv(str(seven), 7).manifold == FlatTorus(7)
    with pytest.raises(DataFormatError, match="expected 3 columns"):
        load_torus_csv(str(p), 3)


def test_wrapped_gaussian_small_scale(rng):
    spec = WrappedGaussianSpec(np.array([1.0, 6.0]), scale=1e-12)
    ds = gen_wrapped_gaussian(spec, 100, rng)
    np.testing.assert_allclose(ds.points, np.broadcast_to(spec.mean, (100, 2)), atol=1e-10)
    with pytest.raises(ConfigError):
        WrappedGaussianSpec(np.zeros(2), scale=0.0)


def test_wrapped_gaussian_circular_variance(rng):
    spec = WrappedGaussianSpec.random(3, rng, scale=0.7)
    ds = gen_wrapped_gaussian(spec, 200_000, rng)
    FlatTorus(3).check_point(ds.points)
    ref = wrapped_normal_circular_variance(0.7)
    np.testing.assert_allclose(circular_variance(ds.points), ref, rtol=0.01)


def test_wrapped_normal_density_integrates():
    for scale in (0.2, 1.0, 3.0):
        f = lambda a: math.exp(wrapped_normal_logpdf(np.array([[a]]), 2.0, scale)[0])  # noqa: E731
        total = integrate.quad(f, 0.0, 2 * np.pi, points=[2.0], limit=200, epsabs=1e-13)[0]
        assert total == pytest.approx(1.0, abs=1e-6)


def test_wrapped_normal_truncation_bound():
    # first omitted wrap sits at least (2 * 5 + 1) pi away, so its term is below exp(-(11 pi)^2 / (2 s^2))
    scale = 0.2
    bound = math.exp(-0.5 * (11 * np.pi / scale) ** 2) / (scale * math.sqrt(2 * np.pi))
    assert bound < 1e-12
    theta = np.linspace(0, 2 * np.pi, 101)[:, None]
    a = wrapped_normal_logpdf(theta, 0.0, scale, n_wraps=5)
    b = wrapped_normal_logpdf(theta, 0.0, scale, n_wraps=30)
    assert np.abs(np.exp(a) - np.exp(b)).max() < 1e-12


def test_wrapped_normal_entropy_limits():
    assert wrapped_normal_entropy(0.2) == pytest.approx(0.5 * math.log(2 * math.pi * math.e * 0.04), abs=1e-9)
    assert wrapped_normal_entropy(20.0) == pytest.approx(math.log(2 * math.pi), abs=1e-6)


def test_vmf_sampler_and_entropy(rng):
    mu = np.array([1.0, 2.0, -0.5])
    x = sample_vmf(mu, 10.0, 100_000, rng)
    Sphere(2).check_point(x)
    w = x @ (mu / np.linalg.norm(mu))
    # the polar cosine has density ∝ exp(kappa w) on [-1, 1]
    cdf = lambda v: np.expm1(10.0 * (v + 1)) / np.expm1(20.0)  # noqa: E731
    assert stats.kstest(w, cdf).pvalue > 0.01
    assert vmf_entropy(10.0) == pytest.approx(vmf_entropy_numeric(10.0), abs=1e-6)
    assert np.mean(-vmf_logpdf(x, mu, 10.0)) == pytest.approx(vmf_entropy(10.0), abs=0.01)
    assert gen_vmf(mu, 10.0, 5, rng).manifold == Sphere(2)


def test_mesh_target_on_surface_and_frequencies(rng):
    mesh = icosphere(2)
    ds = gen_mesh_target(mesh, 5, 100_000, rng)
    m = ds.manifold
    m.check_point(ds.points)
    dens = ds.meta["fine_density"]
    face = ds.meta["fine_face"]
    fine = subdivide(mesh)[0]
    p = dens * fine.areas
    keep = p > 0
    counts = np.bincount(face, minlength=len(p))
    assert counts[~keep].sum() == 0
    # pool faces into 50 groups of similar expected count for the chi-square test
    order = np.argsort(p[keep])
    groups = np.array_split(order, 50)
    obs = np.array([counts[keep][g].sum() for g in groups])
    exp = np.array([p[keep][g].sum() for g in groups]) * len(face)
    assert stats.chisquare(obs, exp).pvalue > 0.01


def test_mesh_target_k1_flat_square(rng):
    mesh = grid_mesh(16)
    fine = subdivide(mesh)[0]
    basis = compute_basis(fine, K=1)
    ds = gen_mesh_target(mesh, 1, 20_000, rng, fine_basis=basis)
    phi = basis.eigenfunctions[:, 0]
    at_samples = np.einsum("nc,nc->n", ds.meta["fine_bary"], phi[fine.faces[ds.meta["fine_face"]]])
    assert np.mean(at_samples > 0) == pytest.approx(1.0, abs=0.01)
    # the eigenfunction has exactly two nodal domains: positive and negative vertices each form one component
    e = np.concatenate([fine.faces[:, [0, 1]], fine.faces[:, [1, 2]], fine.faces[:, [2, 0]]])
    for sign in (1, -1):
        keep = sign * phi > 0
        ee = e[keep[e[:, 0]] & keep[e[:, 1]]]
        g = sp.coo_matrix((np.ones(len(ee)), (ee[:, 0], ee[:, 1])), shape=(len(phi),) * 2)
        labels = connected_components(g, directed=False)[1]
        assert len(np.unique(labels[keep])) == 1


def test_split_sizes_and_determinism():
    ds = Dataset(Euclidean(1), np.arange(10.0)[:, None])
    tr, va, te = split(ds, 0)
    assert (len(tr), len(va), len(te)) == (8, 1, 1)
    both = np.concatenate([tr.points, va.points, te.points])[:, 0]
    assert sorted(both) == list(range(10))
    again = split(ds, 0)
    np.testing.assert_array_equal(again[2].points, te.points)
    big = Dataset(Euclidean(1), np.arange(1000.0)[:, None])
    tests = [tuple(split(big, s)[2].points[:, 0]) for s in range(5)]
    assert len(set(tests)) == 5
    assert [len(p) for p in split(big, 0)] == [800, 100, 100]
    with pytest.raises(RangeError):
        split(Dataset(Euclidean(1), np.zeros((9, 1))), 0)


def test_priors(rng):
    S2 = Sphere(2)
    u = UniformPrior(S2)
    np.testing.assert_allclose(u.logp(S2.sample_uniform(rng, 3)), -math.log(4 * math.pi))
    assert UniformPrior(FlatTorus(2)).logp(np.zeros((1, 2)))[0] == pytest.approx(-2 * math.log(2 * math.pi))
    g = GaussianPrior(Euclidean(2))
    x = rng.standard_normal((4, 2))
    np.testing.assert_allclose(g.logp(x), stats.multivariate_normal(np.zeros(2)).logpdf(x))
    assert isinstance(default_prior(Hyperboloid()), WrappedNormalPrior)
    assert isinstance(default_prior(MeshManifold(icosphere(1))), UniformPrior)
    assert prior_from_spec(S2, {"kind": "uniform"}).spec() == {"kind": "uniform"}
    with pytest.raises(ConfigError):
        prior_from_spec(S2, {"kind": "cauchy"})


def test_hyperboloid_prior_normalized(rng):
    H = Hyperboloid()
    prior = WrappedNormalPrior(H, scale=0.7)
    H.check_point(prior.sample(rng, 100))
    # integrate in geodesic polar coordinates around the origin: area element sinh(r) dr dphi
    def integrand(r):
        x = np.array([[math.cosh(r), math.sinh(r), 0.0]])
        return math.exp(prior.logp(x)[0]) * math.sinh(r) * 2 * math.pi

    total = integrate.quad(integrand, 0, 12)[0]
    assert total == pytest.approx(1.0, abs=1e-8)


def test_points_csv_round_trip(tmp_path, rng):
    for m, pts in [(Sphere(2), Sphere(2).sample_uniform(rng, 20)),
                   (FlatTorus(3), FlatTorus(3).sample_uniform(rng, 20)),
                   (MeshManifold(icosphere(1)), MeshManifold(icosphere(1)).sample_uniform(rng, 20))]:
        path = tmp_path / "p.csv"
        save_points_csv(path, m, pts, comments=["note"])
        np.testing.assert_array_equal(load_points_csv(path, m), pts)


def test_dataset_directory_round_trip(tmp_path, rng):
    mesh = grid_mesh(4)
    ds = gen_mesh_target(mesh, 1, 50, rng)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(str(tmp_path / "d"))
    np.testing.assert_array_equal(back.points, ds.points)
    assert back.name == ds.name
    np.testing.assert_allclose(back.manifold.mesh.vertices, mesh.vertices)
    (tmp_path / "d" / "points.csv").write_text("face,b0,b1,b2\n0,0.5,0.5,0.0\n")
    with pytest.raises(DataFormatError):
        load_dataset(str(tmp_path / "d"))
