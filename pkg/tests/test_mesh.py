from dataclasses import replace

import numpy as np
import pytest

from rdmix.errors import DataFormatError, DegenerateDirectionError, MeshQualityError
from rdmix.mesh import (
    MeshManifold,
    MeshPoint,
    TriMesh,
    build_laplacian,
    compute_basis,
    eigenfunction_density,
    grid_mesh,
    icosphere,
    load_basis,
    load_mesh,
    mesh_step,
    sample_faces,
    save_basis,
    save_off,
    spectral_dist_sq,
    spectral_log,
    spectral_log_checked,
    subdivide,
    tetrahedron,
)


@pytest.fixture(scope="module")
def square():
    return grid_mesh(32)


@pytest.fixture(scope="module")
def square_basis(square):
    return compute_basis(square, K=60)


@pytest.fixture(scope="module")
def sphere_mesh():
    return icosphere(3)


@pytest.fixture(scope="module")
def sphere_basis(sphere_mesh):
    return compute_basis(sphere_mesh, K=100)


def random_points(mesh, rng, n):
    return sample_faces(mesh, mesh.areas, rng, n)


def test_laplacian_rows_and_symmetry(sphere_mesh):
    S, mass = build_laplacian(sphere_mesh)
    assert np.abs(S @ np.ones(S.shape[0])).max() < 1e-9
    assert abs(S - S.T).max() < 1e-12
    assert np.all(mass > 0)
    assert mass.sum() == pytest.approx(sphere_mesh.total_area)


def test_tetrahedron_cotangent_weight():
    S, _ = build_laplacian(tetrahedron())
    off = S.toarray()[~np.eye(4, dtype=bool)]
    np.testing.assert_allclose(off, -1.0 / np.sqrt(3.0), atol=1e-12)


def test_degenerate_triangle_rejected():
    v = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], dtype=float)
    with pytest.raises(MeshQualityError, match="face ids \\[0\\]"):
        TriMesh(v, [[0, 1, 2], [0, 1, 3]])


def test_square_spectrum(square_basis):
    lam = square_basis.eigenvalues / np.pi**2
    expected = [1, 1, 2, 4, 4, 5, 5, 8, 9, 9]
    np.testing.assert_allclose(lam[: len(expected)], expected, rtol=0.05)


def test_basis_orthonormal_and_residual(square, square_basis):
    S, mass = build_laplacian(square)
    phi = square_basis.eigenfunctions
    np.testing.assert_allclose(phi.T @ (mass[:, None] * phi), np.eye(phi.shape[1]), atol=1e-6)
    Mphi = mass[:, None] * phi
    resid = np.linalg.norm(S @ phi - square_basis.eigenvalues * Mphi, axis=0) / np.linalg.norm(Mphi, axis=0)
    assert resid.max() < 1e-8
    assert np.all(np.diff(square_basis.eigenvalues) >= 0) and square_basis.eigenvalues[0] > 0


def test_sparse_solver_matches_dense(monkeypatch):
    import rdmix.mesh as M

    mesh = grid_mesh(12)
    dense = compute_basis(mesh, K=10)
    monkeypatch.setattr(M, "_DENSE_LIMIT", 10)
    sparse = compute_basis(mesh, K=10)
    np.testing.assert_allclose(sparse.eigenvalues, dense.eigenvalues, rtol=1e-8)


def test_basis_deterministic(square):
    a = compute_basis(square, K=8)
    b = compute_basis(square, K=8)
    np.testing.assert_array_equal(a.eigenfunctions, b.eigenfunctions)


def test_weights(square_basis):
    lam = square_basis.eigenvalues
    np.testing.assert_allclose(square_basis.weights, np.exp(-2 * lam / lam[-1]))
    bi = compute_basis(grid_mesh(6), K=5, weight_kind="biharmonic")
    np.testing.assert_allclose(bi.weights, bi.eigenvalues**-2.0)


def test_spectral_distance_metric(sphere_mesh, sphere_basis, rng):
    x, y, z = (random_points(sphere_mesh, rng, 1000) for _ in range(3))
    assert np.all(spectral_dist_sq(sphere_basis, x, x) == 0.0)
    np.testing.assert_array_equal(spectral_dist_sq(sphere_basis, x, y), spectral_dist_sq(sphere_basis, y, x))
    dxy = np.sqrt(spectral_dist_sq(sphere_basis, x, y))
    dyz = np.sqrt(spectral_dist_sq(sphere_basis, y, z))
    dxz = np.sqrt(spectral_dist_sq(sphere_basis, x, z))
    assert np.all(dxz <= dxy + dyz + 1e-12)


def test_spectral_log_degenerate_at_target(sphere_mesh, sphere_basis, rng):
    x = random_points(sphere_mesh, rng, 3)
    with pytest.raises(DegenerateDirectionError):
        spectral_log(sphere_basis, x, x)


def test_spectral_log_descends(sphere_mesh, sphere_basis, rng):
    x = random_points(sphere_mesh, rng, 1000)
    z = random_points(sphere_mesh, rng, 1000)
    v, ok = spectral_log_checked(sphere_basis, x, z)
    assert ok.mean() > 0.99
    eps = 1e-4
    u = v / np.linalg.norm(v, axis=1, keepdims=True)
    fwd = mesh_step(sphere_mesh, x, eps * u).point
    bwd = mesh_step(sphere_mesh, x, -eps * u).point
    slope = (spectral_dist_sq(sphere_basis, fwd, z) - spectral_dist_sq(sphere_basis, bwd, z)) / (2 * eps)
    assert np.all(slope[ok] < 0)


def test_spectral_log_magnitude(sphere_mesh, sphere_basis, rng):
    # first-order: a step along the direction removes half of d^2 ... to leading order all of it
    x = random_points(sphere_mesh, rng, 200)
    z = random_points(sphere_mesh, rng, 200)
    v = spectral_log(sphere_basis, x, z)
    d2 = spectral_dist_sq(sphere_basis, x, z)
    u = v / np.linalg.norm(v, axis=1, keepdims=True)
    eps = 1e-5
    fwd = mesh_step(sphere_mesh, x, eps * u).point
    slope = (spectral_dist_sq(sphere_basis, fwd, z) - d2) / eps
    # directional derivative of d^2 along v equals -2 d^2 (so of d along v equals -d)
    np.testing.assert_allclose(slope * np.linalg.norm(v, axis=1), -2 * d2, rtol=1e-2, atol=1e-10)


def test_flat_square_direction_matches_straight_line(rng):
    # large truncation, diffusion time long enough for the kernel to span the pair separation
    mesh = grid_mesh(32)
    basis = compute_basis(mesh, K=300)
    basis = replace(basis, t_diff=1.0 / basis.eigenvalues[9])
    n = 200
    pts = []
    for _ in range(2):
        pos = rng.uniform(0.25, 0.75, (n, 2))
        face = _locate(mesh, pos)
        pts.append(face)
    (fx, bx), (fz, bz) = pts
    sep = np.linalg.norm(mesh.positions(fx, bx) - mesh.positions(fz, bz), axis=1)
    far = (sep > 0.02) & (sep < 0.4)
    x, z = MeshPoint(fx[far], bx[far]), MeshPoint(fz[far], bz[far])
    v = spectral_log(basis, x, z)
    line = z.position(mesh) - x.position(mesh)
    cos = np.sum(v * line, 1) / np.linalg.norm(v, axis=1) / np.linalg.norm(line, axis=1)
    assert np.degrees(np.arccos(np.clip(cos, -1, 1))).max() < 15.0


def _locate(mesh, pos):
    """Face and barycentrics of planar positions on a grid mesh (brute force)."""
    faces, barys = [], []
    P = mesh.vertices[mesh.faces][:, :, :2]
    for q in pos:
        a, b, c = P[:, 0], P[:, 1], P[:, 2]
        den = (b[:, 1] - c[:, 1]) * (a[:, 0] - c[:, 0]) + (c[:, 0] - b[:, 0]) * (a[:, 1] - c[:, 1])
        l0 = ((b[:, 1] - c[:, 1]) * (q[0] - c[:, 0]) + (c[:, 0] - b[:, 0]) * (q[1] - c[:, 1])) / den
        l1 = ((c[:, 1] - a[:, 1]) * (q[0] - c[:, 0]) + (a[:, 0] - c[:, 0]) * (q[1] - c[:, 1])) / den
        lam = np.stack([l0, l1, 1 - l0 - l1], axis=1)
        f = int(np.argmax(lam.min(axis=1)))
        faces.append(f)
        barys.append(np.clip(lam[f], 0, None) / np.clip(lam[f], 0, None).sum())
    return np.array(faces), np.array(barys)


def test_mesh_step_zero(sphere_mesh, rng):
    x = random_points(sphere_mesh, rng, 20)
    res = mesh_step(sphere_mesh, x, np.zeros((20, 3)))
    np.testing.assert_array_equal(res.point.face, x.face)
    np.testing.assert_array_equal(res.point.bary, x.bary)


def test_mesh_step_inside_face(square):
    f = 100
    x = MeshPoint(np.array([f]), np.array([[1 / 3, 1 / 3, 1 / 3]]))
    p0 = x.position(square)
    v = 1e-4 * square.face_frames[f, 0][None]
    res = mesh_step(square, x, v)
    assert res.point.face[0] == f
    np.testing.assert_allclose(res.point.position(square), p0 + v, atol=1e-10)


def test_mesh_step_flat_multi_face(square):
    # on a flat mesh the unfolded walk is a straight line
    x = MeshPoint(np.array([0]), np.array([[0.6, 0.2, 0.2]]))
    p0 = x.position(square)
    v = np.array([[0.31, 0.17, 0.0]])
    res = mesh_step(square, x, v)
    np.testing.assert_allclose(res.point.position(square), p0 + v, atol=1e-10)
    assert res.length[0] == pytest.approx(np.linalg.norm(v), abs=1e-8)
    assert not res.boundary_hit[0]


def test_mesh_step_length_conserved(sphere_mesh, rng):
    x = random_points(sphere_mesh, rng, 500)
    m = MeshManifold(sphere_mesh)
    v = m.tangent_gaussian(x.pack(), rng, 0.3)
    res = mesh_step(sphere_mesh, x, v)
    np.testing.assert_allclose(res.length, np.linalg.norm(v, axis=1), atol=1e-8)
    pos = res.point.position(sphere_mesh)
    p0 = sphere_mesh.vertices[sphere_mesh.faces[res.point.face, 0]]
    off_plane = np.sum((pos - p0) * sphere_mesh.normals[res.point.face], axis=1)
    assert np.abs(off_plane).max() < 1e-10
    assert np.all(res.point.bary >= 0)
    np.testing.assert_allclose(res.point.bary.sum(1), 1.0, atol=1e-12)


def test_mesh_step_boundary_clamps(square):
    x = MeshPoint(np.array([0]), np.array([[0.6, 0.2, 0.2]]))
    res = mesh_step(square, x, np.array([[-5.0, 0.0, 0.0]]))
    assert res.boundary_hit[0]
    assert res.point.position(square)[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_density_integrates(square):
    d = eigenfunction_density(square, 3)
    assert np.all(d >= 0)
    assert float(np.sum(d * square.areas)) == pytest.approx(1.0, abs=1e-9)


def test_k1_samples_in_positive_domain(square, square_basis, rng):
    d = eigenfunction_density(square, 1, square_basis)
    pts = sample_faces(square, d * square.areas, rng, 100_000)
    phi = square_basis.evaluate(pts.face, pts.bary)[:, 0]
    assert np.mean(phi >= 0) == pytest.approx(1.0, abs=0.01)


def test_subdivide_preserves_surface(sphere_mesh, rng):
    fine, parent, corners = subdivide(sphere_mesh)
    assert fine.n_faces == 4 * sphere_mesh.n_faces
    assert fine.total_area == pytest.approx(sphere_mesh.total_area, rel=1e-12)
    p = random_points(fine, rng, 100)
    coarse_bary = np.einsum("nj,njc->nc", p.bary, corners[p.face])
    np.testing.assert_allclose(sphere_mesh.positions(parent[p.face], coarse_bary), p.position(fine), atol=1e-12)


def test_basis_file_round_trip(tmp_path, square_basis, square):
    path = tmp_path / "mesh.spec"
    save_basis(square_basis, path)
    assert path.read_bytes()[:4] == b"SPB1"
    b = load_basis(path, square)
    np.testing.assert_array_equal(b.eigenvalues, square_basis.eigenvalues)
    np.testing.assert_array_equal(b.eigenfunctions, square_basis.eigenfunctions)
    assert b.t_diff == square_basis.t_diff and b.weight_kind == square_basis.weight_kind
    with pytest.raises(DataFormatError):
        load_basis(path, grid_mesh(4))


def test_off_obj_load(tmp_path):
    m = tetrahedron()
    save_off(m, tmp_path / "t.off")
    back = load_mesh(tmp_path / "t.off")
    assert back.vertices.min() == pytest.approx(0.0) and back.vertices.max() == pytest.approx(1.0)
    assert back.is_closed
    obj = tmp_path / "t.obj"
    obj.write_text("".join(f"v {a} {b} {c}\n" for a, b, c in m.vertices)
                   + "".join(f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in m.faces))
    np.testing.assert_allclose(load_mesh(obj).vertices, back.vertices)
    bad = tmp_path / "q.obj"
    bad.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(DataFormatError):
        load_mesh(bad)


def test_mesh_manifold_pack_and_chord(sphere_mesh, rng):
    m = MeshManifold(sphere_mesh)
    x = m.sample_uniform(rng, 10)
    m.check_point(x)
    assert x.shape == (10, 4)
    np.testing.assert_allclose(m.dist(x, x), 0.0)
    assert m.log_volume() == pytest.approx(np.log(sphere_mesh.total_area))


def test_boundary_factor(square, sphere_mesh, rng):
    m = MeshManifold(square, boundary_band=0.1)
    x = m.sample_uniform(rng, 2000)
    pos = m.positions(x)
    dist = np.minimum(pos[:, :2], 1.0 - pos[:, :2]).min(axis=1)
    # graph distance on the grid equals the axis distance at vertices
    s = m.boundary_factor(x)
    assert np.all((s >= 0.0) & (s <= 1.0))
    np.testing.assert_allclose(s[dist > 0.1 + 1.0 / 32], 1.0)
    np.testing.assert_allclose(s, np.clip(dist / 0.1, 0.0, 1.0), atol=1.0 / 32 / 0.1)
    assert square.nbr_face[0, 2] < 0
    on_edge = MeshPoint(np.array([0]), np.array([[0.5, 0.5, 0.0]])).pack()
    assert m.boundary_factor(on_edge)[0] == 0.0
    np.testing.assert_allclose(MeshManifold(sphere_mesh).boundary_factor(m.sample_uniform(rng, 5)), 1.0)
