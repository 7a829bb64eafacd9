"""Triangle-mesh manifolds.

Geometry on a mesh is handled face by face: a point is a face index plus
barycentric coordinates, tangent vectors are 3D vectors in the face plane, and
walking along a tangent vector unfolds the path across shared edges.  Spectral
distances come from the cotangent Laplacian with a lumped mass matrix.
"""
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

from .errors import (
    DataFormatError,
    DegenerateDirectionError,
    MeshQualityError,
    NumericInputError,
    SolverError,
)
from .manifold import Manifold

WEIGHT_KINDS = ("diffusion", "biharmonic")
_BASIS_MAGIC = b"SPB1"
_DENSE_LIMIT = 3000


class TriMesh:
    """Triangle mesh with the per-face quantities the walkers need."""

    def __init__(self, vertices, faces, check=True):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.faces = np.ascontiguousarray(faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise DataFormatError("vertices must have shape (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise DataFormatError("faces must be triangles, shape (F, 3)")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise DataFormatError("face index out of range")

        p = self.vertices[self.faces]
        cross = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        dbl = np.linalg.norm(cross, axis=1)
        self.areas = 0.5 * dbl
        self.total_area = float(self.areas.sum())
        if check:
            bad = np.flatnonzero(self.areas < 1e-12 * max(self.total_area, 1e-300))
            if bad.size:
                raise MeshQualityError(f"degenerate triangles: face ids {bad.tolist()}")
        with np.errstate(invalid="ignore", divide="ignore"):
            self.normals = cross / dbl[:, None]

        # gradient of barycentric coordinate i is N x e_i / 2A, e_i the edge opposite vertex i
        edges = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            self.bary_grads = np.cross(self.normals[:, None, :], edges) / dbl[:, None, None]
            self.edge_units = edges / np.linalg.norm(edges, axis=2, keepdims=True)
        self._build_adjacency()
        e1 = self.edge_units[:, 2]
        self.face_frames = np.stack([e1, np.cross(self.normals, e1)], axis=1)

    def _build_adjacency(self):
        F = len(self.faces)
        self.nbr_face = np.full((F, 3), -1, dtype=np.int64)
        self.nbr_opp = np.full((F, 3), -1, dtype=np.int64)
        # local indices in the neighbour of our edge vertices (i+1, i+2)
        self.nbr_map = np.full((F, 3, 2), -1, dtype=np.int64)
        owners = {}
        for f, tri in enumerate(self.faces.tolist()):
            for i in range(3):
                a, b = tri[(i + 1) % 3], tri[(i + 2) % 3]
                owners.setdefault((min(a, b), max(a, b)), []).append((f, i))
        self.non_manifold_edges = 0
        for key, lst in owners.items():
            if len(lst) > 2:
                self.non_manifold_edges += 1
                continue
            if len(lst) != 2:
                continue
            (f, i), (g, j) = lst
            for (f0, i0), (g0, j0) in (((f, i), (g, j)), ((g, j), (f, i))):
                self.nbr_face[f0, i0] = g0
                self.nbr_opp[f0, i0] = j0
                tri_g = self.faces[g0].tolist()
                a, b = self.faces[f0, (i0 + 1) % 3], self.faces[f0, (i0 + 2) % 3]
                self.nbr_map[f0, i0] = (tri_g.index(a), tri_g.index(b))

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    @property
    def is_closed(self):
        return bool(np.all(self.nbr_face >= 0))

    def boundary_vertices(self):
        """Indices of vertices lying on a boundary edge (empty when closed)."""
        f, i = np.nonzero(self.nbr_face < 0)
        ends = np.concatenate([self.faces[f, (i + 1) % 3], self.faces[f, (i + 2) % 3]])
        return np.unique(ends)

    def boundary_distance(self):
        """Per-vertex shortest edge-path length to the boundary (inf when closed)."""
        src = self.boundary_vertices()
        if src.size == 0:
            return np.full(self.n_vertices, np.inf)
        a = self.faces.ravel()
        b = np.roll(self.faces, -1, axis=1).ravel()
        w = np.linalg.norm(self.vertices[a] - self.vertices[b], axis=1)
        g = sp.coo_matrix((w, (a, b)), shape=(self.n_vertices,) * 2).tocsr()
        return csgraph.dijkstra(g, directed=False, indices=src, min_only=True)

    def mean_edge_length(self):
        e = self.vertices[np.roll(self.faces, -1, axis=1)] - self.vertices[self.faces]
        return float(np.linalg.norm(e, axis=2).mean())

    def normalized(self):
        """Copy scaled uniformly so the coordinates lie in [0, 1]^3."""
        lo = self.vertices.min(axis=0)
        extent = float((self.vertices.max(axis=0) - lo).max())
        return TriMesh((self.vertices - lo) / extent, self.faces)

    def positions(self, face, bary):
        return np.einsum("...j,...jc->...c", bary, self.vertices[self.faces[face]])


# -- construction helpers ------------------------------------------------------

def grid_mesh(n=32, size=1.0):
    """Flat ``n x n`` triangulated square ``[0, size]^2`` in the z = 0 plane."""
    xs = np.linspace(0.0, size, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    verts = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    faces = np.concatenate([np.column_stack([a, b, d]), np.column_stack([a, d, c])])
    return TriMesh(verts, faces)


def tetrahedron():
    """Regular tetrahedron with unit edge length, outward oriented."""
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    v /= 2.0 * np.sqrt(2.0)
    faces = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return TriMesh(v, faces)


def icosphere(subdivisions=2):
    t = (1.0 + 5**0.5) / 2.0
    v = np.array(
        [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]],
        dtype=float,
    )
    f = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    )
    mesh = TriMesh(v / np.linalg.norm(v, axis=1, keepdims=True), f)
    for _ in range(subdivisions):
        mesh, _, _ = subdivide(mesh)
        mesh = TriMesh(mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True), mesh.faces)
    return mesh


# child k of a face, as barycentric coordinates of its corners in the parent
_CHILD_CORNERS = np.array(
    [
        [[1, 0, 0], [0.5, 0.5, 0], [0.5, 0, 0.5]],
        [[0.5, 0.5, 0], [0, 1, 0], [0, 0.5, 0.5]],
        [[0.5, 0, 0.5], [0, 0.5, 0.5], [0, 0, 1]],
        [[0.5, 0.5, 0], [0, 0.5, 0.5], [0.5, 0, 0.5]],
    ]
)


def subdivide(mesh):
    """One round of 1-to-4 midpoint subdivision.

    The refined surface coincides with the input, so refined points map back
    exactly.  Returns ``(fine, parent, corners)`` where child face ``c`` lies in
    ``parent[c]`` and ``corners[c]`` holds its corner barycentrics in the parent.
    """
    V = mesh.n_vertices
    edge_id = {}
    mids = []
    F = mesh.faces
    new_faces = np.empty((4 * len(F), 3), dtype=np.int64)
    for f, (a, b, c) in enumerate(F.tolist()):
        m = []
        for u, w in ((a, b), (b, c), (a, c)):
            key = (min(u, w), max(u, w))
            if key not in edge_id:
                edge_id[key] = V + len(mids)
                mids.append(key)
            m.append(edge_id[key])
        ab, bc, ac = m
        new_faces[4 * f: 4 * f + 4] = [[a, ab, ac], [ab, b, bc], [ac, bc, c], [ab, bc, ac]]
    mids = np.array(mids, dtype=np.int64).reshape(-1, 2)
    verts = np.concatenate([mesh.vertices, 0.5 * (mesh.vertices[mids[:, 0]] + mesh.vertices[mids[:, 1]])])
    parent = np.repeat(np.arange(len(F)), 4)
    corners = np.tile(_CHILD_CORNERS, (len(F), 1, 1))
    return TriMesh(verts, new_faces), parent, corners


# -- file formats --------------------------------------------------------------

def _data_lines(path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


def load_off(path, normalize=True):
    lines = _data_lines(path)
    try:
        _, head = next(lines)
        if head[0] == "OFF":
            head = head[1:] or next(lines)[1]
        elif head[0].startswith("OFF"):
            raise DataFormatError(f"{path}: only plain ASCII OFF is supported")
        nv, nf = int(head[0]), int(head[1])
        verts = [list(map(float, next(lines)[1][:3])) for _ in range(nv)]
        faces = []
        for _ in range(nf):
            lineno, tok = next(lines)
            if int(tok[0]) != 3:
                raise DataFormatError(f"{path}:{lineno}: only triangle faces are supported")
            faces.append(list(map(int, tok[1:4])))
    except (StopIteration, ValueError, IndexError) as exc:
        raise DataFormatError(f"{path}: malformed OFF file ({exc})") from exc
    mesh = TriMesh(np.array(verts), np.array(faces))
    return mesh.normalized() if normalize else mesh


def load_obj(path, normalize=True):
    verts, faces = [], []
    for lineno, tok in _data_lines(path):
        if tok[0] == "v":
            verts.append(list(map(float, tok[1:4])))
        elif tok[0] == "f":
            if len(tok) != 4:
                raise DataFormatError(f"{path}:{lineno}: only triangle faces are supported")
            faces.append([int(t.split("/")[0]) - 1 for t in tok[1:]])
    mesh = TriMesh(np.array(verts), np.array(faces))
    return mesh.normalized() if normalize else mesh


def load_mesh(path, normalize=True):
    path = str(path)
    if path.lower().endswith(".off"):
        return load_off(path, normalize)
    if path.lower().endswith(".obj"):
        return load_obj(path, normalize)
    raise DataFormatError(f"unsupported mesh format: {path}")


def save_off(mesh, path):
    with open(path, "w") as fh:
        fh.write(f"OFF\n{mesh.n_vertices} {mesh.n_faces} 0\n")
        for v in mesh.vertices:
            fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


# -- Laplace-Beltrami ----------------------------------------------------------

def build_laplacian(mesh):
    """Cotangent stiffness matrix ``S`` (PSD, zero row sums) and lumped mass diagonal."""
    p = mesh.vertices[mesh.faces]
    F = mesh.faces
    S_rows, S_cols, S_vals = [], [], []
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        u = p[:, j] - p[:, i]
        w = p[:, k] - p[:, i]
        # cotangent of the angle at vertex i weights the opposite edge (j, k)
        cot = np.sum(u * w, axis=1) / np.linalg.norm(np.cross(u, w), axis=1)
        S_rows += [F[:, j], F[:, k]]
        S_cols += [F[:, k], F[:, j]]
        S_vals += [-0.5 * cot, -0.5 * cot]
    n = mesh.n_vertices
    off = sp.coo_matrix(
        (np.concatenate(S_vals), (np.concatenate(S_rows), np.concatenate(S_cols))), shape=(n, n)
    ).tocsr()
    S = (off - sp.diags(np.asarray(off.sum(axis=1)).ravel())).tocsr()
    mass = np.bincount(F.ravel(), weights=np.repeat(mesh.areas / 3.0, 3), minlength=n)
    return S, mass


@dataclass
class SpectralBasis:
    """Truncated Laplace-Beltrami eigenpairs (zero mode excluded)."""

    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray  # (V, K), mass-orthonormal
    weight_kind: str = "diffusion"
    t_diff: float = None
    mesh: TriMesh = field(default=None, repr=False)

    def __post_init__(self):
        if self.weight_kind not in WEIGHT_KINDS:
            raise ValueError(f"weight_kind must be one of {WEIGHT_KINDS}")
        if self.t_diff is None:
            self.t_diff = 1.0 / float(self.eigenvalues[-1])
        self._face_grads = None

    @property
    def K(self):
        return len(self.eigenvalues)

    @property
    def weights(self):
        lam = self.eigenvalues
        if self.weight_kind == "diffusion":
            return np.exp(-2.0 * lam * self.t_diff)
        return lam**-2.0

    @property
    def face_grads(self):
        """Per-face constant gradients of the eigenfunctions, shape (F, K, 3)."""
        if self._face_grads is None:
            m = self.mesh
            vals = self.eigenfunctions[m.faces]  # (F, 3, K)
            self._face_grads = np.einsum("fjk,fjc->fkc", vals, m.bary_grads)
        return self._face_grads

    def evaluate(self, face, bary):
        """Eigenfunctions at mesh points by barycentric interpolation, shape (n, K)."""
        vals = self.eigenfunctions[self.mesh.faces[face]]  # (n, 3, K)
        return np.einsum("nj,njk->nk", bary, vals)


def compute_basis(mesh, K=200, weight_kind="diffusion", t_diff=None):
    """The ``K`` smallest nonzero generalized eigenpairs of (stiffness, mass)."""
    V = mesh.n_vertices
    if not 0 < K < V:
        raise ValueError(f"K must satisfy 0 < K < vertex count ({V})")
    S, mass = build_laplacian(mesh)
    if V <= _DENSE_LIMIT:
        lam, phi = scipy.linalg.eigh(S.toarray(), np.diag(mass), subset_by_index=[0, K])
    else:
        shift = -1e-6 * float(S.diagonal().mean() / mass.mean())
        lam, phi = spla.eigsh(S, k=K + 1, M=sp.diags(mass), sigma=shift, which="LM")
        order = np.argsort(lam)
        lam, phi = lam[order], phi[:, order]
        phi = phi / np.sqrt(np.einsum("vk,v,vk->k", phi, mass, phi))
    scale = max(abs(lam[-1]), 1.0)
    if lam[1] <= 1e-10 * scale:
        raise MeshQualityError("mesh is disconnected (repeated zero eigenvalue)")
    lam, phi = lam[1:], phi[:, 1:]
    Mphi = mass[:, None] * phi
    resid = np.linalg.norm(S @ phi - lam * Mphi, axis=0) / np.linalg.norm(Mphi, axis=0)
    if np.max(resid) > 1e-8:
        raise SolverError(f"eigensolver did not converge: residual norm {np.max(resid):.3e}")
    # deterministic sign: largest-magnitude entry positive
    pivot = phi[np.argmax(np.abs(phi), axis=0), np.arange(phi.shape[1])]
    phi = phi * np.sign(pivot)
    return SpectralBasis(lam, phi, weight_kind, t_diff, mesh)


def save_basis(basis, path):
    """Write ``mesh.spec``: header then little-endian float64 eigenvalues and eigenfunctions."""
    K, V = basis.K, basis.eigenfunctions.shape[0]
    kind = WEIGHT_KINDS.index(basis.weight_kind)
    with open(path, "wb") as fh:
        fh.write(_BASIS_MAGIC + struct.pack("<IIId", K, V, kind, basis.t_diff))
        fh.write(np.asarray(basis.eigenvalues, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(basis.eigenfunctions, dtype="<f8").tobytes())


def load_basis(path, mesh=None):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _BASIS_MAGIC:
        raise DataFormatError(f"{path}: not a spectral basis file")
    K, V, kind, t_diff = struct.unpack_from("<IIId", blob, 4)
    off = 4 + struct.calcsize("<IIId")
    lam = np.frombuffer(blob, "<f8", K, off).astype(float)
    phi = np.frombuffer(blob, "<f8", K * V, off + 8 * K).astype(float).reshape(V, K)
    if mesh is not None and mesh.n_vertices != V:
        raise DataFormatError(f"{path}: basis has {V} vertices, mesh has {mesh.n_vertices}")
    return SpectralBasis(lam, phi, WEIGHT_KINDS[kind], t_diff, mesh)


# -- points and spectral geometry ----------------------------------------------

@dataclass
class MeshPoint:
    """Batch of points on a mesh: face ids and barycentric coordinates."""

    face: np.ndarray
    bary: np.ndarray

    def position(self, mesh):
        return mesh.positions(self.face, self.bary)

    def pack(self):
        return np.column_stack([self.face.astype(float), self.bary])

    @classmethod
    def unpack(cls, arr):
        arr = np.atleast_2d(np.asarray(arr, dtype=float))
        return cls(arr[:, 0].astype(np.int64), arr[:, 1:4].copy())


def spectral_dist_sq(basis, x, y):
    phx = basis.evaluate(x.face, x.bary)
    phy = basis.evaluate(y.face, y.bary)
    return np.sum(basis.weights * (phx - phy) ** 2, axis=1)


def spectral_log_checked(basis, x, z, min_grad=1e-8):
    """Spectral bridge direction and a mask of rows with a usable gradient."""
    diff = basis.evaluate(x.face, x.bary) - basis.evaluate(z.face, z.bary)
    wdiff = basis.weights * diff
    d2 = np.sum(wdiff * diff, axis=1)
    g = 2.0 * np.einsum("nk,nkc->nc", wdiff, basis.face_grads[x.face])
    gsq = np.sum(g * g, axis=1)
    ok = np.sqrt(gsq) > min_grad
    # -1/2 grad(d^2) / |grad d|^2  with  |grad d|^2 = |grad d^2|^2 / (4 d^2)
    coef = np.where(ok, -2.0 * d2 / np.where(ok, gsq, 1.0), 0.0)
    return coef[:, None] * g, ok


def spectral_log(basis, x, z):
    v, ok = spectral_log_checked(basis, x, z)
    if not np.all(ok):
        bad = np.flatnonzero(~ok)
        raise DegenerateDirectionError(
            f"spectral distance gradient vanishes at rows {bad[:10].tolist()}"
        )
    return v


@dataclass
class StepResult:
    point: MeshPoint
    boundary_hit: np.ndarray
    length: np.ndarray


def mesh_step(mesh, x, v, max_crossings=10000):
    """Walk from ``x`` along in-plane vectors ``v``, unfolding across edges.

    Hitting a boundary edge stops the walk there; ``boundary_hit`` marks those
    rows.  ``length`` is the arc length actually travelled.
    """
    face = np.array(x.face, dtype=np.int64, copy=True)
    bary = np.array(x.bary, dtype=float, copy=True)
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise NumericInputError("non-finite step vector")
    n_hat = mesh.normals[face]
    v = v - np.sum(v * n_hat, axis=1, keepdims=True) * n_hat
    n = len(face)
    hit = np.zeros(n, dtype=bool)
    length = np.zeros(n)
    active = np.flatnonzero(np.linalg.norm(v, axis=1) > 0)
    rem = v
    for _ in range(max_crossings):
        if active.size == 0:
            break
        f = face[active]
        b = bary[active]
        w = rem[active]
        db = np.einsum("njc,nc->nj", mesh.bary_grads[f], w)
        b_new = b + db
        inside = np.all(b_new >= 0.0, axis=1)
        if np.any(inside):
            idx = active[inside]
            bn = b_new[inside]
            bary[idx] = bn / bn.sum(axis=1, keepdims=True)
            length[idx] += np.linalg.norm(w[inside], axis=1)
        out = ~inside
        active, f, b, w, db = active[out], f[out], b[out], w[out], db[out]
        if active.size == 0:
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            s_all = np.where(db < 0.0, np.maximum(b, 0.0) / -db, np.inf)
        i_star = np.argmin(s_all, axis=1)
        s = np.clip(s_all[np.arange(len(active)), i_star], 0.0, 1.0)
        b = b + s[:, None] * db
        b[np.arange(len(active)), i_star] = 0.0
        b = np.maximum(b, 0.0)
        b /= b.sum(axis=1, keepdims=True)
        length[active] += s * np.linalg.norm(w, axis=1)
        w = (1.0 - s)[:, None] * w

        g = mesh.nbr_face[f, i_star]
        blocked = g < 0
        if np.any(blocked):
            idx = active[blocked]
            bary[idx] = b[blocked]
            hit[idx] = True
        go = ~blocked
        active, f, b, w, g, i_star = active[go], f[go], b[go], w[go], g[go], i_star[go]
        if active.size == 0:
            break

        e_hat = mesh.edge_units[f, i_star]
        gb = mesh.bary_grads[f, i_star]
        out_f = -gb / np.linalg.norm(gb, axis=1, keepdims=True)
        j = mesh.nbr_opp[f, i_star]
        gg = mesh.bary_grads[g, j]
        in_g = gg / np.linalg.norm(gg, axis=1, keepdims=True)
        w = np.sum(w * e_hat, axis=1, keepdims=True) * e_hat + np.sum(w * out_f, axis=1, keepdims=True) * in_g

        loc = mesh.nbr_map[f, i_star]  # (m, 2) positions of edge vertices in g
        rows = np.arange(len(active))
        nb = np.zeros_like(b)
        nb[rows, loc[:, 0]] = b[rows, (i_star + 1) % 3]
        nb[rows, loc[:, 1]] = b[rows, (i_star + 2) % 3]
        face[active] = g
        bary[active] = nb
        rem = np.zeros_like(rem)
        rem[active] = w
    else:
        raise SolverError("mesh walk exceeded the crossing limit")
    return StepResult(MeshPoint(face, bary), hit, length)


def sample_faces(mesh, weights, rng, n):
    """Draw ``n`` points: faces with probability ∝ ``weights``, then uniform barycentrics."""
    p = np.asarray(weights, dtype=float)
    p = p / p.sum()
    face = rng.choice(len(p), size=n, p=p)
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    bary = np.column_stack([1.0 - s, s * (1.0 - r2), s * r2])
    return MeshPoint(face.astype(np.int64), bary)


def eigenfunction_density(mesh, k, basis=None):
    """Piecewise-constant density ∝ max(phi_k, 0), one value per face.

    Each face carries the mean of the thresholded eigenfunction over its
    corners, normalised so that ``sum(density * areas) == 1``.
    """
    if basis is None:
        basis = compute_basis(mesh, K=k)
    if not 1 <= k <= basis.K:
        raise ValueError(f"eigenfunction index {k} outside 1..{basis.K}")
    phi = np.maximum(basis.eigenfunctions[:, k - 1], 0.0)
    per_face = phi[mesh.faces].mean(axis=1)
    mass = float(np.sum(per_face * mesh.areas))
    if mass <= 0.0:
        raise MeshQualityError(f"eigenfunction {k} is nowhere positive")
    return per_face / mass


class MeshManifold(Manifold):
    """A triangle mesh seen through the manifold interface.

    Points are packed rows ``(face, b0, b1, b2)``; tangent vectors are 3D
    vectors in the face plane.  Distances used for kernels are chordal.
    """

    name = "mesh"
    dim = 2
    point_dim = 4
    tangent_dim = 3

    def __init__(self, mesh, basis=None, source=None, boundary_band=None):
        self.mesh = mesh
        self.basis = basis
        self.source = source
        self.last_boundary_hits = 0
        if boundary_band is None:
            boundary_band = 2.0 * mesh.mean_edge_length()
        self.boundary_band = float(boundary_band)
        self._vertex_damping = None

    def boundary_factor(self, x):
        """Continuous weight in [0, 1]: 0 on boundary edges, 1 beyond ``boundary_band``.

        Scaling a flow field by it makes the field vanish on the boundary, so
        the flow maps the closed surface onto itself.  Always 1 on closed meshes.
        """
        if self.mesh.is_closed:
            return np.ones(len(np.atleast_2d(x)))
        if self._vertex_damping is None:
            d = self.mesh.boundary_distance()
            self._vertex_damping = np.clip(d / self.boundary_band, 0.0, 1.0)
        p = MeshPoint.unpack(x)
        s = np.einsum("nj,nj->n", self._vertex_damping[self.mesh.faces[p.face]], p.bary)
        return np.clip(s, 0.0, 1.0)

    def positions(self, x):
        p = MeshPoint.unpack(x)
        return self.mesh.positions(p.face, p.bary)

    def features(self, x):
        return self.positions(x)

    @property
    def feature_dim(self):
        return 3

    def exp(self, x, v):
        res = mesh_step(self.mesh, MeshPoint.unpack(x), np.atleast_2d(v))
        self.last_boundary_hits = int(res.boundary_hit.sum())
        return res.point.pack()

    def log(self, x, y):
        raise NotImplementedError("closed-form log map unavailable on meshes; use the spectral direction")

    def spectral_direction(self, x, z):
        return spectral_log(self.basis, MeshPoint.unpack(x), MeshPoint.unpack(z))

    def spectral_direction_checked(self, x, z):
        return spectral_log_checked(self.basis, MeshPoint.unpack(x), MeshPoint.unpack(z))

    def dist(self, x, y):
        return np.linalg.norm(self.positions(x) - self.positions(y), axis=-1)

    def proj(self, x, w):
        nrm = self.mesh.normals[MeshPoint.unpack(x).face]
        return w - np.sum(w * nrm, axis=-1, keepdims=True) * nrm

    def proj_vjp(self, x, g):
        return self.proj(x, g)

    def tangent_basis(self, x):
        return self.mesh.face_frames[MeshPoint.unpack(x).face]

    def tangent_gaussian(self, x, rng, scale=1.0):
        x = np.atleast_2d(x)
        return scale * self.proj(x, rng.standard_normal((len(x), 3)))

    def sample_uniform(self, rng, n):
        return sample_faces(self.mesh, self.mesh.areas, rng, n).pack()

    def log_volume(self):
        return float(np.log(self.mesh.total_area))

    def retract(self, y):
        raise NotImplementedError("meshes have no ambient retraction")

    def check_point(self, x, tol=1e-12):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if not np.all(np.isfinite(x)):
            raise NumericInputError("non-finite mesh point")
        b = x[:, 1:4]
        if np.any(b < -tol) or np.any(np.abs(b.sum(axis=1) - 1.0) > tol):
            raise NumericInputError("invalid barycentric coordinates")
        return x

    def spec(self):
        return {"kind": "mesh", "dim": 2, "source": self.source, "n_faces": self.mesh.n_faces}

    def __repr__(self):
        return f"MeshManifold(faces={self.mesh.n_faces})"

    def __hash__(self):
        return id(self)

    def __eq__(self, other):
        return self is other
