"""Datasets, synthetic targets and prior distributions.

Points are stored in the coordinates used throughout the package: unit
vectors for spheres, angles in [0, 2pi) for tori, Lorentz coordinates for
the hyperboloid and packed ``(face, b0, b1, b2)`` rows for meshes.
"""
import csv
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import integrate
from scipy.special import logsumexp

from .errors import ConfigError, DataFormatError, RangeError, UnsupportedPriorError
from .manifold import TWO_PI, Euclidean, FlatTorus, Hyperboloid, Sphere, from_spec
from .mesh import MeshManifold, MeshPoint, compute_basis, eigenfunction_density, load_mesh, sample_faces, save_off, subdivide

SPLIT = (0.8, 0.1, 0.1)
N_WRAPS = 5


@dataclass
class Dataset:
    manifold: object
    points: np.ndarray
    name: str = "dataset"
    split_seed: int = None
    source: str = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.points)

    def subset(self, idx, suffix):
        return replace(self, points=self.points[idx], name=f"{self.name}/{suffix}", meta=dict(self.meta))

    def manifest(self):
        return {"name": self.name, "manifold": self.manifold.spec(), "n": len(self), "source": self.source}


# -- ingestion -------------------------------------------------------------------

def latlon_to_xyz(lat, lon):
    phi, lam = np.radians(lat), np.radians(lon)
    return np.stack([np.cos(phi) * np.cos(lam), np.cos(phi) * np.sin(lam), np.sin(phi)], axis=-1)


def xyz_to_latlon(x):
    x = np.asarray(x, dtype=float)
    lat = np.degrees(np.arcsin(np.clip(x[..., 2], -1.0, 1.0)))
    lon = np.degrees(np.arctan2(x[..., 1], x[..., 0]))
    return lat, lon


def _read_rows(path):
    if not os.path.exists(path):
        raise DataFormatError(f"{path}: file not found")
    with open(path, newline="") as fh:
        return [(i, row) for i, row in enumerate(csv.reader(fh), 1) if row and not row[0].startswith("#")]


def load_sphere_csv(path):
    rows = _read_rows(path)
    if not rows or [c.strip().lower() for c in rows[0][1]] != ["lat", "lon"]:
        raise DataFormatError(f"{path}: expected header 'lat,lon'")
    vals, bad = [], []
    for lineno, row in rows[1:]:
        try:
            lat, lon = (float(c) for c in row)
        except ValueError:
            bad.append(lineno)
            continue
        if not (math.isfinite(lat) and math.isfinite(lon)) or abs(lat) > 90.0:
            bad.append(lineno)
            continue
        vals.append((lat, lon))
    if bad:
        raise DataFormatError(f"{path}: malformed rows at lines {bad[:20]}")
    arr = np.array(vals, dtype=float).reshape(-1, 2)
    pts = latlon_to_xyz(arr[:, 0], arr[:, 1])
    return Dataset(Sphere(2), pts, name=os.path.splitext(os.path.basename(path))[0], source=path)


def load_torus_csv(path, n):
    """Angles in degrees, (-180, 180], mapped to radians in [0, 2pi)."""
    rows = _read_rows(path)
    vals = []
    for k, (lineno, row) in enumerate(rows):
        if len(row) != n:
            raise DataFormatError(f"{path}:{lineno}: expected {n} columns, found {len(row)}")
        try:
            vals.append([float(c) for c in row])
        except ValueError:
            if k == 0:
                continue  # header
            raise DataFormatError(f"{path}:{lineno}: non-numeric value") from None
        if any(not math.isfinite(v) or abs(v) > 180.0 for v in vals[-1]):
            raise DataFormatError(f"{path}:{lineno}: angle outside [-180, 180]")
    deg = np.array(vals, dtype=float).reshape(-1, n)
    pts = FlatTorus.wrap(np.radians(deg))
    return Dataset(FlatTorus(n), pts, name=os.path.splitext(os.path.basename(path))[0], source=path)


# -- wrapped Gaussians on tori -----------------------------------------------------

@dataclass
class WrappedGaussianSpec:
    mean: np.ndarray
    scale: float = 0.2

    def __post_init__(self):
        self.mean = FlatTorus.wrap(np.atleast_1d(np.asarray(self.mean, dtype=float)))
        if not self.scale > 0:
            raise ConfigError("wrapped Gaussian scale must be positive")

    @property
    def dim(self):
        return len(self.mean)

    @classmethod
    def random(cls, n, rng, scale=0.2):
        return cls(rng.uniform(0.0, TWO_PI, n), scale)


def gen_wrapped_gaussian(spec, n_samples, rng):
    z = spec.mean + spec.scale * rng.standard_normal((n_samples, spec.dim))
    pts = FlatTorus.wrap(z)
    return Dataset(FlatTorus(spec.dim), pts, name=f"wrapped_gaussian_T{spec.dim}",
                   meta={"mean": spec.mean.tolist(), "scale": spec.scale})


def _wraps_for(scale):
    # at least N_WRAPS terms each side, and enough to cover 10 standard deviations
    return max(N_WRAPS, math.ceil(10.0 * scale / TWO_PI))


def wrapped_normal_logpdf(theta, mean, scale, n_wraps=None):
    """Log density of the wrapped normal, summed over coordinates (last axis)."""
    n_wraps = _wraps_for(scale) if n_wraps is None else n_wraps
    d = FlatTorus.wrap_centered(np.asarray(theta, dtype=float) - mean)
    k = np.arange(-n_wraps, n_wraps + 1) * TWO_PI
    z = (d[..., None] + k) / scale
    per = logsumexp(-0.5 * z**2, axis=-1) - math.log(scale * math.sqrt(TWO_PI))
    return per.sum(axis=-1)


def wrapped_normal_entropy(scale, n_wraps=None):
    """Differential entropy (nats) of a one-dimensional wrapped normal."""

    def f(a):
        lp = wrapped_normal_logpdf(np.array([[a]]), 0.0, scale, n_wraps)[0]
        return -math.exp(lp) * lp

    pts = np.linspace(-np.pi, np.pi, 9)
    return integrate.quad(f, -np.pi, np.pi, points=pts[1:-1], limit=200, epsabs=1e-12)[0]


def wrapped_normal_circular_variance(scale):
    return 1.0 - math.exp(-0.5 * scale**2)


def circular_variance(theta):
    """Per-coordinate ``1 - |mean(exp(i theta))|``."""
    return 1.0 - np.abs(np.mean(np.exp(1j * np.asarray(theta)), axis=0))


# -- von Mises-Fisher on S^2 ---------------------------------------------------------

def _rotation_to(mu):
    """Orthogonal matrix whose last column is ``mu``."""
    mu = np.asarray(mu, dtype=float)
    mu = mu / np.linalg.norm(mu)
    Q, _ = np.linalg.qr(np.column_stack([mu, np.eye(3)]))
    Q = Q[:, :3]
    Q = Q * np.sign(Q[:, 0] @ mu)
    return np.column_stack([Q[:, 1], Q[:, 2], Q[:, 0]])


def sample_vmf(mu, kappa, n, rng):
    """von Mises-Fisher samples on S^2 (exact inversion for the cosine)."""
    u = rng.random(n)
    w = 1.0 + np.log(u + (1.0 - u) * np.exp(-2.0 * kappa)) / kappa
    phi = rng.uniform(0.0, TWO_PI, n)
    r = np.sqrt(np.clip(1.0 - w**2, 0.0, None))
    local = np.column_stack([r * np.cos(phi), r * np.sin(phi), w])
    return local @ _rotation_to(mu).T


def _log_vmf_norm(kappa):
    # log(kappa / (4 pi sinh kappa)) computed without overflow
    return math.log(kappa) - math.log(TWO_PI) - kappa - math.log1p(-math.exp(-2.0 * kappa))


def vmf_logpdf(x, mu, kappa):
    mu = np.asarray(mu, dtype=float) / np.linalg.norm(mu)
    return _log_vmf_norm(kappa) + kappa * (np.asarray(x) @ mu)


def vmf_entropy(kappa):
    """Differential entropy of a vMF distribution on S^2 (nats)."""
    return -_log_vmf_norm(kappa) - kappa * (1.0 / math.tanh(kappa) - 1.0 / kappa)


def gen_vmf(mu, kappa, n_samples, rng):
    pts = sample_vmf(mu, kappa, n_samples, rng)
    return Dataset(Sphere(2), pts, name=f"vmf_k{kappa:g}", meta={"mu": list(map(float, mu)), "kappa": kappa})


def gen_vmf_mixture(mus, kappas, weights, n_samples, rng):
    w = np.asarray(weights, dtype=float)
    comp = rng.choice(len(w), size=n_samples, p=w / w.sum())
    pts = np.empty((n_samples, 3))
    for j in range(len(w)):
        idx = np.flatnonzero(comp == j)
        pts[idx] = sample_vmf(mus[j], kappas[j], len(idx), rng)
    return Dataset(Sphere(2), pts, name="vmf_mixture")


# -- mesh targets --------------------------------------------------------------------

def gen_mesh_target(mesh, k, n_samples, rng, fine_basis=None):
    """Samples from the k-th eigenfunction density of the once-subdivided mesh.

    The density lives on the refined mesh; samples are mapped back to faces
    and barycentrics of ``mesh`` (the refinement is surface preserving).
    """
    fine, parent, corners = subdivide(mesh)
    if fine_basis is None:
        fine_basis = compute_basis(fine, K=k)
    dens = eigenfunction_density(fine, k, fine_basis)
    pts = sample_faces(fine, dens * fine.areas, rng, n_samples)
    bary = np.einsum("nj,njc->nc", pts.bary, corners[pts.face])
    coarse = MeshPoint(parent[pts.face], bary)
    ds = Dataset(MeshManifold(mesh), coarse.pack(), name=f"mesh_eig{k}", meta={"k": k})
    ds.meta["fine_density"] = dens
    ds.meta["fine_face"] = pts.face
    ds.meta["fine_bary"] = pts.bary
    return ds


def mesh_target_entropy(fine_mesh, density):
    """Entropy of a piecewise-constant face density on ``fine_mesh``."""
    p = density[density > 0]
    a = fine_mesh.areas[density > 0]
    return float(-np.sum(a * p * np.log(p)))


# -- splits ------------------------------------------------------------------------

def split(dataset, seed, proportions=SPLIT):
    n = len(dataset)
    if n < 10:
        raise RangeError(f"need at least 10 points to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_valid = max(1, int(round(proportions[1] * n)))
    n_test = max(1, int(round(proportions[2] * n)))
    n_train = n - n_valid - n_test
    parts = (perm[:n_train], perm[n_train:n_train + n_valid], perm[n_train + n_valid:])
    out = tuple(dataset.subset(p, s) for p, s in zip(parts, ("train", "valid", "test")))
    for d in out:
        d.split_seed = seed
    return out


# -- priors ------------------------------------------------------------------------

class UniformPrior:
    def __init__(self, manifold):
        self.manifold = manifold
        self._logp = -manifold.log_volume()

    def sample(self, rng, n):
        return self.manifold.sample_uniform(rng, n)

    def logp(self, x):
        return np.full(len(np.atleast_2d(x)), self._logp)

    def spec(self):
        return {"kind": "uniform"}


class GaussianPrior:
    """Isotropic Gaussian on Euclidean space."""

    def __init__(self, manifold, scale=1.0, mean=None):
        self.manifold = manifold
        self.scale = float(scale)
        self.mean = np.zeros(manifold.dim) if mean is None else np.asarray(mean, dtype=float)

    def sample(self, rng, n):
        return self.mean + self.scale * rng.standard_normal((n, self.manifold.dim))

    def logp(self, x):
        z = (np.atleast_2d(x) - self.mean) / self.scale
        d = self.manifold.dim
        return -0.5 * np.sum(z**2, axis=-1) - d * math.log(self.scale) - 0.5 * d * math.log(TWO_PI)

    def spec(self):
        return {"kind": "gaussian", "scale": self.scale, "mean": self.mean.tolist()}


class WrappedNormalPrior:
    """Tangent Gaussian at the hyperboloid origin pushed through the exponential map."""

    def __init__(self, manifold, scale=1.0):
        self.manifold = manifold
        self.scale = float(scale)
        self.origin = manifold.origin

    def sample(self, rng, n):
        o = np.tile(self.origin, (n, 1))
        return self.manifold.exp(o, self.manifold.tangent_gaussian(o, rng, self.scale))

    def logp(self, x):
        x = np.atleast_2d(x)
        o = np.broadcast_to(self.origin, x.shape)
        r = self.manifold.dist(o, x)
        d = self.manifold.dim
        gauss = -0.5 * (r / self.scale) ** 2 - d * math.log(self.scale) - 0.5 * d * math.log(TWO_PI)
        safe = np.where(r < 1e-8, 1.0, r)
        jac = np.where(r < 1e-8, 0.0, np.log(np.sinh(safe) / safe))
        return gauss - (d - 1) * jac

    def spec(self):
        return {"kind": "wrapped_normal", "scale": self.scale}


def default_prior(manifold):
    if isinstance(manifold, Euclidean):
        return GaussianPrior(manifold)
    if isinstance(manifold, Hyperboloid):
        return WrappedNormalPrior(manifold)
    if isinstance(manifold, (Sphere, FlatTorus, MeshManifold)):
        return UniformPrior(manifold)
    raise UnsupportedPriorError(f"no default prior for {manifold!r}")


def prior_from_spec(manifold, spec):
    kind = (spec or {}).get("kind", "default")
    if kind == "default":
        return default_prior(manifold)
    if kind == "uniform":
        return UniformPrior(manifold)
    if kind == "gaussian":
        return GaussianPrior(manifold, spec.get("scale", 1.0), spec.get("mean"))
    if kind == "wrapped_normal":
        return WrappedNormalPrior(manifold, spec.get("scale", 1.0))
    raise ConfigError(f"unknown prior kind {kind!r}")


# -- point files ---------------------------------------------------------------------

def point_columns(manifold):
    if isinstance(manifold, MeshManifold):
        return ["face", "b0", "b1", "b2"]
    if isinstance(manifold, FlatTorus):
        return [f"theta{i}" for i in range(manifold.dim)]
    return [f"x{i}" for i in range(manifold.point_dim)]


def save_points_csv(path, manifold, points, comments=()):
    points = np.asarray(points, dtype=float).reshape(-1, manifold.point_dim)
    with open(path, "w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(point_columns(manifold))
        mesh = isinstance(manifold, MeshManifold)
        for row in points:
            if mesh:
                w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])
            else:
                w.writerow([repr(float(v)) for v in row])


def load_points_csv(path, manifold):
    rows = _read_rows(path)
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    header = [c.strip() for c in rows[0][1]]
    if header != point_columns(manifold):
        raise DataFormatError(f"{path}: header {header} does not match {point_columns(manifold)}")
    try:
        pts = np.array([[float(c) for c in row] for _, row in rows[1:]], dtype=float)
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from None
    pts = pts.reshape(-1, manifold.point_dim)
    manifold.check_point(pts)
    return pts


def save_dataset(dataset, directory):
    """Write ``points.csv`` and ``manifest.json`` (plus ``mesh.off`` for meshes)."""
    os.makedirs(directory, exist_ok=True)
    save_points_csv(os.path.join(directory, "points.csv"), dataset.manifold, dataset.points)
    man = dataset.manifest()
    if isinstance(dataset.manifold, MeshManifold):
        save_off(dataset.manifold.mesh, os.path.join(directory, "mesh.off"))
        man["manifold"]["mesh"] = "mesh.off"
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(path):
    """Load a dataset directory (or its manifest path) written by :func:`save_dataset`."""
    directory = path if os.path.isdir(path) else os.path.dirname(path)
    mpath = os.path.join(directory, "manifest.json")
    if not os.path.exists(mpath):
        raise DataFormatError(f"{mpath}: manifest not found")
    with open(mpath) as fh:
        man = json.load(fh)
    spec = man["manifold"]
    if spec["kind"] == "mesh":
        mesh = load_mesh(os.path.join(directory, spec.get("mesh", "mesh.off")), normalize=False)
        manifold = MeshManifold(mesh, source=spec.get("source"))
    else:
        manifold = from_spec(spec)
    pts = load_points_csv(os.path.join(directory, "points.csv"), manifold)
    if len(pts) != man["n"]:
        raise DataFormatError(f"{directory}: manifest lists {man['n']} points, file has {len(pts)}")
    return Dataset(manifold, pts, name=man["name"], source=man.get("source"))
