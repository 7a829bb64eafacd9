"""Closed-form manifolds: Euclidean space, spheres, flat tori and the hyperboloid.

Points and tangent vectors are plain float arrays whose last axis holds the
coordinates; any leading axes are batch axes.  Every operation broadcasts over
them, so a single point is just an array of shape ``(D,)``.

>>> S2 = Sphere(2)
>>> x = np.array([0.0, 0.0, 1.0])
>>> S2.exp(x, np.array([np.pi / 2, 0.0, 0.0])).round(12)
array([1., 0., 0.])
"""
import math

import numpy as np
from scipy.special import gammaln

from .errors import CutLocusError, NumericInputError, UnsupportedPriorError

TWO_PI = 2.0 * np.pi

# Below this norm, sin(n)/n and friends switch to their Taylor expansions.
_SMALL = 1e-8


def _dot(u, v):
    return np.sum(u * v, axis=-1, keepdims=True)


def _require_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericInputError("non-finite value in manifold input")


class Manifold:
    """Interface shared by every geometry in the package.

    ``point_dim`` is the length of a point's coordinate vector, ``tangent_dim``
    that of a tangent vector and ``dim`` the intrinsic dimension.
    """

    name = "manifold"
    compact = True
    dim: int
    point_dim: int
    tangent_dim: int

    # -- geometry -----------------------------------------------------------
    def exp(self, x, v):
        raise NotImplementedError

    def log(self, x, y):
        raise NotImplementedError

    def log_checked(self, x, y):
        """Log map plus a boolean mask of rows that were well defined.

        Rows outside the domain get a zero vector instead of raising.
        """
        v = self.log(x, y)
        return v, np.ones(v.shape[:-1], dtype=bool)

    def dist(self, x, y):
        return self.norm(x, self.log(x, y))

    def proj(self, x, w):
        return np.asarray(w, dtype=float)

    def retract(self, y):
        """Nearest point on the manifold to an ambient point ``y``."""
        return np.asarray(y, dtype=float)

    def inner(self, x, u, v):
        return np.sum(u * v, axis=-1)

    def norm(self, x, v):
        return np.sqrt(np.maximum(self.inner(x, v, v), 0.0))

    def sqnorm_grad(self, x, v):
        """Ambient gradient of ``inner(x, v, v)`` with respect to ``v``."""
        return 2.0 * v

    def proj_vjp(self, x, g):
        """Adjoint of ``w -> proj(x, w)`` applied to ``g``."""
        return g

    def tangent_basis(self, x):
        """Orthonormal basis of the tangent space, shape ``batch + (dim, tangent_dim)``."""
        raise NotImplementedError

    # -- sampling -----------------------------------------------------------
    def sample_uniform(self, rng, n):
        raise UnsupportedPriorError(f"{self.name} has no uniform distribution")

    def log_volume(self):
        raise UnsupportedPriorError(f"{self.name} has infinite volume")

    def tangent_gaussian(self, x, rng, scale=1.0):
        """Isotropic Gaussian in the tangent space at ``x`` with standard deviation ``scale``."""
        x = np.asarray(x, dtype=float)
        basis = self.tangent_basis(x)
        z = rng.standard_normal(x.shape[:-1] + (self.dim,))
        return scale * np.einsum("...i,...ij->...j", z, basis)

    # -- misc ---------------------------------------------------------------
    def features(self, x):
        """Network input features for points ``x``."""
        return np.asarray(x, dtype=float)

    @property
    def feature_dim(self):
        return self.point_dim

    def check_point(self, x, tol=1e-9):
        x = np.asarray(x, dtype=float)
        _require_finite(x)
        return x

    def check_tangent(self, x, v, tol=1e-9):
        _require_finite(v)
        return np.asarray(v, dtype=float)

    def spec(self):
        """JSON-serialisable description, inverse of :func:`from_spec`."""
        return {"kind": self.name, "dim": self.dim}

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.dim})"

    def __eq__(self, other):
        return type(self) is type(other) and self.spec() == other.spec()

    def __hash__(self):
        return hash((type(self).__name__, self.dim))


class Euclidean(Manifold):
    name = "euclidean"
    compact = False

    def __init__(self, dim):
        if dim < 1:
            raise ValueError("dimension must be >= 1")
        self.dim = self.point_dim = self.tangent_dim = int(dim)

    def exp(self, x, v):
        _require_finite(x, v)
        return np.asarray(x, dtype=float) + v

    def log(self, x, y):
        _require_finite(x, y)
        return np.asarray(y, dtype=float) - x

    def dist(self, x, y):
        return np.linalg.norm(np.asarray(y, dtype=float) - x, axis=-1)

    def tangent_basis(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(self.dim), x.shape[:-1] + (self.dim, self.dim))

    def tangent_gaussian(self, x, rng, scale=1.0):
        x = np.asarray(x, dtype=float)
        return scale * rng.standard_normal(x.shape)


class Sphere(Manifold):
    """Unit sphere S^d embedded in R^(d+1)."""

    name = "sphere"
    # Log map is refused when <x, y> falls below this.
    antipodal_tol = 1e-10

    def __init__(self, dim=2):
        if dim < 1:
            raise ValueError("dimension must be >= 1")
        self.dim = int(dim)
        self.point_dim = self.tangent_dim = self.dim + 1

    def retract(self, y):
        y = np.asarray(y, dtype=float)
        return y / np.linalg.norm(y, axis=-1, keepdims=True)

    def proj(self, x, w):
        return w - _dot(w, x) * x

    def proj_vjp(self, x, g):
        return g - _dot(g, x) * x

    def exp(self, x, v):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        _require_finite(x, v)
        n = np.linalg.norm(v, axis=-1, keepdims=True)
        small = n < _SMALL
        safe = np.where(small, 1.0, n)
        sinc = np.where(small, 1.0 - n**2 / 6.0, np.sin(safe) / safe)
        return self.retract(np.cos(n) * x + sinc * v)

    def _log_parts(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        _require_finite(x, y)
        c = _dot(x, y)
        u = y - c * x
        s = np.linalg.norm(u, axis=-1, keepdims=True)
        theta = np.arctan2(s, c)
        small = s < _SMALL
        scale = np.where(small, 1.0, theta / np.where(small, 1.0, s))
        return scale * u, c[..., 0]

    def log(self, x, y):
        v, c = self._log_parts(x, y)
        bad = c < -1.0 + self.antipodal_tol
        if np.any(bad):
            idx = np.argwhere(np.atleast_1d(bad))[0]
            raise CutLocusError(
                f"log map undefined: points at batch index {tuple(idx)} are antipodal "
                f"(<x, y> = {np.atleast_1d(c)[tuple(idx)]:.17g})"
            )
        return v

    def log_checked(self, x, y):
        v, c = self._log_parts(x, y)
        ok = c >= -1.0 + self.antipodal_tol
        return np.where(ok[..., None], v, 0.0), ok

    def dist(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        # half-chord form: exact zero for equal points, well conditioned near antipodes
        return 2.0 * np.arctan2(np.linalg.norm(y - x, axis=-1), np.linalg.norm(y + x, axis=-1))

    def tangent_basis(self, x):
        x = np.asarray(x, dtype=float)
        P = np.eye(self.point_dim) - x[..., :, None] * x[..., None, :]
        # eigenvalues of P are 0 (normal) followed by d ones (tangent)
        _, vecs = np.linalg.eigh(P)
        return np.swapaxes(vecs[..., :, 1:], -1, -2)

    def tangent_gaussian(self, x, rng, scale=1.0):
        x = np.asarray(x, dtype=float)
        return scale * self.proj(x, rng.standard_normal(x.shape))

    def sample_uniform(self, rng, n):
        z = rng.standard_normal((n, self.point_dim))
        return self.retract(z) if n else z

    def log_volume(self):
        k = 0.5 * (self.dim + 1)
        return math.log(2.0) + k * math.log(math.pi) - gammaln(k)

    def check_point(self, x, tol=1e-9):
        x = super().check_point(x)
        if np.any(np.abs(np.linalg.norm(x, axis=-1) - 1.0) > tol):
            raise NumericInputError("sphere point not of unit norm")
        return x

    def check_tangent(self, x, v, tol=1e-9):
        v = super().check_tangent(x, v)
        if np.any(np.abs(np.sum(x * v, axis=-1)) > tol):
            raise NumericInputError("vector not tangent to the sphere")
        return v


class FlatTorus(Manifold):
    """Flat torus [0, 2pi)^n in angle coordinates with wrapped arithmetic."""

    name = "torus"

    def __init__(self, dim=2):
        if dim < 1:
            raise ValueError("dimension must be >= 1")
        self.dim = self.point_dim = self.tangent_dim = int(dim)

    @staticmethod
    def wrap(a):
        """Map angles into [0, 2pi)."""
        r = np.mod(a, TWO_PI)
        return np.where(r >= TWO_PI, 0.0, r)

    @staticmethod
    def wrap_centered(a):
        """Map angle differences into (-pi, pi]."""
        return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), TWO_PI)

    def retract(self, y):
        return self.wrap(y)

    def exp(self, x, v):
        _require_finite(x, v)
        return self.wrap(np.asarray(x, dtype=float) + v)

    def log(self, x, y):
        _require_finite(x, y)
        return self.wrap_centered(np.asarray(y, dtype=float) - x)

    def tangent_basis(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(self.dim), x.shape[:-1] + (self.dim, self.dim))

    def tangent_gaussian(self, x, rng, scale=1.0):
        x = np.asarray(x, dtype=float)
        return scale * rng.standard_normal(x.shape)

    def sample_uniform(self, rng, n):
        return rng.uniform(0.0, TWO_PI, size=(n, self.dim))

    def log_volume(self):
        return self.dim * math.log(TWO_PI)

    def features(self, x):
        x = np.asarray(x, dtype=float)
        return np.concatenate([np.cos(x), np.sin(x)], axis=-1)

    @property
    def feature_dim(self):
        return 2 * self.dim

    def check_point(self, x, tol=1e-9):
        x = super().check_point(x)
        if np.any((x < 0.0) | (x >= TWO_PI)):
            raise NumericInputError("torus angle outside [0, 2pi)")
        return x


def lorentz_inner(u, v):
    return -u[..., 0] * v[..., 0] + np.sum(u[..., 1:] * v[..., 1:], axis=-1)


class Hyperboloid(Manifold):
    """Upper sheet of the two-sheeted hyperboloid (Lorentz model) of H^2."""

    name = "hyperboloid"
    compact = False

    def __init__(self, dim=2):
        if dim != 2:
            raise ValueError("only the 2-dimensional hyperboloid is supported")
        self.dim = 2
        self.point_dim = self.tangent_dim = 3
        self._metric = np.array([-1.0, 1.0, 1.0])

    @property
    def origin(self):
        return np.array([1.0, 0.0, 0.0])

    def inner(self, x, u, v):
        return lorentz_inner(u, v)

    def retract(self, y):
        y = np.array(y, dtype=float)
        y[..., 0] = np.sqrt(1.0 + np.sum(y[..., 1:] ** 2, axis=-1))
        return y

    def proj(self, x, w):
        return w + lorentz_inner(x, w)[..., None] * x

    def proj_vjp(self, x, g):
        # d proj / dw = I + x (G x)^T, so the adjoint adds G x <x, g>.
        return g + self._metric * x * _dot(x, g)

    def sqnorm_grad(self, x, v):
        return 2.0 * self._metric * v

    def exp(self, x, v):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        _require_finite(x, v)
        n = np.sqrt(np.maximum(lorentz_inner(v, v), 0.0))[..., None]
        small = n < _SMALL
        safe = np.where(small, 1.0, n)
        sinhc = np.where(small, 1.0 + n**2 / 6.0, np.sinh(safe) / safe)
        return self.retract(np.cosh(n) * x + sinhc * v)

    def log(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        _require_finite(x, y)
        a = -lorentz_inner(x, y)[..., None]
        u = y - a * x
        s = np.sqrt(np.maximum(lorentz_inner(u, u), 0.0))[..., None]
        small = s < _SMALL
        scale = np.where(small, 1.0, np.arcsinh(s) / np.where(small, 1.0, s))
        return scale * u

    def dist(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        # <y - x, y - x>_L = 4 sinh(d / 2)^2 on the sheet
        u = y - x
        return 2.0 * np.arcsinh(0.5 * np.sqrt(np.maximum(lorentz_inner(u, u), 0.0)))

    def tangent_basis(self, x):
        # boost the origin's basis (0, e_i) onto x; stable far from the origin
        x = np.asarray(x, dtype=float)
        xs = x[..., 1:]
        c = 1.0 / (1.0 + x[..., :1])
        out = []
        for i in range(2):
            a = xs[..., i: i + 1]
            space = c * a * xs
            space[..., i] += 1.0
            out.append(np.concatenate([a, space], axis=-1))
        return np.stack(out, axis=-2)

    def check_point(self, x, tol=1e-9):
        x = super().check_point(x)
        if np.any(np.abs(lorentz_inner(x, x) + 1.0) > tol) or np.any(x[..., 0] < 1.0 - tol):
            raise NumericInputError("point not on the upper hyperboloid sheet")
        return x

    def check_tangent(self, x, v, tol=1e-9):
        v = super().check_tangent(x, v)
        if np.any(np.abs(lorentz_inner(x, v)) > tol):
            raise NumericInputError("vector not Lorentz-orthogonal to the base point")
        return v

    def to_poincare(self, x):
        """Poincare-disk coordinates, used for plotting exports only."""
        x = np.asarray(x, dtype=float)
        return x[..., 1:] / (1.0 + x[..., :1])


def from_spec(spec, mesh_manifold=None):
    """Rebuild a manifold from :meth:`Manifold.spec` output."""
    kind = spec["kind"]
    if kind == "euclidean":
        return Euclidean(spec["dim"])
    if kind == "sphere":
        return Sphere(spec["dim"])
    if kind == "torus":
        return FlatTorus(spec["dim"])
    if kind == "hyperboloid":
        return Hyperboloid(spec.get("dim", 2))
    if kind == "mesh":
        if mesh_manifold is None:
            raise ValueError("mesh manifolds are rebuilt through rdmix.mesh.MeshManifold")
        return mesh_manifold
    raise ValueError(f"unknown manifold kind {kind!r}")
