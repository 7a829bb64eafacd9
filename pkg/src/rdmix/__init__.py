"""Diffusion mixtures of bridges on Riemannian manifolds and triangle meshes."""
from .manifold import Euclidean, FlatTorus, Hyperboloid, Sphere
from .bridges import BridgeSpec, NoiseSchedule
from .mesh import MeshManifold, TriMesh, compute_basis

__version__ = "0.1.0"
