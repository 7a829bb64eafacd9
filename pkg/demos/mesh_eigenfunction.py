"""
Learning on a triangle mesh
===========================

Target: the density proportional to the first Laplacian eigenfunction
(clipped at zero) on a flat square mesh.  The spectral bridge steers walkers
down the gradient of a diffusion distance built from the mesh eigenpairs.
"""
import math
import sys
from dataclasses import replace

import numpy as np

from rdmix import NoiseSchedule
from rdmix.data import gen_mesh_target, mesh_target_entropy, split
from rdmix.mesh import MeshManifold, MeshPoint, compute_basis, grid_mesh, spectral_log, subdivide
from rdmix.train import TrainConfig, fit

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 1000

mesh = grid_mesh(32)
print(mesh.n_vertices, "vertices", len(mesh.faces), "faces, area", round(float(mesh.areas.sum()), 6))

basis = compute_basis(mesh, K=100)
print("first eigenvalues", np.round(basis.eigenvalues[:4], 2))
# a wider diffusion kernel than the default 1/lambda_K keeps directions smooth across the square
basis = replace(basis, t_diff=1.0 / basis.eigenvalues[9])

rng = np.random.default_rng(0)
ds = gen_mesh_target(mesh, 1, 5000, rng)
ent = mesh_target_entropy(subdivide(mesh)[0], ds.meta["fine_density"])
print(f"target entropy {ent:.3f}  uniform {math.log(mesh.areas.sum()):.3f}")

# the bridge direction from a few points toward the first data point
M = MeshManifold(mesh, basis)
x = M.sample_uniform(rng, 4)
z = np.repeat(ds.points[:1], 4, axis=0)
v = spectral_log(basis, MeshPoint.unpack(x), MeshPoint.unpack(z))
line = M.positions(z) - M.positions(x)
cos = np.sum(v * line, 1) / np.linalg.norm(v, axis=1) / np.linalg.norm(line, axis=1)
print("cosine between bridge direction and straight line:", np.round(cos, 3))

train, valid, test = split(ds, 0)
cfg = TrainConfig(batch_size=256, iterations=iterations, width=128, layers=3,
                  val_interval=max(iterations // 5, 1), val_steps=200, val_points=100, seed=0)
res = fit(cfg, train.points, M, NoiseSchedule.constant(0.5), valid_points=valid.points)
nll = res.model.nll(test.points[:200], 1000)
print(f"test NLL {nll.mean():.3f}")
