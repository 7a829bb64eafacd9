"""
A diffusion mixture on the sphere
=================================

Train forward and backward drift networks on a von Mises-Fisher target, then
compare SDE and ODE samples and score test points with the probability flow.
"""
import math
import sys

import numpy as np

from rdmix import NoiseSchedule, Sphere
from rdmix.data import sample_vmf, vmf_entropy
from rdmix.evaluate import mmd
from rdmix.train import TrainConfig, fit

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 1000

S2 = Sphere(2)
rng = np.random.default_rng(0)
pts = sample_vmf([0.0, 0.0, 1.0], 10.0, 6000, rng)
train, valid, test = pts[:5000], pts[5000:5500], pts[5500:]

cfg = TrainConfig(batch_size=256, iterations=iterations, width=64, layers=3,
                  val_interval=max(iterations // 10, 1), val_steps=30, seed=0)


def show(rec):
    if rec["val_nll"] is not None:
        print(f"iter {rec['iter']:5d}  loss {rec['loss']:.3f}  val NLL {rec['val_nll']:.3f}")


res = fit(cfg, train, S2, NoiseSchedule.constant(1.0), valid_points=valid, on_metrics=show)
model = res.model
print("best iteration", res.best_iter)

# samples from the stochastic and the deterministic generator should agree
sde = model.sample(2000, np.random.default_rng(1), "sde", 100)
ode = model.sample(2000, np.random.default_rng(2), "ode", 100)
print(f"MMD^2 sde vs ode   {mmd(sde, ode, S2):.5f}")
print(f"MMD^2 sde vs data  {mmd(sde, pts[:2000], S2):.5f}")
print("mean cos to the pole:", sde[:, 2].mean().round(3), "data:", pts[:, 2].mean().round(3))

nll = model.nll(test, 100)
print(f"test NLL {nll.mean():.3f}   entropy floor {vmf_entropy(10.0):.3f}   uniform {math.log(4 * math.pi):.3f}")
