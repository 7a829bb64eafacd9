"""
Bridges on the sphere
=====================

Logarithm bridges pinned at the north pole, simulated with the geodesic
random walk.  We look at how close the walkers end up to their endpoint as the
step count grows, then build two-way trajectories that are pinned at both
ends by construction.
"""
import numpy as np

from rdmix import NoiseSchedule, Sphere
from rdmix.sim import TwoWayConfig, bridge_walk, simulate_two_way

rng = np.random.default_rng(0)
S2 = Sphere(2)
sched = NoiseSchedule.constant(1.0)

# 1000 walkers from uniform starting points, all heading for the pole
north = np.tile([0.0, 0.0, 1.0], (1000, 1))
start = S2.sample_uniform(rng, 1000)

for n_steps in (50, 100, 250, 500, 1000):
    end = bridge_walk(S2, "logarithm", start, north, sched, 1.0, n_steps, rng)
    gap = S2.dist(end, north)
    # the last step lands on the pole up to its own noise, so the gap shrinks like sqrt(h)
    print(f"{n_steps:5d} steps  mean gap {gap.mean():.4f}  predicted {np.sqrt(np.pi / (2 * n_steps)):.4f}")

# two-way trajectories: forward leg from y, backward leg from x, meeting at T/2
x = S2.sample_uniform(rng, 5)
y = S2.sample_uniform(rng, 5)
traj = simulate_two_way(S2, "logarithm", x, y, sched, TwoWayConfig(n_steps=15), rng)
print("grid:", np.round(traj.times, 3))
print("legs:", "".join("f" if p == "forward" else "b" for p in traj.provenance))
print("pinned at both ends:", np.array_equal(traj.states[0], y), np.array_equal(traj.states[-1], x))

# geodesic length of each path, step by step
steps = S2.dist(traj.states[1:], traj.states[:-1])
print("path lengths:", np.round(steps.sum(axis=0), 3))
