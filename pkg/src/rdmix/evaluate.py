"""Evaluation: kernel two-sample distances, endpoint prediction, convergence
curves and likelihood reports."""
import csv
import json
import math

import numpy as np

from .errors import EstimatorError
from .mesh import MeshManifold


def pairwise_dist(manifold, a, b):
    """Geodesic distance matrix (chordal on meshes)."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    name = getattr(manifold, "name", None)
    if name == "sphere":
        return np.arccos(np.clip(a @ b.T, -1.0, 1.0))
    if name == "hyperboloid":
        g = -np.outer(a[:, 0], b[:, 0]) + a[:, 1:] @ b[:, 1:].T
        return np.arccosh(np.maximum(-g, 1.0))
    if name == "torus":
        d = manifold.wrap_centered(a[:, None, :] - b[None, :, :])
        return np.sqrt(np.sum(d * d, axis=-1))
    if isinstance(manifold, MeshManifold):
        a, b = manifold.positions(a), manifold.positions(b)
    sq = np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(sq, 0.0))


def median_bandwidth(manifold, a, b, max_points=1000, rng=None):
    rng = rng or np.random.default_rng(0)
    pool = np.concatenate([np.atleast_2d(a), np.atleast_2d(b)])
    if len(pool) > max_points:
        pool = pool[rng.choice(len(pool), max_points, replace=False)]
    d = pairwise_dist(manifold, pool, pool)
    h = float(np.median(d[np.triu_indices(len(pool), 1)]))
    return h if h > 0 else 1.0


def _kernel_sum(manifold, a, b, h, chunk, exclude_diag=False):
    total = 0.0
    for i in range(0, len(a), chunk):
        d = pairwise_dist(manifold, a[i:i + chunk], b)
        k = np.exp(-(d * d) / (2.0 * h * h))
        if exclude_diag:
            r = np.arange(min(chunk, len(a) - i))
            k[r, r + i] = 0.0
        total += float(k.sum())
    return total


def mmd(a, b, manifold, bandwidth=None, unbiased=True, chunk=1024):
    """Squared MMD with the Gaussian kernel ``exp(-d(x, y)^2 / 2h^2)`` on geodesic distance.

    ``bandwidth`` defaults to the median pairwise distance of the pooled
    samples.  The unbiased U-statistic can be slightly negative.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    n, m = len(a), len(b)
    if n < 2 or m < 2:
        raise EstimatorError("MMD needs at least two samples in each set")
    h = median_bandwidth(manifold, a, b) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise EstimatorError("kernel bandwidth must be positive")
    kab = _kernel_sum(manifold, a, b, h, chunk) / (n * m)
    if unbiased:
        kaa = _kernel_sum(manifold, a, a, h, chunk, True) / (n * (n - 1))
        kbb = _kernel_sum(manifold, b, b, h, chunk, True) / (m * (m - 1))
    else:
        kaa = _kernel_sum(manifold, a, a, h, chunk) / (n * n)
        kbb = _kernel_sum(manifold, b, b, h, chunk) / (m * m)
    return kaa + kbb - 2.0 * kab


def trajectory_mmd(a, b, manifold, bandwidth=None, unbiased=False):
    """Squared MMD between path samples of shape ``(B, J, D)``.

    Paths are compared through the product distance
    ``sqrt(sum_j d(a_j, b_j)^2)`` over the ``J`` recorded times, with the same
    Gaussian kernel as :func:`mmd`.  The default V-statistic is non-negative,
    which keeps ratios between two estimates meaningful near zero.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ValueError("path samples must share shape (B, J, D)")
    n, m = len(a), len(b)
    if n < 2 or m < 2:
        raise EstimatorError("MMD needs at least two samples in each set")

    def sqdist(p, q):
        return sum(pairwise_dist(manifold, p[:, j], q[:, j]) ** 2 for j in range(p.shape[1]))

    if bandwidth is None:
        pool = np.concatenate([a[:500], b[:500]])
        d = np.sqrt(sqdist(pool, pool))
        h = float(np.median(d[np.triu_indices(len(pool), 1)])) or 1.0
    else:
        h = float(bandwidth)
    kaa = np.exp(-sqdist(a, a) / (2.0 * h * h))
    kbb = np.exp(-sqdist(b, b) / (2.0 * h * h))
    kab = float(np.exp(-sqdist(a, b) / (2.0 * h * h)).mean())
    if unbiased:
        np.fill_diagonal(kaa, 0.0)
        np.fill_diagonal(kbb, 0.0)
        return kaa.sum() / (n * (n - 1)) + kbb.sum() / (m * (m - 1)) - 2.0 * kab
    return kaa.mean() + kbb.mean() - 2.0 * kab


def predict_endpoint(fwd, x, t, schedule):
    """Most probable endpoint ``exp_x((tau_T - tau_t) / sigma_t^2 * s_f(x, t))``."""
    x = np.atleast_2d(x)
    t = np.broadcast_to(np.asarray(t, dtype=float), (len(x),))
    unscale = 1.0 / schedule.drift_scale(t)
    return fwd.manifold.exp(x, unscale[:, None] * fwd(x, t))


def convergence_curve(manifold, states, finals):
    """Mean distance from each trajectory time slice to the final samples."""
    states = np.asarray(states, dtype=float)
    finals = np.asarray(finals, dtype=float)
    if states.shape[1:] != finals.shape:
        raise ValueError(f"trajectory batch {states.shape[1:]} does not match finals {finals.shape}")
    out = np.empty(len(states))
    for k, s in enumerate(states):
        out[k] = float(np.mean(manifold.dist(s, finals)))
    return out


def prediction_curve(model, traj):
    """Mean distance from the endpoint predicted at each grid time to the final sample."""
    T = model.schedule.T
    finals = traj.final
    out = np.empty(len(traj.times))
    for k, t in enumerate(traj.times):
        if t >= T - model.schedule.eps_clip:
            pred = traj.states[k]
        else:
            pred = predict_endpoint(model.fwd, traj.states[k], t, model.schedule)
        out[k] = float(np.mean(model.manifold.dist(pred, finals)))
    return out


def write_csv(path, header, rows, comments=()):
    with open(path, "w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def nats_to_bits_per_dim(nll_nats, dim):
    return nll_nats / (dim * math.log(2.0))


def nll_suite(runs, n_steps=100, convergence_tol=0.01, check_convergence=True):
    """Aggregate test NLL over runs.

    ``runs`` is a list of ``(seed, model, test_points)``.  Reports per-run
    mean/std, the pooled per-point statistics, the across-run spread and,
    optionally, the change of the pooled mean when the ODE steps are doubled.
    """
    per_seed, pooled, pooled2 = [], [], []
    for seed, model, pts in runs:
        v = model.nll(pts, n_steps)
        pooled.append(v)
        rec = {"seed": seed, "n": len(v), "nll_mean": float(np.mean(v)), "nll_std": float(np.std(v))}
        if check_convergence:
            v2 = model.nll(pts, 2 * n_steps)
            pooled2.append(v2)
            rec["nll_mean_2n"] = float(np.mean(v2))
        per_seed.append(rec)
    allv = np.concatenate(pooled)
    means = np.array([r["nll_mean"] for r in per_seed])
    out = {
        "n_steps": n_steps,
        "per_seed": per_seed,
        "nll_mean": float(np.mean(allv)),
        "nll_std": float(np.std(allv)),
        "run_mean": float(np.mean(means)),
        "run_std": float(np.std(means)),
    }
    if check_convergence:
        m2 = float(np.mean(np.concatenate(pooled2)))
        out["nll_mean_2n"] = m2
        out["step_change"] = abs(m2 - out["nll_mean"])
        out["converged"] = out["step_change"] < convergence_tol
    return out


def write_summary(path, summary):
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
