"""SDE and ODE integrators on manifolds.

Stochastic paths use the geodesic random walk: an Euler-Maruyama step taken
in the tangent space and pushed to the manifold with the exponential map.
The probability-flow ODE uses classical RK4 on embedded manifolds (the
velocity field is extended off the manifold through the retraction) and
Euler steps with re-projection on meshes.
"""
import math
from dataclasses import dataclass

import numpy as np

from .bridges import direction_fn
from .errors import CutLocusError, IntegrationError, LikelihoodError, SimulationError
from .mesh import MeshManifold

MAX_RESAMPLE = 8


@dataclass
class TrajectoryBatch:
    times: np.ndarray  # (N+1,)
    states: np.ndarray  # (N+1, B, D)
    provenance: np.ndarray = None  # (N+1,) "forward" / "backward"

    @property
    def n_steps(self):
        return len(self.times) - 1

    @property
    def final(self):
        return self.states[-1]


@dataclass
class TwoWayConfig:
    n_steps: int = 15
    t_star: float = None  # defaults to T / 2

    def split_time(self, T):
        t_star = 0.5 * T if self.t_star is None else self.t_star
        if not 0.0 < t_star < T:
            raise ValueError("t_star must lie strictly inside (0, T)")
        if self.n_steps < 2:
            raise ValueError("two-way simulation needs n_steps >= 2")
        return t_star


def _as_time(t, n):
    t = np.asarray(t, dtype=float)
    return np.full(n, float(t)) if t.ndim == 0 else t


def geodesic_random_walk(manifold, drift_fn, schedule, x0, n_steps, rng, t0=0.0, t1=None, noise=True):
    """Simulate ``dX = drift(X, t) dt + sigma_t dB`` on a uniform grid.

    ``drift_fn(x, t)`` receives the batch of states and a vector of times.
    """
    t1 = schedule.T if t1 is None else t1
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    x = np.array(x0, dtype=float)
    times = np.linspace(t0, t1, n_steps + 1)
    h = (t1 - t0) / n_steps
    states = [x]
    for k in range(n_steps):
        t = times[k]
        try:
            drift = drift_fn(x, np.full(len(x), t))
        except Exception as exc:
            raise SimulationError(f"drift failed at step {k} (t={t:.6g}): {exc}", step=k) from exc
        v = h * drift
        if noise:
            v = v + manifold.tangent_gaussian(x, rng, float(schedule.sigma_at(t)) * math.sqrt(abs(h)))
        x = manifold.exp(x, v)
        states.append(x)
    return TrajectoryBatch(times, np.stack(states))


def bridge_walk(manifold, family, start, endpoint, schedule, t_end, n_steps, rng, record=False):
    """Run bridges toward ``endpoint`` from time 0 to ``t_end`` (per row).

    Row ``i`` takes ``n_steps[i]`` uniform steps; rows with zero steps stay
    at their start.  ``schedule`` is the schedule of the process being
    simulated (pass ``schedule.reversed()`` for a backward leg).  When a step
    lands where the direction is undefined (cut locus, vanishing spectral
    gradient) its noise is redrawn up to ``MAX_RESAMPLE`` times.  Steps that
    start inside the clipped terminal window move straight along the unscaled
    direction, landing on the endpoint for the Logarithm bridge.
    """
    x = np.array(start, dtype=float)
    endpoint = np.asarray(endpoint, dtype=float)
    B = len(x)
    t_end = _as_time(t_end, B)
    m = np.broadcast_to(np.asarray(n_steps, dtype=np.int64), (B,)).copy()
    h = np.where(m > 0, t_end / np.maximum(m, 1), 0.0)
    dirfn = direction_fn(manifold, family)
    eta = np.zeros((B, manifold.tangent_dim))
    live = np.flatnonzero(m > 0)
    if live.size:
        eta_l, ok = dirfn(x[live], endpoint[live])
        if not np.all(ok):
            raise CutLocusError(f"bridge start on the cut locus of its endpoint (rows {live[~ok][:10].tolist()})")
        eta[live] = eta_l
    if record and np.unique(m).size > 1:
        raise ValueError("record=True needs equal step counts")
    path = [x.copy()] if record else None
    for k in range(int(m.max(initial=0))):
        idx = np.flatnonzero(m > k)
        hk = h[idx]
        tk = k * hk
        # inside the clipped window the step snaps along the unscaled direction, noise-free
        snap = tk >= schedule.T - schedule.eps_clip
        scale = np.ones(len(idx))
        scale[~snap] = hk[~snap] * schedule.drift_scale(tk[~snap])
        sig = np.where(snap, 0.0, schedule.sigma_at(tk) * np.sqrt(hk))
        base = scale[:, None] * eta[idx]
        last = (k + 1) == m[idx]
        pending = np.arange(len(idx))
        new_x = np.empty((len(idx), x.shape[1]))
        for attempt in range(MAX_RESAMPLE + 1):
            rows = idx[pending]
            step = base[pending] + manifold.tangent_gaussian(x[rows], rng, 1.0) * sig[pending, None]
            cand = manifold.exp(x[rows], step)
            new_x[pending] = cand
            need = ~last[pending]
            bad = np.zeros(len(pending), dtype=bool)
            if np.any(need):
                e, ok = dirfn(cand[need], endpoint[rows[need]])
                eta[rows[need]] = e
                bad[np.flatnonzero(need)[~ok]] = True
            if not np.any(bad):
                break
            pending = pending[bad]
        else:
            raise CutLocusError(f"direction undefined after {MAX_RESAMPLE} noise resamples at step {k}")
        x[idx] = new_x
        if record:
            path.append(x.copy())
    if record:
        return x, np.stack(path)
    return x


def _leg_steps(K, span, full):
    return np.where(span > 0, np.ceil(K * span / full - 1e-12), 0).astype(np.int64)


def two_way_states(manifold, family, x, y, t, schedule, n_steps, rng, t_star=None):
    """Bridge states ``Z_t`` pinned at ``Z_0 = y`` and ``Z_T = x``, one time per row.

    Rows with ``t < t_star`` come from the forward bridge started at ``y``;
    the rest from the reversed bridge started at ``x``.  Each leg spends
    ``ceil(n_steps / 2)`` steps over its half of the horizon.
    """
    T = schedule.T
    t_star = TwoWayConfig(n_steps, t_star).split_time(T)
    t = _as_time(t, len(x))
    K = math.ceil(n_steps / 2)
    Z = np.empty((len(x), manifold.point_dim))
    fwd = t < t_star
    if np.any(fwd):
        Z[fwd] = bridge_walk(manifold, family, y[fwd], x[fwd], schedule, t[fwd],
                             _leg_steps(K, t[fwd], t_star), rng)
    bwd = ~fwd
    if np.any(bwd):
        s = T - t[bwd]
        Z[bwd] = bridge_walk(manifold, family, x[bwd], y[bwd], schedule.reversed(), s,
                             _leg_steps(K, s, T - t_star), rng)
    return Z


def one_way_states(manifold, family, x, y, t, schedule, n_steps, rng):
    """Bridge states from forward simulation only, ``n_steps`` per full horizon."""
    t = _as_time(t, len(x))
    return bridge_walk(manifold, family, y, x, schedule, t, _leg_steps(n_steps, t, schedule.T), rng)


def simulate_two_way(manifold, family, x, y, schedule, cfg, rng):
    """Two-way bridge trajectories on the uniform grid of ``cfg.n_steps`` steps.

    ``y`` (prior draw) is the state at t = 0 and ``x`` (data draw) at t = T,
    both exactly.  Grid times before ``t_star`` come from the forward leg,
    the remaining ones from the backward leg.
    """
    T = schedule.T
    t_star = cfg.split_time(T)
    N = cfg.n_steps
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    times = np.linspace(0.0, T, N + 1)
    h = T / N
    k_f = int(np.flatnonzero(times < t_star)[-1])
    k_b = k_f + 1
    B = len(x)
    states = np.empty((N + 1, B, manifold.point_dim))
    if k_f > 0:
        _, fpath = bridge_walk(manifold, family, y, x, schedule, k_f * h, k_f, rng, record=True)
        states[: k_f + 1] = fpath
    else:
        states[0] = y
    _, bpath = bridge_walk(manifold, family, x, y, schedule.reversed(), (N - k_b) * h, N - k_b, rng, record=True)
    states[k_b:] = bpath[::-1]
    states[0] = y
    states[-1] = x
    prov = np.array(["forward"] * (k_f + 1) + ["backward"] * (N - k_f))
    return TrajectoryBatch(times, states, prov)


def path_states(manifold, family, x, y, times, schedule, n_steps, rng, two_way=True):
    """Bridge paths from ``y`` to ``x`` read off at ``times``, shape ``(B, len(times), D)``.

    Each time maps to the nearest point of the uniform ``n_steps`` grid.  With
    ``two_way=False`` the whole path comes from the forward bridge alone.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    T = schedule.T
    idx = np.rint(np.asarray(times, dtype=float) / T * n_steps).astype(int)
    if two_way:
        states = simulate_two_way(manifold, family, x, y, schedule, TwoWayConfig(n_steps), rng).states
    else:
        _, states = bridge_walk(manifold, family, y, x, schedule, T, n_steps, rng, record=True)
    return states[idx].transpose(1, 0, 2)


# -- probability flow -----------------------------------------------------------

def flow_velocity(fwd, bwd, T):
    """Probability-flow velocity ``1/2 (s_f(y, t) - s_b(y, T - t))``."""

    def v(y, t):
        t = _as_time(t, len(y))
        return 0.5 * (fwd(y, t) - bwd(y, T - t))

    return v


def divergence(manifold, field, x, t, h=1e-4):
    """Riemannian divergence of a tangent field by central differences.

    Differences are taken along geodesics ``exp(x, +-h e_i)`` for an
    orthonormal tangent basis ``e_i`` and paired with ``e_i`` in the metric.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = len(x)
    t = _as_time(t, n)
    E = manifold.tangent_basis(x)  # (n, d, Dt)
    d = E.shape[1]
    xs = np.repeat(x, d, axis=0)
    es = E.reshape(n * d, -1)
    pts = np.concatenate([manifold.exp(xs, h * es), manifold.exp(xs, -h * es)])
    vals = field(pts, np.tile(np.repeat(t, d), 2))
    dv = (vals[: n * d] - vals[n * d:]) / (2.0 * h)
    return manifold.inner(xs, dv, es).reshape(n, d).sum(axis=1)


def _damped(manifold, velocity):
    def v(p, t):
        return manifold.boundary_factor(p)[:, None] * velocity(p, t)

    return v


def _is_embedded(manifold):
    return not isinstance(manifold, MeshManifold)


def solve_ode(manifold, velocity, x0, n_steps, t0, t1, with_divergence=False, return_path=False, method=None):
    """Integrate ``dy/dt = velocity(y, t)`` from ``t0`` to ``t1`` (either direction).

    ``method`` is ``"rk4"`` (default on embedded manifolds) or ``"euler"``
    (default, and only choice, on meshes).  With ``with_divergence`` the
    integral of the divergence along the path is returned as well.

    On meshes with a boundary the velocity is scaled by
    ``manifold.boundary_factor`` so that the flow never leaves the surface
    and the divergence integral stays a valid change of variables.
    """
    method = method or ("rk4" if _is_embedded(manifold) else "euler")
    if method == "rk4" and not _is_embedded(manifold):
        raise ValueError("RK4 needs an ambient retraction; use method='euler' on meshes")
    if not _is_embedded(manifold) and not manifold.mesh.is_closed:
        velocity = _damped(manifold, velocity)
    y = np.atleast_2d(np.array(x0, dtype=float))
    n = len(y)
    h = (t1 - t0) / n_steps
    acc = np.zeros(n)
    path = [y] if return_path else None

    def f(p, t):
        v = velocity(p, np.full(n, t))
        if not np.all(np.isfinite(v)):
            raise IntegrationError(f"non-finite velocity at t={t:.6g}")
        if with_divergence:
            return v, divergence(manifold, velocity, p, t)
        return v, 0.0

    for k in range(n_steps):
        t = t0 + k * h
        if method == "rk4":
            R = manifold.retract
            k1, d1 = f(y, t)
            k2, d2 = f(R(y + 0.5 * h * k1), t + 0.5 * h)
            k3, d3 = f(R(y + 0.5 * h * k2), t + 0.5 * h)
            k4, d4 = f(R(y + h * k3), t + h)
            y = R(y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4))
            acc = acc + (h / 6.0) * (d1 + 2 * d2 + 2 * d3 + d4)
        else:
            k1, d1 = f(y, t)
            y = manifold.exp(y, h * k1)
            acc = acc + h * d1
        if return_path:
            path.append(y)
    out = np.stack(path) if return_path else y
    return (out, acc) if with_divergence else out


def sample_sde(manifold, fwd, schedule, x0, n_steps, rng, return_path=False):
    """Generate with the learned mixture SDE ``dX = s_f(X, t) dt + sigma_t dB``."""
    traj = geodesic_random_walk(manifold, fwd, schedule, x0, n_steps, rng)
    return traj if return_path else traj.final


def sample_ode(manifold, fwd, bwd, x0, n_steps, T=1.0, return_path=False, method=None):
    """Generate by integrating the probability flow from t = 0 to T."""
    return solve_ode(manifold, flow_velocity(fwd, bwd, T), x0, n_steps, 0.0, T,
                     return_path=return_path, method=method)


def nll(manifold, fwd, bwd, x_data, prior_logp, n_steps=200, T=1.0, method=None):
    """Per-point negative log-likelihood (nats) under the probability flow.

    The flow is run backward from the data at t = T to t = 0 while the
    divergence integral is accumulated; ``prior_logp`` is the log density of
    the prior at the recovered starting points.
    """
    y0, acc = solve_ode(manifold, flow_velocity(fwd, bwd, T), x_data, n_steps, T, 0.0,
                        with_divergence=True, method=method)
    # acc holds the integral of div v from T down to 0, i.e. minus the forward integral
    out = -(prior_logp(y0) + acc)
    if not np.all(np.isfinite(out)):
        raise LikelihoodError("non-finite log-likelihood")
    return out
