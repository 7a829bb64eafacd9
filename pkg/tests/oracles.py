"""Closed-form references used by the tests."""
import math

import numpy as np


def gaussian_two_point_drift(z, t, points=(-1.0, 1.0), weights=None, sigma=1.0, T=1.0):
    """Forward mixture drift for a standard-normal prior and a discrete target on the line.

    With constant sigma, the bridge from ``y ~ N(0, 1)`` to ``x`` has
    ``Z_t | x ~ N(t x / T, s_t)`` with ``s_t = (1 - t/T)^2 + sigma^2 t (1 - t/T)``.
    """
    z = np.asarray(z, dtype=float)
    t = np.asarray(t, dtype=float)
    pts = np.asarray(points, dtype=float)
    w = np.full(len(pts), 1.0 / len(pts)) if weights is None else np.asarray(weights, dtype=float)
    r = t / T
    var = (1.0 - r) ** 2 + sigma**2 * t * (1.0 - r)
    logw = np.log(w) - 0.5 * (z[..., None] - r[..., None] * pts) ** 2 / var[..., None]
    logw -= logw.max(axis=-1, keepdims=True)
    p = np.exp(logw)
    p /= p.sum(axis=-1, keepdims=True)
    drift = (pts - z[..., None]) / (T - t)[..., None]
    return np.sum(p * drift, axis=-1)


def brownian_bridge_marginal(x, y, t, sigma=1.0, T=1.0):
    """Mean and variance of a Brownian bridge from ``y`` at 0 to ``x`` at T."""
    r = t / T
    return (1.0 - r) * y + r * x, sigma**2 * t * (1.0 - r)


def identity_transport_drifts(T=1.0):
    """Exact forward/backward drifts of the mixture whose prior and target are N(0, 1).

    With sigma = 1 and v_t = 1 - t + t^2 the marginal stays N(0, v_t); the
    forward drift is -(1 - t) z / v_t and the backward drift at reversed
    time s = T - t is -t z / v_t.
    """

    def v(t):
        return 1.0 - t + t * t

    def fwd(z, t):
        t = np.asarray(t, dtype=float)[:, None]
        return -(1.0 - t) * z / v(t)

    def bwd(z, s):
        t = T - np.asarray(s, dtype=float)[:, None]
        return -t * z / v(t)

    return fwd, bwd


def fd_check(net, x, t, target, eps=1e-6):
    """Largest relative error between analytic and central-difference gradients."""
    _, grads = net.loss_and_grads(x, t, target)
    worst = 0.0
    for p, g in zip(net.params, grads):
        fd = np.empty_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + eps
            lp = net.loss_and_grads(x, t, target)[0]
            p[i] = old - eps
            lm = net.loss_and_grads(x, t, target)[0]
            p[i] = old
            fd[i] = (lp - lm) / (2 * eps)
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-8))
    return worst


def vmf_entropy_numeric(kappa, n=200001):
    """vMF entropy on S^2 by quadrature over the polar cosine."""
    w = np.linspace(-1.0, 1.0, n)
    logc = math.log(kappa) - math.log(4 * math.pi * math.sinh(kappa))
    logp = logc + kappa * w
    f = -np.exp(logp) * logp * 2 * math.pi
    return np.trapezoid(f, w) if hasattr(np, "trapezoid") else np.trapz(f, w)
