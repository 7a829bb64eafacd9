"""Noise schedules and endpoint-conditioned bridge drifts.

A bridge toward ``z`` has drift ``sigma_t^2 / (tau_T - tau_t) * eta(x, z)``
where ``eta`` is the unscaled direction: the log map for the Logarithm bridge,
``-1/2 grad d_w(x, z)^2 / |grad d_w(x, z)|^2`` for the Spectral bridge on a mesh,
and ``z - x`` for the Euclidean Brownian bridge.
"""
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from .errors import ConfigError, HorizonError, RangeError
from .manifold import Euclidean

FAMILIES = ("logarithm", "spectral", "euclidean_brownian")

# Bridge drifts are never evaluated at t >= T - CLIP_FRACTION * T.
CLIP_FRACTION = 1e-4


@dataclass(frozen=True)
class NoiseSchedule:
    """``sigma_t`` constant or linear in t on ``[0, T]``."""

    kind: str = "constant"
    sigma: float = 1.0
    sigma0: float = None
    sigma1: float = None
    T: float = 1.0

    def __post_init__(self):
        if self.kind == "constant":
            if not self.sigma > 0:
                raise ConfigError("schedule.sigma must be positive")
        elif self.kind == "linear":
            if self.sigma0 is None or self.sigma1 is None:
                raise ConfigError("linear schedule needs schedule.sigma0 and schedule.sigma1")
            if not (self.sigma0 > 0 and self.sigma1 > 0):
                raise ConfigError("linear schedule endpoints must be positive")
        else:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if not self.T > 0:
            raise ConfigError("horizon T must be positive")

    @classmethod
    def constant(cls, sigma=1.0, T=1.0):
        return cls("constant", sigma=sigma, T=T)

    @classmethod
    def linear(cls, sigma0, sigma1, T=1.0):
        return cls("linear", sigma0=sigma0, sigma1=sigma1, T=T)

    @property
    def eps_clip(self):
        return CLIP_FRACTION * self.T

    @property
    def _slope(self):
        return (self.sigma1 - self.sigma0) / self.T

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        tol = 1e-12 * self.T
        if np.any(t < -tol) or np.any(t > self.T + tol):
            raise RangeError(f"time outside [0, {self.T}]")
        return np.clip(t, 0.0, self.T)

    def sigma_at(self, t):
        t = self._check(t)
        if self.kind == "constant":
            return np.full_like(t, self.sigma)
        return self.sigma0 + self._slope * t

    def tau(self, t):
        """Rescaled time, the integral of sigma_s^2 over [0, t]."""
        t = self._check(t)
        if self.kind == "constant":
            return self.sigma**2 * t
        b = self._slope
        if abs(b) < 1e-15:
            return self.sigma0**2 * t
        return ((self.sigma0 + b * t) ** 3 - self.sigma0**3) / (3.0 * b)

    @cached_property
    def tau_T(self):
        return float(self.tau(self.T))

    def inv_sigma2_integral(self, t):
        """Integral of sigma_s^-2 over [0, t]."""
        t = self._check(t)
        if self.kind == "constant":
            return t / self.sigma**2
        b = self._slope
        if abs(b) < 1e-15:
            return t / self.sigma0**2
        return (1.0 / self.sigma0 - 1.0 / (self.sigma0 + b * t)) / b

    def inv_sigma2_integral_inverse(self, g):
        g = np.asarray(g, dtype=float)
        if self.kind == "constant":
            return g * self.sigma**2
        b = self._slope
        if abs(b) < 1e-15:
            return g * self.sigma0**2
        return (1.0 / (1.0 / self.sigma0 - b * g) - self.sigma0) / b

    def reversed(self):
        """Schedule of the time-reversed process, sigma'_s = sigma_{T-s}."""
        if self.kind == "constant":
            return self
        return replace(self, sigma0=self.sigma1, sigma1=self.sigma0)

    def drift_scale(self, t):
        """``sigma_t^2 / (tau_T - tau_t)``; raises inside the clipped terminal window."""
        t = np.asarray(t, dtype=float)
        if np.any(t >= self.T - self.eps_clip):
            raise HorizonError(f"bridge drift requested at t >= T - {self.eps_clip:g}")
        return self.sigma_at(t) ** 2 / (self.tau_T - self.tau(t))

    def to_dict(self):
        d = {"kind": self.kind, "T": self.T}
        if self.kind == "constant":
            d["sigma"] = self.sigma
        else:
            d.update(sigma0=self.sigma0, sigma1=self.sigma1)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in ("kind", "sigma", "sigma0", "sigma1", "T") if k in d})


def tau(schedule, t):
    return schedule.tau(t)


@dataclass
class BridgeSpec:
    """A bridge family pinned at ``endpoint`` on ``manifold``.

    With ``direction="reversed"`` the object describes the time-reversed bridge:
    times passed to the drift functions are reversed times and the schedule
    is reflected.
    """

    family: str
    endpoint: np.ndarray
    schedule: NoiseSchedule
    manifold: object
    direction: str = "forward"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown bridge family {self.family!r}")
        if self.direction not in ("forward", "reversed"):
            raise ConfigError("direction must be 'forward' or 'reversed'")
        if self.family == "euclidean_brownian" and not isinstance(self.manifold, Euclidean):
            raise ConfigError("the Euclidean Brownian bridge requires a Euclidean manifold")
        if self.family == "spectral" and getattr(self.manifold, "basis", None) is None:
            raise ConfigError("the Spectral bridge requires a mesh manifold with a spectral basis")

    @property
    def active_schedule(self):
        return self.schedule.reversed() if self.direction == "reversed" else self.schedule


def direction_fn(manifold, family):
    """Checked unscaled-direction function ``(x, z) -> (eta, ok)`` for a family."""
    if family == "logarithm":
        return manifold.log_checked
    if family == "spectral":
        return manifold.spectral_direction_checked
    if family == "euclidean_brownian":
        return lambda x, z: (np.asarray(z, dtype=float) - x, np.ones(np.shape(x)[:-1], dtype=bool))
    raise ConfigError(f"unknown bridge family {family!r}")


def _direction(spec, x):
    m = spec.manifold
    if spec.family == "logarithm":
        return m.log(x, spec.endpoint)
    if spec.family == "spectral":
        return m.spectral_direction(x, spec.endpoint)
    return np.asarray(spec.endpoint, dtype=float) - x


def unscaled_direction(spec, x, t):
    """Bridge direction without the time factor; ``t`` only checks the horizon."""
    spec.active_schedule.drift_scale(t)
    return _direction(spec, x)


def bridge_drift(spec, x, t):
    scale = np.asarray(spec.active_schedule.drift_scale(t))
    eta = _direction(spec, x)
    return scale[..., None] * eta if scale.ndim else scale * eta


def reversed_bridge_drift(spec, x, s):
    """Drift at reversed time ``s`` of the bridge run backwards toward ``spec.endpoint``."""
    rev = replace(spec, direction="reversed" if spec.direction == "forward" else "forward")
    return bridge_drift(rev, x, s)
