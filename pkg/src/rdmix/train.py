"""Two-way bridge matching with time-scaled sampling, and the training loop.

A training pair couples a data point ``x`` and an independent prior draw
``y``.  The bridge pinned at ``Z_0 = y`` and ``Z_T = x`` is simulated from
both ends; the forward net regresses the bridge drift toward ``x`` and the
backward net the reversed-clock drift toward ``y``.
"""
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .bridges import FAMILIES, NoiseSchedule, direction_fn
from .data import default_prior, prior_from_spec
from .errors import ConfigError, CutLocusError, TrainingAborted
from .manifold import Euclidean, from_spec
from .mesh import MeshManifold
from .net import EMA, Adam, DriftNet, read_checkpoint, save_checkpoint
from .sim import nll as flow_nll
from .sim import sample_ode, sample_sde, two_way_states

log = logging.getLogger(__name__)

TIME_MODES = ("time_scaled", "uniform")


class TimeSampler:
    """Loss times on ``[eps, T - eps]`` with density ∝ sigma_t^-2 or uniform.

    Both ends are clipped: the forward target is singular at T and the
    backward target (evaluated at reversed time T - t) at t = 0.
    """

    def __init__(self, schedule, mode="time_scaled", eps=None):
        if mode not in TIME_MODES:
            raise ConfigError(f"time sampling mode must be one of {TIME_MODES}")
        self.schedule = schedule
        self.mode = mode
        self.eps = schedule.eps_clip if eps is None else eps
        self.lo, self.hi = self.eps, schedule.T - self.eps
        s = schedule
        self._g_lo = float(s.inv_sigma2_integral(self.lo))
        self._g_hi = float(s.inv_sigma2_integral(self.hi))

    def sample(self, rng, n):
        u = rng.random(n)
        if self.mode == "uniform":
            return self.lo + (self.hi - self.lo) * u
        g = self._g_lo + (self._g_hi - self._g_lo) * u
        return np.clip(self.schedule.inv_sigma2_integral_inverse(g), self.lo, self.hi)

    def density(self, t):
        t = np.asarray(t, dtype=float)
        inside = (t >= self.lo) & (t <= self.hi)
        if self.mode == "uniform":
            return np.where(inside, 1.0 / (self.hi - self.lo), 0.0)
        q = self.schedule.sigma_at(np.clip(t, 0.0, self.schedule.T)) ** -2 / (self._g_hi - self._g_lo)
        return np.where(inside, q, 0.0)

    def cdf(self, t):
        t = np.clip(np.asarray(t, dtype=float), self.lo, self.hi)
        if self.mode == "uniform":
            return (t - self.lo) / (self.hi - self.lo)
        return (self.schedule.inv_sigma2_integral(t) - self._g_lo) / (self._g_hi - self._g_lo)


def sample_time(sampler, rng, n=None):
    t = sampler.sample(rng, 1 if n is None else n)
    return float(t[0]) if n is None else t


def default_family(manifold):
    if isinstance(manifold, MeshManifold):
        return "spectral"
    return "logarithm"


def _pinned_ok(manifold, family, x, y):
    """Rows whose bridge endpoints are usable (e.g. not antipodal on a sphere)."""
    if family == "logarithm" and not isinstance(manifold, Euclidean):
        return manifold.log_checked(y, x)[1] & manifold.log_checked(x, y)[1]
    return np.ones(len(x), dtype=bool)


def bridge_targets(manifold, family, schedule, z, x, y, t):
    """Forward target toward ``x`` at ``t`` and backward target toward ``y`` at ``T - t``."""
    dirfn = direction_fn(manifold, family)
    ef, okf = dirfn(z, x)
    eb, okb = dirfn(z, y)
    tf = schedule.drift_scale(t)[:, None] * ef
    tb = schedule.reversed().drift_scale(schedule.T - t)[:, None] * eb
    return tf, tb, okf & okb


def loss_two_way(fwd, bwd, x, y, schedule, rng, sampler=None, family=None, n_steps=15, n_times=4,
                 t_star=None, times=None, weights=None, with_grads=True):
    """Two-way bridge matching loss on one batch.

    Returns ``(loss, grads_f, grads_b, info)`` where ``info`` holds the number
    of skipped samples and the per-term losses.  ``times`` (one per replicated
    row) overrides the sampler; ``weights`` multiplies each row's error.
    """
    m = fwd.manifold
    family = family or default_family(m)
    x = np.atleast_2d(x)
    y = np.atleast_2d(y)
    ok = _pinned_ok(m, family, x, y)
    skipped = int(np.sum(~ok)) * n_times
    x, y = x[ok], y[ok]
    X = np.repeat(x, n_times, axis=0)
    Y = np.repeat(y, n_times, axis=0)
    if times is None:
        sampler = sampler or TimeSampler(schedule)
        t = sampler.sample(rng, len(X))
    else:
        t = np.asarray(times, dtype=float)[np.repeat(ok, n_times)]
    w = None if weights is None else np.asarray(weights, dtype=float)[np.repeat(ok, n_times)]
    try:
        Z = two_way_states(m, family, X, Y, t, schedule, n_steps, rng, t_star)
    except CutLocusError as exc:
        log.warning("bridge simulation failed, batch skipped: %s", exc)
        return float("nan"), None, None, {"skipped": len(X) + skipped}
    tf, tb, good = bridge_targets(m, family, schedule, Z, X, Y, t)
    if not np.all(good):
        skipped += int(np.sum(~good))
        Z, tf, tb, t = Z[good], tf[good], tb[good], t[good]
        w = None if w is None else w[good]
    if skipped:
        log.info("skipped %d samples with undefined bridge targets", skipped)
    if with_grads:
        lf, gf = fwd.loss_and_grads(Z, t, tf, w)
        lb, gb = bwd.loss_and_grads(Z, schedule.T - t, tb, w)
    else:
        wt = np.ones(len(Z)) if w is None else w
        rf = fwd(Z, t) - tf
        rb = bwd(Z, schedule.T - t) - tb
        lf = float(np.mean(wt * m.inner(Z, rf, rf)))
        lb = float(np.mean(wt * m.inner(Z, rb, rb)))
        gf = gb = None
    return lf + lb, gf, gb, {"skipped": skipped, "loss_f": lf, "loss_b": lb, "n": len(Z)}


@dataclass
class TrainConfig:
    batch_size: int = 256
    iterations: int = 1000
    lr: float = 1e-3
    n_steps: int = 15
    n_times: int = 4
    val_interval: int = 100
    patience: int = 0  # validations without improvement before stopping; 0 disables
    seed: int = 0
    time_mode: str = "time_scaled"
    ema_decay: float = 0.999
    val_steps: int = 50
    val_points: int = 256
    t_star: float = None
    width: int = 512
    layers: int = 6
    activation: str = None  # sin on closed-form manifolds, swish on meshes
    zero_last: bool = False
    record_wall_time: bool = False

    def __post_init__(self):
        for k in ("batch_size", "lr", "n_steps", "n_times", "val_interval", "val_steps", "val_points", "width", "layers"):
            if not getattr(self, k) > 0:
                raise ConfigError(f"train.{k} must be positive")
        if self.iterations < 0 or self.patience < 0:
            raise ConfigError("train.iterations and train.patience must be non-negative")
        if self.iterations and self.val_interval > self.iterations:
            raise ConfigError("train.val_interval must not exceed train.iterations")
        if self.time_mode not in TIME_MODES:
            raise ConfigError(f"train.time_mode must be one of {TIME_MODES}")

    def to_dict(self):
        return asdict(self)


class MixtureModel:
    """Trained forward/backward drift nets with everything needed to sample and score."""

    def __init__(self, manifold, schedule, fwd, bwd, prior=None, family=None):
        self.manifold = manifold
        self.schedule = schedule
        self.fwd = fwd
        self.bwd = bwd
        self.prior = prior or default_prior(manifold)
        self.family = family or default_family(manifold)
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown bridge family {self.family!r}")

    @property
    def T(self):
        return self.schedule.T

    def sample(self, n, rng, mode="sde", n_steps=100, return_path=False):
        y = self.prior.sample(rng, n)
        if n == 0:
            return y
        if mode == "sde":
            return sample_sde(self.manifold, self.fwd, self.schedule, y, n_steps, rng, return_path)
        if mode == "ode":
            return sample_ode(self.manifold, self.fwd, self.bwd, y, n_steps, self.T, return_path)
        raise ConfigError(f"sampling mode must be 'sde' or 'ode', got {mode!r}")

    def nll(self, x, n_steps=100, chunk=512):
        x = np.atleast_2d(x)
        out = [flow_nll(self.manifold, self.fwd, self.bwd, x[i:i + chunk], self.prior.logp, n_steps, self.T)
               for i in range(0, len(x), chunk)]
        return np.concatenate(out) if out else np.zeros(0)


@dataclass
class FitResult:
    model: MixtureModel
    history: list
    best_iter: int = None
    best_val: float = None
    iteration: int = 0
    state: dict = field(default=None, repr=False)  # nets, optimizers, EMA at the end of training


def _make_nets(manifold, cfg):
    act = cfg.activation or ("swish" if isinstance(manifold, MeshManifold) else "sin")
    hidden = (cfg.width,) * cfg.layers
    f = DriftNet(manifold, hidden, act, seed=cfg.seed * 2 + 1, zero_last=cfg.zero_last)
    b = DriftNet(manifold, hidden, act, seed=cfg.seed * 2 + 2, zero_last=cfg.zero_last)
    return f, b


def fit(cfg, train_points, manifold, schedule, valid_points=None, prior=None, family=None, on_metrics=None):
    """Train forward and backward drift nets; returns the best-validation EMA weights.

    ``on_metrics(record)`` is called once per iteration with the JSON-lines
    record ``{iter, loss, val_nll, wall_ms}``.
    """
    family = family or default_family(manifold)
    prior = prior or default_prior(manifold)
    rng = np.random.default_rng(cfg.seed)
    fwd, bwd = _make_nets(manifold, cfg)
    opt_f, opt_b = Adam(fwd.params, cfg.lr), Adam(bwd.params, cfg.lr)
    ema_f, ema_b = EMA(fwd.params, cfg.ema_decay), EMA(bwd.params, cfg.ema_decay)
    sampler = TimeSampler(schedule, cfg.time_mode)
    train_points = np.asarray(train_points, dtype=float)
    if valid_points is not None:
        valid_points = np.asarray(valid_points, dtype=float)[: cfg.val_points]
    history = []
    best = {"val": math.inf, "iter": None, "f": None, "b": None}

    def snapshot():
        return {"fwd": fwd, "bwd": bwd, "adam_f": opt_f, "adam_b": opt_b, "ema_f": ema_f, "ema_b": ema_b}

    def eval_model(pf, pb):
        return MixtureModel(manifold, schedule, fwd.with_params(pf), bwd.with_params(pb), prior, family)

    bad_rounds = 0
    it = 0
    for it in range(1, cfg.iterations + 1):
        t0 = time.perf_counter()
        idx = rng.integers(0, len(train_points), cfg.batch_size)
        x = train_points[idx]
        y = prior.sample(rng, cfg.batch_size)
        loss, gf, gb, info = loss_two_way(fwd, bwd, x, y, schedule, rng, sampler, family,
                                          cfg.n_steps, cfg.n_times, cfg.t_star)
        if not math.isfinite(loss) or gf is None:
            raise TrainingAborted(f"non-finite loss at iteration {it}", checkpoint=snapshot())
        opt_f.step(fwd.params, gf)
        opt_b.step(bwd.params, gb)
        ema_f.update(fwd.params)
        ema_b.update(bwd.params)
        val = None
        if valid_points is not None and it % cfg.val_interval == 0:
            pf = [p.copy() for p in ema_f.shadow]
            pb = [p.copy() for p in ema_b.shadow]
            val = float(np.mean(eval_model(pf, pb).nll(valid_points, cfg.val_steps)))
            if val < best["val"]:
                best.update(val=val, iter=it, f=pf, b=pb)
                bad_rounds = 0
            else:
                bad_rounds += 1
        rec = {"iter": it, "loss": loss, "val_nll": val,
               "wall_ms": round(1e3 * (time.perf_counter() - t0), 3) if cfg.record_wall_time else None}
        history.append(rec)
        if on_metrics:
            on_metrics(rec)
        if cfg.patience and bad_rounds >= cfg.patience:
            break
    if best["f"] is not None:
        model = eval_model(best["f"], best["b"])
    else:
        model = eval_model([p.copy() for p in ema_f.shadow], [p.copy() for p in ema_b.shadow])
    return FitResult(model, history, best["iter"], None if best["iter"] is None else best["val"], it, snapshot())


# -- checkpoints -----------------------------------------------------------------

def save_model(path, result, cfg, extra=None):
    """Write a checkpoint for a :class:`FitResult` (evaluation weights = best EMA)."""
    st = result.state
    model = result.model
    header = {
        "architecture": {"fwd": st["fwd"].config(), "bwd": st["bwd"].config()},
        "manifold": model.manifold.spec(),
        "schedule": model.schedule.to_dict(),
        "family": model.family,
        "prior": model.prior.spec(),
        "iteration": result.iteration,
        "best_iter": result.best_iter,
        "best_val_nll": result.best_val,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
    }
    header.update(extra or {})
    # the EMA slot holds the weights used for evaluation
    ema_f = EMA.__new__(EMA)
    ema_f.decay, ema_f.shadow = st["ema_f"].decay, model.fwd.params
    ema_b = EMA.__new__(EMA)
    ema_b.decay, ema_b.shadow = st["ema_b"].decay, model.bwd.params
    save_checkpoint(path, header, [
        {"name": "fwd", "net": st["fwd"], "adam": st["adam_f"], "ema": ema_f},
        {"name": "bwd", "net": st["bwd"], "adam": st["adam_b"], "ema": ema_b},
    ])


def load_model(path, manifold=None):
    """Rebuild a :class:`MixtureModel` (EMA weights) from a checkpoint file."""
    header, arrays = read_checkpoint(path)
    spec = header["manifold"]
    if manifold is None:
        if spec["kind"] == "mesh":
            raise ConfigError("mesh checkpoints need the mesh manifold to be supplied")
        manifold = from_spec(spec)
    elif manifold.spec()["kind"] != spec["kind"]:
        raise ConfigError(f"checkpoint manifold {spec['kind']!r} does not match {manifold.spec()['kind']!r}")
    nets = {}
    for n in header["nets"]:
        nets[n["name"]] = DriftNet(manifold, n["hidden"], n["activation"], params=arrays[n["name"]]["ema"])
    schedule = NoiseSchedule.from_dict(header["schedule"])
    prior = prior_from_spec(manifold, header.get("prior"))
    return MixtureModel(manifold, schedule, nets["fwd"], nets["bwd"], prior, header.get("family")), header


def write_metrics(path, history):
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
