"""Drift networks: an MLP over (point features, t) with tangent-projected output.

Gradients are written out by hand (reverse mode over dense layers, the
activation and the tangent projection) so the package only needs numpy.
"""
import json
import struct

import numpy as np

from .errors import ConfigError, ModelStateError, UsageError

ACTIVATIONS = ("sin", "swish")


def _act(name, z, need_grad=False):
    """Activation value and, when asked, its derivative."""
    if name == "sin":
        return np.sin(z), (np.cos(z) if need_grad else None)
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, (s + z * s * (1.0 - s) if need_grad else None)


class DriftNet:
    """Time-dependent tangent vector field ``s(x, t) = proj_x(mlp([features(x), t]))``.

    Parameters are a flat list ``[W0, b0, W1, b1, ...]`` with ``W`` of shape
    ``(fan_in, fan_out)``.
    """

    def __init__(self, manifold, hidden=(512,) * 6, activation="sin", seed=0, zero_last=False, params=None):
        if activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        self.manifold = manifold
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        sizes = (manifold.feature_dim + 1,) + self.hidden + (manifold.tangent_dim,)
        self.sizes = sizes
        if params is None:
            rng = np.random.default_rng(seed)
            params = []
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
                last = i == len(sizes) - 2
                W = np.zeros((a, b)) if (last and zero_last) else rng.standard_normal((a, b)) / np.sqrt(a)
                params += [W, np.zeros(b)]
        self.params = [np.array(p, dtype=float) for p in params]
        self._record = None

    @property
    def shapes(self):
        return [p.shape for p in self.params]

    @property
    def n_params(self):
        return sum(p.size for p in self.params)

    def with_params(self, params):
        """A net sharing this architecture but holding ``params`` (no copy)."""
        other = DriftNet.__new__(DriftNet)
        other.__dict__.update(self.__dict__)
        other.params = params
        other._record = None
        return other

    def _inputs(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = np.asarray(t, dtype=float)
        if t.ndim == 0:
            t = np.full(len(x), float(t))
        return x, np.concatenate([self.manifold.features(x), t[:, None]], axis=1)

    def forward(self, x, t, record=False):
        for p in self.params:
            if not np.all(np.isfinite(p)):
                raise ModelStateError("non-finite network parameters")
        x, h = self._inputs(x, t)
        acts, dacts = [h], []
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            z = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < n_layers - 1:
                h, dz = _act(self.activation, z, record)
                dacts.append(dz)
                acts.append(h)
            else:
                h = z
        out = self.manifold.proj(x, h)
        self._record = (x, acts, dacts) if record else None
        return out

    __call__ = forward

    def backward(self, grad_out):
        """Parameter gradients given the adjoint of the (projected) output."""
        if self._record is None:
            raise UsageError("backward() called without a recorded forward pass")
        x, acts, dacts = self._record
        self._record = None
        g = self.manifold.proj_vjp(x, np.asarray(grad_out, dtype=float))
        n_layers = len(self.params) // 2
        grads = [None] * len(self.params)
        for i in reversed(range(n_layers)):
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.params[2 * i].T) * dacts[i - 1]
        return grads

    def loss_and_grads(self, x, t, target, weights=None):
        """Mean squared Riemannian error ``|s(x, t) - target|^2`` and its parameter gradients."""
        out = self.forward(x, t, record=True)
        r = out - target
        per_row = self.manifold.inner(x, r, r)
        w = np.ones(len(r)) if weights is None else np.asarray(weights, dtype=float)
        denom = max(len(r), 1)
        loss = float(np.sum(w * per_row) / denom)
        grads = self.backward((w / denom)[:, None] * self.manifold.sqnorm_grad(x, r))
        return loss, grads

    def config(self):
        return {"sizes": list(self.sizes), "hidden": list(self.hidden), "activation": self.activation}


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
            raise ConfigError("gradient shapes do not match parameter shapes")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class EMA:
    def __init__(self, params, decay=0.999):
        if not 0.0 < decay < 1.0:
            raise ConfigError("EMA decay must lie in (0, 1)")
        self.decay = decay
        self.shadow = [np.array(p, copy=True) for p in params]

    def update(self, params):
        d = self.decay
        for s, p in zip(self.shadow, params):
            s *= d
            s += (1.0 - d) * p


def adam_step(opt, params, grads):
    opt.step(params, grads)


def ema_update(ema, params):
    ema.update(params)


# -- checkpoint files ----------------------------------------------------------
# Layout: uint64 LE header length, UTF-8 JSON header, then little-endian float64
# blob.  For each net listed in header["nets"]: parameters, Adam first moments,
# Adam second moments, EMA shadow; each group layer-major (W0, b0, W1, ...).

def save_checkpoint(path, header, entries):
    """``entries``: list of dicts with keys name, net, adam, ema."""
    header = dict(header)
    header["nets"] = [
        {"name": e["name"], **e["net"].config(), "shapes": [list(s) for s in e["net"].shapes],
         "adam_t": e["adam"].t if e.get("adam") else 0,
         "adam_lr": e["adam"].lr if e.get("adam") else None,
         "ema_decay": e["ema"].decay if e.get("ema") else None}
        for e in entries
    ]
    head = json.dumps(header, sort_keys=True).encode()
    chunks = []
    for e in entries:
        params = e["net"].params
        m = e["adam"].m if e.get("adam") else [np.zeros_like(p) for p in params]
        v = e["adam"].v if e.get("adam") else [np.zeros_like(p) for p in params]
        ema = e["ema"].shadow if e.get("ema") else params
        for group in (params, m, v, ema):
            chunks += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in group]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(b"".join(chunks))


def read_checkpoint(path):
    """Returns ``(header, arrays)`` where ``arrays[name]`` has params/adam_m/adam_v/ema lists."""
    with open(path, "rb") as fh:
        blob = fh.read()
    (hlen,) = struct.unpack_from("<Q", blob, 0)
    header = json.loads(blob[8: 8 + hlen].decode())
    off = 8 + hlen
    arrays = {}
    for spec in header["nets"]:
        groups = []
        for _ in range(4):
            group = []
            for shape in spec["shapes"]:
                n = int(np.prod(shape))
                group.append(np.frombuffer(blob, "<f8", n, off).astype(float).reshape(shape))
                off += 8 * n
            groups.append(group)
        arrays[spec["name"]] = dict(zip(("params", "adam_m", "adam_v", "ema"), groups))
    if off != len(blob):
        raise ModelStateError(f"{path}: checkpoint size mismatch")
    return header, arrays
