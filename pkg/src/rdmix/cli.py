"""Command-line entry point: ``rdmix <command> ...``.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.
"""
import argparse
import copy
import hashlib
import json
import os
import subprocess
import sys
from dataclasses import replace

import numpy as np

from . import data as D
from .bridges import NoiseSchedule
from .errors import ConfigError, DataFormatError, RdmError, UsageError
from .evaluate import convergence_curve, nll_suite, prediction_curve, trajectory_mmd, write_csv, write_summary
from .manifold import Euclidean, FlatTorus, Hyperboloid, Sphere
from .mesh import MeshManifold, compute_basis, grid_mesh, load_basis, load_mesh, save_basis
from .net import read_checkpoint
from .sim import path_states
from .train import TrainConfig, default_family, fit, load_model, save_model, write_metrics

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULTS = {
    "manifold": {"kind": "sphere", "dim": 2, "basis": "", "basis_k": 200, "weight_kind": "diffusion", "t_diff_k": 0},
    "schedule": {"kind": "constant", "sigma": 1.0, "sigma0": 0.1, "sigma1": 1.0, "T": 1.0},
    "bridge": {"family": ""},
    "prior": {"kind": "default", "scale": 1.0},
    "net": {"width": 512, "layers": 6, "activation": "", "zero_last": False},
    "train": {
        "batch_size": 256, "iterations": 1000, "lr": 1e-3, "n_steps": 15, "n_times": 4,
        "val_interval": 100, "patience": 0, "seed": -1, "time_mode": "time_scaled",
        "ema_decay": 0.999, "val_steps": 50, "val_points": 256, "t_star": 0.0,
        "record_wall_time": False,
    },
    "data": {"path": "", "split_seed": 0},
    "eval": {"nll_steps": 100, "test_nll": False},
    "output": {"dir": "run"},
}

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


# -- configuration -----------------------------------------------------------------

def _merge(base, extra, where=""):
    for key, val in extra.items():
        name = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {name!r} must be a table")
            _merge(base[key], val, name + ".")
        else:
            if isinstance(val, dict):
                raise ConfigError(f"config key {name!r} is not a table")
            ref = base[key]
            if isinstance(ref, bool) and not isinstance(val, bool):
                raise ConfigError(f"config key {name!r} must be true or false")
            if isinstance(ref, float) and isinstance(val, int) and not isinstance(val, bool):
                val = float(val)
            if type(ref) is not type(val) and not (isinstance(ref, float) and isinstance(val, float)):
                raise ConfigError(f"config key {name!r} expects {type(ref).__name__}, got {type(val).__name__}")
            base[key] = val


def _parse_value(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_config(path=None, overrides=()):
    """Defaults, then the TOML file, then dotted ``key=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    base_dir = os.getcwd()
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file {path!r} not found")
        with open(path, "rb") as fh:
            try:
                _merge(cfg, tomllib.load(fh))
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        base_dir = os.path.dirname(os.path.abspath(path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        nested = {parts[-1]: _parse_value(text.strip())}
        for p in reversed(parts[:-1]):
            nested = {p: nested}
        _merge(cfg, nested)
    for sec, key in (("data", "path"), ("manifold", "basis"), ("output", "dir")):
        if cfg[sec][key]:
            cfg[sec][key] = os.path.normpath(os.path.join(base_dir, cfg[sec][key]))
    return cfg


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             timeout=10, cwd=os.path.dirname(os.path.abspath(__file__)))
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def resolve_seed(value):
    if value is not None and value >= 0:
        return int(value)
    env = os.environ.get("MM_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"MM_SEED={env!r} is not an integer") from None
    return 0


def schedule_from(cfg):
    s = cfg["schedule"]
    if s["kind"] == "constant":
        return NoiseSchedule.constant(s["sigma"], s["T"])
    if s["kind"] == "linear":
        return NoiseSchedule.linear(s["sigma0"], s["sigma1"], s["T"])
    raise ConfigError(f"schedule.kind must be 'constant' or 'linear', got {s['kind']!r}")


def train_config_from(cfg, seed):
    t, n = cfg["train"], cfg["net"]
    return TrainConfig(
        batch_size=t["batch_size"], iterations=t["iterations"], lr=t["lr"], n_steps=t["n_steps"],
        n_times=t["n_times"], val_interval=t["val_interval"], patience=t["patience"], seed=seed,
        time_mode=t["time_mode"], ema_decay=t["ema_decay"], val_steps=t["val_steps"],
        val_points=t["val_points"], t_star=t["t_star"] or None, width=n["width"], layers=n["layers"],
        activation=n["activation"] or None, zero_last=n["zero_last"], record_wall_time=t["record_wall_time"],
    )


def dataset_from(cfg):
    path = cfg["data"]["path"]
    if not path:
        raise ConfigError("data.path is required")
    if not os.path.exists(path):
        raise ConfigError(f"data.path: {path!r} does not exist")
    ds = D.load_dataset(path)
    kind = cfg["manifold"]["kind"]
    if ds.manifold.spec()["kind"] != kind:
        raise ConfigError(f"manifold.kind={kind!r} but the dataset lives on {ds.manifold.spec()['kind']!r}")
    if kind not in ("mesh", "hyperboloid") and ds.manifold.dim != cfg["manifold"]["dim"]:
        raise ConfigError(f"manifold.dim={cfg['manifold']['dim']} but the dataset has dimension {ds.manifold.dim}")
    if kind == "mesh":
        m = cfg["manifold"]
        mesh = ds.manifold.mesh
        basis = load_basis(m["basis"], mesh) if m["basis"] else compute_basis(mesh, m["basis_k"], m["weight_kind"])
        ds.manifold.basis = with_t_diff_index(basis, m["t_diff_k"])
        ds.manifold.source = os.path.join(path, "mesh.off")
    return ds


def _provenance(cfg, seed):
    return {"git": git_describe(), "config_hash": config_hash(cfg), "seed": seed}


def _mesh_for_checkpoint(header, mesh_path=None):
    path = mesh_path or header.get("mesh_path")
    if not path:
        raise UsageError("mesh checkpoint without a mesh path; pass --mesh")
    return MeshManifold(load_mesh(path, normalize=False), source=path)


def _load(checkpoint, mesh_path=None):
    if not os.path.exists(checkpoint):
        raise UsageError(f"checkpoint {checkpoint!r} not found")
    header, _ = read_checkpoint(checkpoint)
    manifold = _mesh_for_checkpoint(header, mesh_path) if header["manifold"]["kind"] == "mesh" else None
    return load_model(checkpoint, manifold)


# -- commands ------------------------------------------------------------------------

def cmd_train(args):
    cfg = load_config(args.config, args.set)
    seed = resolve_seed(cfg["train"]["seed"])
    cfg["train"]["seed"] = seed
    out = args.out or cfg["output"]["dir"]
    ds = dataset_from(cfg)
    tcfg = train_config_from(cfg, seed)
    schedule = schedule_from(cfg)
    prior = D.prior_from_spec(ds.manifold, cfg["prior"])
    family = cfg["bridge"]["family"] or default_family(ds.manifold)
    train_ds, valid_ds, test_ds = D.split(ds, cfg["data"]["split_seed"])
    os.makedirs(out, exist_ok=True)
    prov = _provenance(cfg, seed)
    metrics_path = os.path.join(out, "metrics.jsonl")
    with open(metrics_path, "w") as fh:
        def emit(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

        res = fit(tcfg, train_ds.points, ds.manifold, schedule, valid_ds.points, prior, family, emit)
    extra = {"provenance": prov}
    if isinstance(ds.manifold, MeshManifold):
        extra["mesh_path"] = ds.manifold.source
    save_model(os.path.join(out, "checkpoint.bin"), res, tcfg, extra)
    summary = {"task": "train", **prov, "iterations": res.iteration, "best_iter": res.best_iter,
               "best_val_nll": res.best_val, "n_train": len(train_ds), "n_valid": len(valid_ds),
               "n_test": len(test_ds)}
    if cfg["eval"]["test_nll"]:
        v = res.model.nll(test_ds.points, cfg["eval"]["nll_steps"])
        summary.update(nll_mean=float(np.mean(v)), nll_std=float(np.std(v)))
    write_summary(os.path.join(out, "summary.json"), summary)
    print(f"trained {res.iteration} iterations -> {out}")
    return EXIT_OK


def cmd_sample(args):
    model, header = _load(args.checkpoint, args.mesh)
    if args.manifold and args.manifold != header["manifold"]["kind"]:
        raise UsageError(f"checkpoint manifold is {header['manifold']['kind']!r}, not {args.manifold!r}")
    if args.n < 0 or args.steps < 1:
        raise UsageError("--n must be >= 0 and --steps >= 1")
    seed = resolve_seed(args.seed)
    rng = np.random.default_rng(seed)
    x = model.sample(args.n, rng, args.mode, args.steps)
    prov = header.get("provenance", {})
    comments = [f"mode={args.mode} steps={args.steps} seed={seed} n={args.n}",
                f"git={git_describe()} config_hash={prov.get('config_hash', 'none')}"]
    D.save_points_csv(args.out, model.manifold, x, comments)
    return EXIT_OK


def cmd_nll(args):
    model, header = _load(args.checkpoint, args.mesh)
    ds = D.load_dataset(args.data)
    if ds.manifold.spec()["kind"] != header["manifold"]["kind"]:
        raise UsageError("dataset and checkpoint live on different manifolds")
    pts = ds.points
    if args.split != "all":
        parts = dict(zip(("train", "valid", "test"), D.split(ds, args.split_seed)))
        pts = parts[args.split].points
    seed = header.get("seed", 0)
    rep = nll_suite([(seed, model, pts)], args.steps)
    prov = header.get("provenance", {})
    summary = {"task": "nll", "seed": seed, "git": git_describe(), "config_hash": prov.get("config_hash"),
               "split": args.split, "nll_mean": rep["nll_mean"], "nll_std": rep["nll_std"],
               "steps": args.steps, "nll_mean_2n": rep["nll_mean_2n"], "steps_2n": 2 * args.steps,
               "step_change": rep["step_change"], "mmd": None}
    if args.out:
        write_summary(args.out, summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


TWO_WAY_STEPS = (5, 10, 15, 25, 50, 100, 500)
ABLATION_TIMES = (0.2, 0.4, 0.6, 0.8)


def _diag_two_way(args, cfg, seed, comments):
    """Path MMD between n-step and 500-step bridges (two-way and one-way) at fixed times."""
    rng = np.random.default_rng(seed)
    schedule = schedule_from(cfg)
    if cfg["data"]["path"]:
        ds = dataset_from(cfg)
        manifold, pool = ds.manifold, ds.points
    else:
        manifold = Sphere(2)
        pool = D.sample_vmf([0.0, 0.0, 1.0], 10.0, 4096, rng)
    family = cfg["bridge"]["family"] or default_family(manifold)
    prior = D.prior_from_spec(manifold, cfg["prior"])
    n = args.n
    x = pool[rng.integers(0, len(pool), n)]
    y = prior.sample(rng, n)
    times = schedule.T * np.array(ABLATION_TIMES)
    ref = path_states(manifold, family, x, y, times, schedule, 500, rng)
    rows = []
    for k in TWO_WAY_STEPS:
        a = path_states(manifold, family, x, y, times, schedule, k, rng)
        b = path_states(manifold, family, x, y, times, schedule, k, rng, two_way=False)
        rows.append((k, trajectory_mmd(a, ref, manifold), trajectory_mmd(b, ref, manifold)))
    write_csv(os.path.join(args.out, "two_way_steps.csv"), ["n_steps", "mmd", "mmd_one_way"], rows, comments)


def _diag_convergence(args, seed, comments):
    if not args.checkpoint:
        raise UsageError("the convergence task needs --checkpoint")
    model, _ = _load(args.checkpoint, args.mesh)
    rng = np.random.default_rng(seed)
    traj = model.sample(args.n, rng, "sde", args.steps, return_path=True)
    traj_curve = convergence_curve(model.manifold, traj.states, traj.final)
    pred_curve = prediction_curve(model, traj)
    rows = list(zip(traj.times, traj_curve, pred_curve))
    write_csv(os.path.join(args.out, "convergence.csv"), ["t", "traj_dist", "pred_dist"], rows, comments)


def _diag_time_ablation(args, cfg, seed, comments):
    ds = dataset_from(cfg)
    schedule = schedule_from(cfg)
    prior = D.prior_from_spec(ds.manifold, cfg["prior"])
    family = cfg["bridge"]["family"] or default_family(ds.manifold)
    rows = []
    for s in range(seed, seed + args.repeats):
        tr, va, _ = D.split(ds, s)
        vals = []
        for mode in ("uniform", "time_scaled"):
            tcfg = train_config_from(cfg, s)
            tcfg.time_mode = mode
            res = fit(tcfg, tr.points, ds.manifold, schedule, va.points, prior, family)
            vals.append(res.best_val)
        rows.append((s, *vals))
    write_csv(os.path.join(args.out, "time_ablation.csv"), ["seed", "uniform", "time_scaled"], rows, comments)


def cmd_diagnose(args):
    cfg = load_config(args.config, args.set)
    seed = resolve_seed(args.seed)
    os.makedirs(args.out, exist_ok=True)
    prov = _provenance(cfg, seed)
    comments = [f"task={args.task} seed={seed}", f"git={prov['git']} config_hash={prov['config_hash']}"]
    if args.task == "two-way-steps":
        _diag_two_way(args, cfg, seed, comments)
    elif args.task == "convergence":
        _diag_convergence(args, seed, comments)
    elif args.task == "time-ablation":
        _diag_time_ablation(args, cfg, seed, comments)
    else:
        raise UsageError(f"unknown diagnose task {args.task!r}")
    return EXIT_OK


def cmd_data_gen(args):
    seed = resolve_seed(args.seed)
    rng = np.random.default_rng(seed)
    if args.kind == "vmf":
        ds = D.gen_vmf(np.array(args.mu), args.kappa, args.n, rng)
    elif args.kind == "wrapped-gaussian":
        spec = D.WrappedGaussianSpec.random(args.dim, rng, args.scale)
        ds = D.gen_wrapped_gaussian(spec, args.n, rng)
    elif args.kind == "mesh-eig":
        mesh = load_mesh(args.mesh, normalize=args.normalize) if args.mesh else grid_mesh(args.grid)
        ds = D.gen_mesh_target(mesh, args.k, args.n, rng)
    elif args.kind == "sphere-csv":
        ds = D.load_sphere_csv(args.input)
    elif args.kind == "torus-csv":
        ds = D.load_torus_csv(args.input, args.dim)
    elif args.kind == "gaussian":
        ds = D.Dataset(Euclidean(args.dim), args.scale * rng.standard_normal((args.n, args.dim)), "gaussian")
    elif args.kind == "hyperbolic":
        H = Hyperboloid(2)
        ds = D.Dataset(H, D.WrappedNormalPrior(H, args.scale).sample(rng, args.n), "wrapped_normal_H2")
    else:
        raise UsageError(f"unknown data kind {args.kind!r}")
    ds.source = ds.source or f"data-gen {args.kind} seed={seed}"
    D.save_dataset(ds, args.out)
    print(f"{len(ds)} points -> {args.out}")
    return EXIT_OK


def with_t_diff_index(basis, k):
    """Set the diffusion time to ``1 / lambda_k`` (1-based); ``k = 0`` keeps the basis as is."""
    if k == 0:
        return basis
    if not 0 < k <= basis.K:
        raise ConfigError(f"manifold.t_diff_k must lie in [1, {basis.K}], got {k}")
    return replace(basis, t_diff=1.0 / float(basis.eigenvalues[k - 1]))


def cmd_mesh_basis(args):
    mesh = load_mesh(args.mesh, normalize=args.normalize)
    basis = with_t_diff_index(compute_basis(mesh, args.k, args.weights), args.t_diff_k)
    save_basis(basis, args.out)
    print(f"{basis.K} eigenpairs, lambda_K={basis.eigenvalues[-1]:.6g} -> {args.out}")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="rdmix", description="Riemannian diffusion mixtures of bridges.")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    def cfg_args(sp):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted override")

    sp = sub.add_parser("train", help="fit forward/backward drift nets")
    cfg_args(sp)
    sp.add_argument("--out", help="output directory (default: output.dir)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="draw samples from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--mode", choices=("sde", "ode"), default="sde")
    sp.add_argument("--steps", type=int, default=100)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--manifold", help="expected manifold kind; mismatch is an error")
    sp.add_argument("--mesh", help="mesh file for mesh checkpoints")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("nll", help="negative log-likelihood of a dataset")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--steps", type=int, default=100)
    sp.add_argument("--split", choices=("all", "train", "valid", "test"), default="test")
    sp.add_argument("--split-seed", type=int, default=0)
    sp.add_argument("--mesh")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_nll)

    sp = sub.add_parser("diagnose", help="diagnostic tables")
    cfg_args(sp)
    sp.add_argument("--task", required=True, choices=("two-way-steps", "convergence", "time-ablation"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--mesh")
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--steps", type=int, default=100)
    sp.add_argument("--repeats", type=int, default=3)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("data-gen", help="write a dataset directory")
    sp.add_argument("--kind", required=True,
                    choices=("vmf", "wrapped-gaussian", "mesh-eig", "sphere-csv", "torus-csv", "gaussian", "hyperbolic"))
    sp.add_argument("--n", type=int, default=10000)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--dim", type=int, default=2)
    sp.add_argument("--scale", type=float, default=0.2)
    sp.add_argument("--kappa", type=float, default=10.0)
    sp.add_argument("--mu", type=float, nargs=3, default=[0.0, 0.0, 1.0])
    sp.add_argument("--k", type=int, default=1)
    sp.add_argument("--mesh")
    sp.add_argument("--grid", type=int, default=32)
    sp.add_argument("--normalize", action="store_true")
    sp.add_argument("--input")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_data_gen)

    sp = sub.add_parser("mesh-basis", help="compute and store a spectral basis")
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--k", type=int, default=200)
    sp.add_argument("--weights", choices=("diffusion", "biharmonic"), default="diffusion")
    sp.add_argument("--t-diff-k", type=int, default=0, help="diffusion time 1/lambda_k (default 1/lambda_K)")
    sp.add_argument("--normalize", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_mesh_basis)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=max(1, args.threads)):
                return args.func(args)
        return args.func(args)
    except (ConfigError, UsageError, DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RdmError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
