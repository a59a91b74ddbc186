"""Command-line interface: build, project, reconstruct, bench.

Exit codes: 0 success, 1 I/O error, 2 invalid input, 3 inference diagnostics failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .align import DegenerateConfigurationError, gpa
from .inference import (InferenceDiagnosticsError, LikelihoodConfig, ReconstructOptions,
                        reconstruct)
from .mesh import (DomainMask, MeshFormatError, MeshValidationError, load_mask, load_mesh,
                   save_mesh)
from .model import ModelError, build_empirical, load_model, save_model
from .project import project_model

logger = logging.getLogger("shapeprior")

EXIT_OK, EXIT_IO, EXIT_INVALID, EXIT_DIAGNOSTICS = 0, 1, 2, 3


class UsageError(ValueError):
    pass


# --- config files --------------------------------------------------------------------

def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            if not k:
                raise UsageError(f"{path}:{n}: empty key")
            out[k] = v
    return out


def _floats(s) -> list:
    return [float(x) for x in str(s).split(",") if x.strip()]


def _words(s) -> tuple:
    return tuple(x.strip() for x in str(s).split(",") if x.strip())


class _Config:
    """Typed access to a config dict that complains about unused keys."""

    def __init__(self, raw: dict):
        self.raw = dict(raw)
        self.used = set()

    def get(self, key, conv, default):
        if key not in self.raw:
            return default
        self.used.add(key)
        try:
            return conv(self.raw[key])
        except ValueError as exc:
            raise UsageError(f"bad value for {key!r}: {exc}") from None

    def finish(self):
        extra = sorted(set(self.raw) - self.used)
        if extra:
            raise UsageError(f"unknown config keys: {', '.join(extra)}")


# --- commands ------------------------------------------------------------------------

def _mesh_files(directory) -> list:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    return sorted(d.glob("*.ply"))


def cmd_build(args) -> int:
    files = _mesh_files(args.meshes)
    if len(files) < 2:
        raise UsageError("need at least two .ply meshes")
    meshes = [load_mesh(f) for f in files]
    ref = meshes[0]
    for f, m in zip(files, meshes):
        if m.n_vertices != ref.n_vertices:
            raise UsageError(f"{f.name}: {m.n_vertices} vertices, expected {ref.n_vertices}")
    mask = load_mask(args.mask, ref.n_vertices) if args.mask else DomainMask.full(ref.n_vertices)
    fields = [m.vertices - ref.vertices for m in meshes]
    aligned = gpa(fields, mask, ref, rotations=args.rotations)
    if not aligned.converged:
        logger.warning("GPA did not converge in %d iterations", aligned.iterations)
    model = build_empirical(aligned.fields, ref, args.rank)
    save_model(model, args.out)
    lam = model.eigenvalues
    print(f"rank {model.rank}")
    print(f"eigenvalues max {lam[0]:.6g} min {lam[-1]:.6g} total {lam.sum():.6g}")
    return EXIT_OK


def cmd_project(args) -> int:
    model = load_model(args.model)
    mask = load_mask(args.mask, model.n_vertices)
    out = project_model(model, mask, rotations=args.rotations)
    save_model(out, args.out)
    print(f"rank {model.rank} -> {out.rank}")
    print(f"eigenvalue mass {model.eigenvalues.sum():.6g} -> {out.eigenvalues.sum():.6g}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    model = load_model(args.model)
    target = load_mesh(args.target)
    mask = load_mask(args.mask, model.n_vertices) if args.mask else None
    if args.sigma <= 0:
        raise UsageError("--sigma must be positive")
    opts = ReconstructOptions(mask=mask, project=not args.no_project, rotations=True,
                              iters=args.iters, n_samples=args.samples,
                              burn_in=min(args.burn_in, max(args.samples - 1, 0)), seed=args.seed,
                              cfg=LikelihoodConfig(sigma=args.sigma), radius=args.radius)
    summary = reconstruct(model, target, args.method, opts)
    prefix = Path(args.out_prefix)
    if prefix.parent and not prefix.parent.exists():
        prefix.parent.mkdir(parents=True)
    save_mesh(summary.model.reference.with_vertices(summary.map_shape),
              str(prefix) + "_map.ply")
    with open(str(prefix) + "_variance.csv", "w", newline="") as fh:
        fh.write("index,var_mm2\n")
        for i, v in enumerate(summary.variance):
            fh.write(f"{i},{float(v)!r}\n")
    info = {
        "method": args.method,
        "seed": args.seed,
        "model_rank": int(summary.model.rank),
        "observed_vertices": None if summary.mask is None else len(summary.mask),
        "n_samples": int(summary.n_samples),
        "acceptance": {k: float(v) for k, v in sorted(summary.acceptance.items())},
        "final_log_posterior": _json_float(summary.map_log_posterior),
        "euler": [float(x) for x in summary.map_params.euler],
        "translation": [float(x) for x in summary.map_params.translation],
    }
    with open(str(prefix) + "_summary.json", "w") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)
        fh.write("\n")
    # Wall time goes to the log so that output files stay byte-identical across runs.
    logger.info("runtime %.3f s", summary.runtime)
    print(f"wrote {prefix}_map.ply, {prefix}_variance.csv, {prefix}_summary.json")
    return EXIT_OK


def _json_float(x):
    x = float(x)
    return x if np.isfinite(x) else None


EXPERIMENTS = ("hinge", "consistency", "loo")


def cmd_bench(args) -> int:
    from . import bench
    from .synthetic import HingeConfig, SyntheticFamilyConfig, cut_mask, generate_family

    if args.experiment not in EXPERIMENTS:
        raise UsageError(f"unknown experiment {args.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
    cfg = _Config(read_config(args.config) if args.config else {})
    seed = args.seed
    if args.experiment == "hinge":
        hc = HingeConfig(arm_length=cfg.get("arm_length", float, 10.0),
                         angle_mean=cfg.get("angle_mean", float, np.pi),
                         points_per_arm=cfg.get("points_per_arm", int, 10),
                         n_shapes=cfg.get("n_shapes", int, 200), seed=seed)
        phis = cfg.get("phis", _floats, [0.1, 0.2, 0.3, 0.4, 0.5])
        n_eval = cfg.get("n_eval", int, 2000)
        cfg.finish()
        report = bench.hinge_experiment(hc, phis, n_eval)
        bench.export_hinge(report, args.out)
        if args.svg:
            xs = sorted({r.phi for r in report.rows})
            series = {v: [report.get(p, v).observed_arm_relerr for p in xs]
                      for v in bench.HINGE_VARIANTS}
            bench.write_svg(args.svg, xs, series, "phi", "relative observed-arm error")
    elif args.experiment == "consistency":
        fam = SyntheticFamilyConfig(n_shapes=cfg.get("n_shapes", int, 30), seed=seed)
        ratio = cfg.get("ratio", float, 0.3)
        rank = cfg.get("rank", int, 3)
        n_targets = cfg.get("n_targets", int, 500)
        variants = cfg.get("variants", _words, ("agnostic", "specific", "projected"))
        cfg.finish()
        family = generate_family(fam)
        mask = cut_mask(family.reference, ratio)
        models = bench.consistency_models(family.fields, family.reference, mask)
        curves = []
        for v in variants:
            if v not in models:
                raise UsageError(f"unknown variant {v!r}")
            c = bench.self_consistency(models[v], mask, rank, n_targets, seed)
            c.variant = v
            curves.append(c)
        with open(args.out, "w", newline="") as fh:
            fh.write("variant,k,kl\n")
            for c in curves:
                for k, kl in zip(c.k, c.kl):
                    fh.write(f"{c.variant},{k},{kl!r}\n")
        if args.svg:
            xs = curves[0].k if curves else []
            bench.write_svg(args.svg, xs, {c.variant: c.kl for c in curves}, "k", "symmetric KL")
    else:
        fam = SyntheticFamilyConfig(n_shapes=cfg.get("n_shapes", int, 30), seed=seed)
        ratios = cfg.get("ratios", _floats, [0.2, 0.5, 0.8])
        methods = cfg.get("methods", _words, ("nicp", "mh"))
        variants = cfg.get("variants", _words, ("agnostic", "specific", "projected"))
        lc = bench.LOOConfig(n_trials=cfg.get("n_trials", int, 10),
                             iters=cfg.get("iters", int, 150),
                             n_samples=cfg.get("n_samples", int, 4000),
                             burn_in=cfg.get("burn_in", int, 1000),
                             landmark_noise=cfg.get("landmark_noise", float, 0.0),
                             seed=seed, threads=args.threads)
        cfg.finish()
        for m in methods:
            if m not in ("nicp", "mh"):
                raise UsageError(f"unknown method {m!r}")
        for v in variants:
            if v not in bench.LOO_VARIANTS:
                raise UsageError(f"unknown variant {v!r}")
        report = bench.leave_one_out(fam, ratios, methods, variants, lc)
        bench.export_report(report, args.out)
        if args.svg:
            series = {f"{m}/{v}": [report.mean(r, m, v, "Omega") for r in ratios]
                      for m in methods for v in variants}
            bench.write_svg(args.svg, ratios, series, "observed ratio", "Omega MSE (mm^2)")
    print(f"wrote {args.out}")
    return EXIT_OK


# --- parser --------------------------------------------------------------------------

def _threads(value) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("threads must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shapeprior", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=_threads, default=None,
                   help="worker count (default: $SHAPEPRIOR_THREADS or 1)")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="align meshes and build an empirical model")
    b.add_argument("--meshes", required=True, help="directory of corresponded .ply meshes")
    b.add_argument("--mask", help="alignment mask (one vertex index per line)")
    b.add_argument("--rotations", action="store_true", help="align rotations as well")
    b.add_argument("--rank", type=int, default=None)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build)

    pr = sub.add_parser("project", help="realign a model on a mask")
    pr.add_argument("--model", required=True)
    pr.add_argument("--mask", required=True)
    pr.add_argument("--rotations", action="store_true")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_project)

    r = sub.add_parser("reconstruct", help="fit a model to a partial target")
    r.add_argument("--model", required=True)
    r.add_argument("--target", required=True)
    r.add_argument("--method", choices=("nicp", "mh", "analytic"), default="nicp")
    r.add_argument("--mask", help="observed domain; estimated from the target if omitted")
    r.add_argument("--iters", type=int, default=150)
    r.add_argument("--samples", type=int, default=15000)
    r.add_argument("--burn-in", type=int, default=1000)
    r.add_argument("--sigma", type=float, default=1.0)
    r.add_argument("--radius", type=float, default=2.0)
    r.add_argument("--no-project", action="store_true", help="use the model as is")
    r.add_argument("--out-prefix", required=True)
    r.set_defaults(func=cmd_reconstruct)

    be = sub.add_parser("bench", help="run a synthetic validation experiment")
    be.add_argument("--experiment", required=True)
    be.add_argument("--config")
    be.add_argument("--out", required=True)
    be.add_argument("--svg", help="optional SVG plot of the main report column")
    be.set_defaults(func=cmd_bench)
    return p


def resolve_threads(value) -> int:
    if value is not None:
        return value
    env = os.environ.get("SHAPEPRIOR_THREADS")
    if env:
        try:
            return _threads(env)
        except (ValueError, argparse.ArgumentTypeError):
            raise UsageError(f"invalid SHAPEPRIOR_THREADS={env!r}") from None
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.threads = resolve_threads(args.threads)
        return args.func(args)
    except InferenceDiagnosticsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIAGNOSTICS
    except (UsageError, MeshValidationError, MeshFormatError, ModelError,
            DegenerateConfigurationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
