"""Command line interface: ``python -m sheball <command> ...``.

Experiment commands (``lambda``, ``verify``, ``spde``, ``chung``, ``min-grid``,
``run``) take parameters from ``--config FILE.ini`` and/or repeated
``--set key=value`` overrides and write a result directory under ``--out``.
``sample``, ``kernel`` and ``estimate`` write a single CSV.

Exit status: 0 success, 1 a hard check failed or a rerun differed, 2 usage or
schema error, 3 module error.
"""
from __future__ import annotations

import argparse
import configparser
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import io as sio
from . import kernels as K
from . import samplers as smp
from . import smallball as sb
from . import spde
from .errors import DomainError, SchemaError
from .rng import RngStream
from .splitting import SplittingConfig

VERIFY = {"decomposition": "decomposition_check", "d-bound": "d_bound", "recursion": "recursion",
          "entropy": "entropy", "hz-gap": "hz_gap"}
SPDE_STUDIES = {"localization": "localization_rate", "theorem-u": "theorem_u"}


def _common(p: argparse.ArgumentParser, out_default: str = "results"):
    p.add_argument("--seed", type=int, default=0, help="master seed (64-bit)")
    p.add_argument("--threads", type=int, default=1, help="worker threads (results do not change)")
    p.add_argument("--out", default=out_default, help="output directory or file")


def _params(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI file with [experiment] and [params] sections")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one parameter (repeatable)")
    p.add_argument("--id", default="", help="experiment id (directory name)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sheball", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sample", help="sample paths to CSV (path_id, t_index, value)")
    s.add_argument("--process", choices=K.PROCESSES, default="F_fbm14")
    s.add_argument("--n", type=int, default=128, help="grid points")
    s.add_argument("--horizon", type=float, default=1.0)
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--x", type=float, default=0.0, help="torus site for Z_torus")
    _common(s, "paths.csv")

    s = sub.add_parser("kernel", help="covariance matrix to CSV (s, t, value)")
    s.add_argument("--process", choices=K.PROCESSES, default="H_free")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--horizon", type=float, default=1.0)
    _common(s, "kernel.csv")

    s = sub.add_parser("estimate", help="small-ball estimates to CSV")
    s.add_argument("--process", choices=K.PROCESSES, default="BM")
    s.add_argument("--eps", type=float, nargs="+", required=True)
    s.add_argument("--n", type=int, default=256, help="grid points")
    s.add_argument("--horizon", type=float, default=1.0)
    s.add_argument("--method", choices=("plain", "splitting"), default="splitting")
    s.add_argument("--count", type=int, default=10**5, help="paths for plain Monte Carlo")
    s.add_argument("--particles", type=int, default=200)
    s.add_argument("--repetitions", type=int, default=10)
    _common(s, "estimates.csv")

    s = sub.add_parser("lambda", help="fit the small-ball constant (kind lambda_fit)")
    _params(s)
    _common(s)

    s = sub.add_parser("verify", help="deterministic and kernel-level checks")
    s.add_argument("what", choices=sorted(VERIFY))
    _params(s)
    _common(s)

    s = sub.add_parser("spde", help="SPDE studies, or a single field snapshot to CSV")
    s.add_argument("--study", choices=sorted(SPDE_STUDIES) + ["field"], default="localization")
    s.add_argument("--sigma", default="cos", help="for --study field")
    s.add_argument("--u0", default="sin_pi", help="for --study field")
    s.add_argument("--m", type=int, default=64, help="for --study field")
    s.add_argument("--horizon", type=float, default=0.01, help="for --study field")
    _params(s)
    _common(s)

    s = sub.add_parser("chung", help="Chung-type running-infimum diagnostic")
    _params(s)
    _common(s)

    s = sub.add_parser("min-grid", help="min-over-grid small-ball exponent")
    _params(s)
    _common(s)

    s = sub.add_parser("run", help="run an experiment INI file")
    s.add_argument("config_file")
    _common(s)

    s = sub.add_parser("rerun", help="re-execute a manifest and compare digests")
    s.add_argument("manifest")
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--out", default=None, help="defaults to the manifest's results root")
    return ap


def _spec(kind: str, args) -> ex.ExperimentSpec:
    params, eid = {}, args.id
    if args.config:
        cp = configparser.ConfigParser(interpolation=None)
        with open(args.config, encoding="utf-8") as f:
            cp.read_file(f)
        if cp.has_section("experiment"):
            k = cp["experiment"].get("kind", kind)
            if k != kind:
                raise SchemaError(f"experiment.kind: {k!r} does not match command ({kind!r})")
            eid = eid or cp["experiment"].get("id", "")
        if cp.has_section("params"):
            params.update(cp["params"])
    for item in args.set:
        if "=" not in item:
            raise SchemaError(f"--set {item!r}: expected KEY=VALUE")
        k, v = item.split("=", 1)
        params[k.strip()] = v.strip()
    return ex.ExperimentSpec(kind, params, eid, args.seed)


def _report(man: ex.ExperimentManifest) -> int:
    print(Path(man.directory) / "summary.md")
    print((Path(man.directory) / "summary.md").read_text(encoding="utf-8"))
    return 1 if man.failures else 0


def _cmd_sample(args) -> int:
    grid = smp.TimeGrid(args.n, args.horizon)
    rng = RngStream(args.seed)
    smp.set_threads(args.threads)
    if args.process == "F_fbm14":
        paths = smp.sample_fbm14(grid, args.count, rng).paths
    elif args.process == "Z_torus":
        z = smp.sample_Z_torus(grid, 2, K.Z_MODES_DEFAULT, args.count, rng)
        paths = z.values[:, :, 0]
    else:
        paths = smp.sample_gaussian_path(K.kernel(args.process, args.horizon), grid, args.count, rng).paths
    sio.write_csv(args.out, sio.paths_rows(paths), ("path_id", "t_index", "value"))
    print(args.out)
    return 0


def _cmd_kernel(args) -> int:
    t = smp.TimeGrid(args.n, args.horizon).times
    M = K.kernel(args.process, args.horizon).matrix(t)
    sio.write_csv(args.out, sio.kernel_rows(t, M), ("s", "t", "value"))
    print(args.out)
    return 0


def _cmd_estimate(args) -> int:
    rng = RngStream(args.seed)
    q = sb.SmallBallQuery(args.process, max(args.eps), (0.0, args.horizon), args.horizon, args.n)
    if args.method == "plain":
        paths = sb.sample_paths(q, args.count, rng)
        recs = [sb.estimate_plain(q.with_eps(e), args.count, rng, paths) for e in args.eps]
    else:
        cfg = SplittingConfig(particles=args.particles, repetitions=args.repetitions)
        recs = sb.estimate_splitting(q, cfg, rng, args.eps, args.threads)
    sio.write_csv(args.out, [r.row() for r in recs], sio.ESTIMATE_COLUMNS)
    print(sio.dumps_csv([r.row() for r in recs], sio.ESTIMATE_COLUMNS), end="")
    return 0


def _cmd_field(args) -> int:
    cfg = spde.SpdeConfig(m=args.m, horizon=args.horizon, sigma=args.sigma, u0=args.u0)
    noise = spde.draw_noise(cfg, 1, RngStream(args.seed))
    u = spde.solve_u(cfg, noise).values[0]
    out = Path(args.out)
    out = out / "field.csv" if out.suffix != ".csv" else out
    rows = ({"t_index": i, "x_index": j, "value": float(u[i, j])}
            for i in range(u.shape[0]) for j in range(u.shape[1]))
    sio.write_csv(out, rows, ("t_index", "x_index", "value"))
    print(out)
    return 0


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        cmd = args.command
        if cmd == "sample":
            return _cmd_sample(args)
        if cmd == "kernel":
            return _cmd_kernel(args)
        if cmd == "estimate":
            return _cmd_estimate(args)
        if cmd == "rerun":
            res = ex.rerun(args.manifest, args.out, args.threads)
            print(res["manifest"].directory)
            print("identical" if res["identical"] else "DIFFERENT: " + ", ".join(res["mismatched"]))
            return 0 if res["identical"] else 1
        if cmd == "run":
            spec = ex.ExperimentSpec.from_ini(args.config_file)
            return _report(ex.run(spec, args.out, args.threads, args.seed or None))
        if cmd == "spde" and args.study == "field":
            return _cmd_field(args)
        kind = {"lambda": "lambda_fit", "chung": "chung_diagnostic", "min-grid": "min_grid"}.get(cmd)
        if cmd == "verify":
            kind = VERIFY[args.what]
        elif cmd == "spde":
            kind = SPDE_STUDIES[args.study]
        return _report(ex.run(_spec(kind, args), args.out, args.threads))
    except SchemaError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ex.ExperimentError, DomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
