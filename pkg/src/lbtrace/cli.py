"""Command line entry point: ``lbtrace run ...``."""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .exceptions import LBTraceError
from .harness import (ExperimentConfig, eigen_eoc, emit_reports, run_example1, run_example2,
                      run_example3)
from .solvers import DELTA_CLASSIFY, EPS_RANK

_DEFAULT_SURFACE = {1: "sphere", 2: "sphere", 3: "tooth"}


def _sweep(text):
    try:
        vals = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad sweep {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty sweep")
    return vals


def build_parser():
    p = argparse.ArgumentParser(prog="lbtrace", description="Trace finite elements for the "
                                "Laplace-Beltrami operator on implicit surfaces.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one of the reference experiments",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    r.add_argument("--example", type=int, choices=(1, 2, 3), default=1,
                   help="1: sphere source problem, 2: sphere spectrum, 3: tooth spectrum")
    r.add_argument("--surface", default=None,
                   help="sphere, tooth or file:<json> (default depends on --example)")
    r.add_argument("--N", type=int, default=16, help="cubes per axis of the background grid")
    r.add_argument("--k", type=int, choices=(1, 2), default=1, help="polynomial degree")
    r.add_argument("--q", type=int, default=0, help="Gauss order, raised to 2k+2 if lower")
    r.add_argument("--c", type=float, default=1.0, help="reaction coefficient (example 1)")
    r.add_argument("--eigen", choices=("cholesky", "rank-completing"), default="rank-completing",
                   help="eigensolver for the pencil (A, B)")
    r.add_argument("--tau", type=float, default=None,
                   help="perturbation size; None means 1e-2 (|A|_F + |B|_F)")
    r.add_argument("--delta", type=float, default=DELTA_CLASSIFY, help="classification threshold")
    r.add_argument("--eps-rank", type=float, default=EPS_RANK, help="relative rank tolerance")
    r.add_argument("--lam-max", type=float, default=None,
                   help="largest eigenvalue computed; None means 36 for example 2 "
                   "and 5 for example 3")
    r.add_argument("--seed", type=int, default=0, help="seed of the random perturbation")
    r.add_argument("--sweep", type=_sweep, default=(), help="comma separated list of N")
    r.add_argument("--workers", type=int, default=1, help="threads for quadrature and assembly")
    r.add_argument("--out", default="lbtrace_out", help="output directory")
    r.add_argument("--dump-matrices", action="store_true", help="write A and B as MatrixMarket")
    r.add_argument("--dump-quadrature", action="store_true", help="write quadrature points")
    r.add_argument("--dump-mesh", action="store_true", help="write the cut elements as text")
    r.add_argument("--samples", action="store_true",
                   help="write eigenfunction values at the quadrature points")
    r.add_argument("-v", "--verbose", action="store_true", help="log progress")
    return p


def _config(args):
    return ExperimentConfig(
        example=args.example, surface=args.surface or _DEFAULT_SURFACE[args.example], N=args.N,
        k=args.k, c=args.c, q=args.q, eigen=args.eigen, seed=args.seed, sweep=args.sweep,
        out=args.out, tau=args.tau, delta=args.delta, eps_rank=args.eps_rank,
        lam_max=args.lam_max, workers=args.workers, dump_matrices=args.dump_matrices,
        dump_quadrature=args.dump_quadrature, dump_mesh=args.dump_mesh, samples=args.samples)


def _summary(cfg, reports):
    if cfg.example == 1:
        rep = reports
        print("N,M,E_L2,EOC_L2,E_H1,EOC_H1")
        for i, row in enumerate(rep.rows):
            print(f"{row.N},{row.M},{row.l2:.3e},{rep.eoc('l2')[i]:.2f},"
                  f"{row.h1:.3e},{rep.eoc('h1')[i]:.2f}")
        return
    for rep in reports:
        print(f"N={rep.N} k={rep.k} M={rep.M} K={rep.K} nrank={rep.nrank} seed={rep.seed}")
        if len(rep.exact):
            for ex, block, err in zip(rep.exact, rep.clusters, rep.errors):
                print(f"  {ex:g}: {len(block)} values, Error = {err:.3e}")
        else:
            for i, v in enumerate(rep.eigenvalues[:6]):
                print(f"  lambda_{i + 1} = {v:.10g}")
    if cfg.example == 2 and len(reports) > 1:
        rates = eigen_eoc(reports)
        for ex, row in zip(reports[0].exact, rates):
            print(f"  EOC({ex:g}): " + " ".join(f"{v:.2f}" for v in row[1:]))


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = _config(args)
    try:
        runner = {1: run_example1, 2: run_example2, 3: run_example3}[cfg.example]
        reports = runner(cfg)
        paths = emit_reports(reports, Path(cfg.out))
        _summary(cfg, reports)
        for p in paths:
            print(f"wrote {p}")
    except (LBTraceError, ValueError, OSError, np.linalg.LinAlgError) as err:
        record = {"error": type(err).__name__, "message": str(err)}
        if getattr(err, "element", None) is not None:
            record["element"] = err.element
        print(json.dumps(record), file=sys.stderr)
        return 2 if isinstance(err, LBTraceError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
