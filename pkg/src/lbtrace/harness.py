"""Experiment drivers: the sphere convergence study, the sphere spectrum and
the tooth spectrum, with error norms, EOC tables and CSV output."""
import csv
import logging
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import levelset
from .assembly import assemble, default_order, write_matrix_market
from .exceptions import MultiplicityMismatch
from .fespace import build_space, evaluate_at_rules
from .mesh import build_uniform_mesh, classify_cut_elements, write_mesh
from .quadrature import build_rules, write_quadrature_csv
from .solvers import (DELTA_CLASSIFY, EPS_RANK, solve_helmholtz, solve_regular_gep,
                      solve_singular_gep, write_eigen_csv)

log = logging.getLogger(__name__)

__all__ = [
    "ExperimentConfig",
    "Discretization",
    "ErrorRow",
    "ErrorReport",
    "EigenReport",
    "discretize",
    "surface_error_norms",
    "eoc",
    "sphere_spectrum",
    "cluster_by_multiplicity",
    "cluster_by_gaps",
    "cluster_errors",
    "example1_rhs",
    "example1_solution",
    "example1_solution_gradient",
    "run_example1",
    "run_example2",
    "run_example3",
    "eigen_eoc",
    "emit_reports",
]

EIGEN_MODES = ("cholesky", "rank-completing")


@dataclass
class ExperimentConfig:
    """Settings of one experiment.

    ``sweep`` overrides ``N`` for convergence studies.  ``q`` is raised to
    ``2k + 2`` when lower.  ``lam_max`` limits eigenvalue computations to
    the low end of the spectrum (``None`` keeps all).
    """

    example: int = 1
    surface: str = "sphere"
    N: int = 16
    k: int = 1
    c: float = 1.0
    q: int = 0
    eigen: str = "rank-completing"
    seed: int = 0
    sweep: tuple = ()
    out: str = None
    tau: float = None
    delta: float = DELTA_CLASSIFY
    eps_rank: float = EPS_RANK
    lam_max: float = None
    box: tuple = ((-2.0,) * 3, (2.0,) * 3)
    workers: int = 1
    dump_matrices: bool = False
    dump_quadrature: bool = False
    dump_mesh: bool = False
    samples: bool = False

    @property
    def order(self):
        return default_order(self.k, self.q)

    def sizes(self):
        return tuple(self.sweep) if self.sweep else (self.N,)


@dataclass
class Discretization:
    mesh: object
    cutset: object
    rules: object
    space: object
    surface: object


def discretize(surface, N, k, q, box=((-2.0,) * 3, (2.0,) * 3), region=None, workers=1):
    """Mesh, cut elements, surface rules and FE space in one go.

    The space lives on the cut elements whose surface patch is non-empty.
    """
    surface = levelset.load_surface(surface)
    mesh = build_uniform_mesh(N, box)
    cut = classify_cut_elements(mesh, surface, region=region)
    rules = build_rules(mesh, cut, surface, q=q, workers=workers)
    space = build_space(mesh, rules.cutset, k)
    return Discretization(mesh, rules.cutset, rules, space, surface)


# ---------------------------------------------------------------- error norms

@dataclass
class ErrorNorms:
    l2: float
    h1_semi: float

    @property
    def h1_full(self):
        return math.hypot(self.l2, self.h1_semi)


def surface_error_norms(space, rules, surface, coeffs, exact_u, exact_grad_u):
    """``L2`` and ``H1`` errors of ``u_h`` on the surface.

    ``exact_grad_u`` may return any extension gradient; it is projected onto
    the tangent plane.  The full ``H1`` norm is ``hypot(l2, h1_semi)``.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    e0 = e1 = 0.0
    for lo in range(0, len(rules), 2000):
        hi = min(lo + 2000, len(rules))
        phi, grad, el = evaluate_at_rules(space, rules, lo, hi)
        sl = slice(rules.offsets[lo], rules.offsets[hi])
        x, w = rules.points[sl], rules.weights[sl]
        c = coeffs[space.element_dofs[el]]
        uh = np.einsum("pa,pa->p", phi, c)
        guh = np.einsum("pad,pa->pd", grad, c)
        diff = surface.tangential_project(x, np.asarray(exact_grad_u(x), dtype=float) - guh)
        e0 += float(w @ (np.asarray(exact_u(x), dtype=float) - uh) ** 2)
        e1 += float(w @ np.sum(diff * diff, axis=-1))
    return ErrorNorms(math.sqrt(e0), math.sqrt(e1))


def eoc(errors):
    """``log2(E(N) / E(2N))`` for consecutive entries; the first entry is NaN."""
    e = np.asarray(errors, dtype=float)
    out = np.full(len(e), np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        out[1:] = np.log2(e[:-1] / e[1:])
    return out


# ------------------------------------------------------------- sphere problem

def example1_rhs(x):
    """Degree-3 spherical harmonic ``3 x1^2 x2 - x2^3``."""
    return 3.0 * x[..., 0] ** 2 * x[..., 1] - x[..., 1] ** 3


def example1_solution(x):
    """``|x|^2 / (12 + |x|^2) f``; equals ``f / 13`` on the unit sphere."""
    r2 = np.sum(x * x, axis=-1)
    return r2 / (12.0 + r2) * example1_rhs(x)


def example1_solution_gradient(x):
    """``∇(f / 13)``; its tangential part is the surface gradient of the solution."""
    g = np.zeros(np.shape(x))
    g[..., 0] = 6.0 * x[..., 0] * x[..., 1]
    g[..., 1] = 3.0 * x[..., 0] ** 2 - 3.0 * x[..., 1] ** 2
    return g / 13.0


@dataclass
class ErrorRow:
    N: int
    M: int
    l2: float
    h1: float
    h1_semi: float
    seconds: float


@dataclass
class ErrorReport:
    rows: list
    k: int
    q: int

    @property
    def N(self):
        return [r.N for r in self.rows]

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows])

    def eoc(self, name):
        return eoc(self.column(name))


def run_example1(config):
    """Convergence study for ``-Δ_Γ u + c u = f`` on the unit sphere."""
    sizes = config.sizes()
    if not sizes:
        raise ValueError("empty sweep")
    rows = []
    for N in sizes:
        t0 = time.perf_counter()
        d = discretize(config.surface, N, config.k, config.order, config.box,
                       workers=config.workers)
        A, B, load = assemble(d.space, d.surface, f=example1_rhs, rules=d.rules,
                              c=config.c, workers=config.workers)
        u = solve_helmholtz(A, B, config.c, load, zero_mean=(config.c == 0))
        err = surface_error_norms(d.space, d.rules, d.surface, u, example1_solution,
                                  example1_solution_gradient)
        rows.append(ErrorRow(N, d.space.M, err.l2, err.h1_full, err.h1_semi,
                             time.perf_counter() - t0))
        log.info("N=%d M=%d L2=%.3e H1=%.3e", N, d.space.M, err.l2, err.h1_full)
        _dump(config, d, A, B, f"N{N}")
    return ErrorReport(rows, config.k, config.order)


# ------------------------------------------------------------ eigen problems

def sphere_spectrum(n_clusters):
    """Exact values ``m(m-1)`` and multiplicities ``2m-1`` for ``m = 1..n``."""
    m = np.arange(1, n_clusters + 1)
    return m * (m - 1.0), 2 * m - 1


def cluster_by_multiplicity(lam, exact, mult, upper=None, strict=True):
    """Assign sorted eigenvalues to exact values in blocks of known size.

    The ``i``-th block takes the next ``mult[i]`` values in ascending order.
    For a conforming space this is the min-max pairing, since discrete
    eigenvalues bound the exact ones from above index by index.

    Parameters
    ----------
    upper : float, optional
        No value beyond the last block may lie below ``upper``.
    strict : bool
        Also require every value to be nearest to the exact value of its
        block.  Coarse meshes can fail this while the pairing is still
        well defined.

    Returns a list of arrays, one per exact value.

    Raises
    ------
    MultiplicityMismatch
        When there are too few eigenvalues, a block fails the nearest-value
        check, or a value beyond the last block is below ``upper``.
    """
    lam = np.sort(np.asarray(lam, dtype=float))
    exact = np.asarray(exact, dtype=float)
    mult = np.asarray(mult, dtype=int)
    if len(lam) < mult.sum():
        raise MultiplicityMismatch(f"{len(lam)} eigenvalues for {mult.sum()} expected",
                                   eigenvalues=lam)
    blocks, start = [], 0
    for i, p in enumerate(mult):
        block = lam[start:start + p]
        nearest = np.argmin(np.abs(block[:, None] - exact[None, :]), axis=1)
        if strict and np.any(nearest != i):
            raise MultiplicityMismatch(
                f"cluster of {exact[i]:g} should hold {p} values, got {block.tolist()}",
                eigenvalues=lam)
        blocks.append(block)
        start += p
    if upper is not None and start < len(lam) and lam[start] < upper:
        raise MultiplicityMismatch(f"extra eigenvalue {lam[start]:.10g} below {upper:g}",
                                   eigenvalues=lam)
    return blocks


def cluster_by_gaps(lam, rel_gap=1e-3, zero_tol=0.0):
    """Split sorted values where the relative gap exceeds ``rel_gap``.

    Values with ``|λ| <= zero_tol`` form their own cluster.
    """
    lam = np.sort(np.asarray(lam, dtype=float))
    if len(lam) == 0:
        return []
    clusters, cur = [], [lam[0]]
    for a, b in zip(lam[:-1], lam[1:]):
        if abs(a) <= zero_tol and abs(b) <= zero_tol:
            split = False
        elif abs(a) <= zero_tol or abs(b) <= zero_tol:
            split = True
        else:
            split = (b - a) > rel_gap * max(abs(a), abs(b))
        if split:
            clusters.append(np.array(cur))
            cur = []
        cur.append(b)
    clusters.append(np.array(cur))
    return clusters


def cluster_errors(blocks, exact):
    """``Error(λ^m) = mean |λ^m - λ_h|`` over each block."""
    return np.array([np.mean(np.abs(b - e)) for b, e in zip(blocks, exact)])


@dataclass
class EigenReport:
    """Computed finite eigenvalues with their clusters.

    For the sphere ``exact`` and ``errors`` hold the reference values and
    ``Error(λ^m)`` per cluster; for surfaces without a known spectrum they
    are empty and clusters come from gap detection.
    """

    N: int
    k: int
    M: int
    eigenvalues: np.ndarray
    clusters: list
    exact: np.ndarray = field(default_factory=lambda: np.zeros(0))
    errors: np.ndarray = field(default_factory=lambda: np.zeros(0))
    K: int = 0
    nrank: int = 0
    seed: int = 0
    mode: str = "rank-completing"
    result: object = None
    seconds: float = 0.0
    zero_tol: float = 0.0


def _eigensolve(config, A, B):
    lam_max = config.lam_max
    if config.eigen == "cholesky":
        lam, X = solve_regular_gep(A, B, config.eps_rank, lam_max=lam_max)
        return lam, None, 0, A.n
    if config.eigen != "rank-completing":
        raise ValueError(f"eigen mode must be one of {EIGEN_MODES}")
    res = solve_singular_gep(A, B, tau=config.tau, delta=config.delta, eps_rank=config.eps_rank,
                             seed=config.seed, lam_max=lam_max)
    return res.eigenvalues, res, res.K, res.nrank


def _zero_tol(A, B):
    return 1e-8 * A.norm() / B.norm()


def run_example2(config, n_clusters=None, strict=True):
    """Low spectrum of the Laplace–Beltrami operator on the unit sphere.

    Computed eigenvalues are paired in ascending order with the exact values
    ``m(m-1)``, multiplicity ``2m-1`` (see ``cluster_by_multiplicity``).

    Parameters
    ----------
    n_clusters : int, optional
        Number of exact values matched.  Without it, ``config.lam_max``
        selects the exact values safely below it, or 6 are matched when
        ``lam_max`` is not set either.
    strict : bool
        Require each value to be nearest to its exact value and, when the
        exact values come from ``lam_max``, no unmatched value below it.
        ``strict=False`` keeps only the order pairing, for coarse meshes.
    """
    if n_clusters is None and config.lam_max is not None:
        upper = float(config.lam_max)
        exact, mult = sphere_spectrum(64)
        keep = 1.05 * exact + 0.05 < upper
        if not keep.any():
            raise ValueError(f"lam_max = {upper:g} leaves no eigenvalue to match")
        exact, mult = exact[keep], mult[keep]
    else:
        n = 6 if n_clusters is None else int(n_clusters)
        exact, mult = sphere_spectrum(n)
        # halfway to the first exact value not matched
        upper = 0.5 * (exact[-1] + n * (n + 1))
        if config.lam_max is None:
            config = ExperimentConfig(**{**asdict(config), "lam_max": upper})
        elif config.lam_max < upper:
            upper = float(config.lam_max)
    if not strict:
        upper = None
    reports = []
    for N in config.sizes():
        t0 = time.perf_counter()
        d = discretize(config.surface, N, config.k, config.order, config.box,
                       workers=config.workers)
        A, B, _ = assemble(d.space, d.surface, rules=d.rules, workers=config.workers)
        lam, res, K, nrank = _eigensolve(config, A, B)
        blocks = cluster_by_multiplicity(lam, exact, mult, upper, strict)
        rep = EigenReport(N, config.k, d.space.M, np.sort(lam), blocks, exact,
                          cluster_errors(blocks, exact), K, nrank, config.seed, config.eigen,
                          res, time.perf_counter() - t0, _zero_tol(A, B))
        reports.append(rep)
        _dump(config, d, A, B, f"N{N}", res)
    return reports


def eigen_eoc(reports):
    """EOC of ``Error(λ^m)`` between consecutive reports, per cluster (rows)."""
    err = np.array([r.errors for r in reports])
    return np.array([eoc(err[:, j]) for j in range(err.shape[1])])


def run_example3(config, n_show=6):
    """Low spectrum on the tooth surface; no reference values exist."""
    reports = []
    lam_max = config.lam_max if config.lam_max is not None else 5.0
    config = ExperimentConfig(**{**asdict(config), "lam_max": lam_max})
    for N in config.sizes():
        t0 = time.perf_counter()
        d = discretize(config.surface, N, config.k, config.order, config.box,
                       workers=config.workers)
        A, B, _ = assemble(d.space, d.surface, rules=d.rules, workers=config.workers)
        lam, res, K, nrank = _eigensolve(config, A, B)
        lam = np.sort(lam)
        zt = _zero_tol(A, B)
        rep = EigenReport(N, config.k, d.space.M, lam, cluster_by_gaps(lam, 1e-3, zt),
                          K=K, nrank=nrank, seed=config.seed, mode=config.eigen, result=res,
                          seconds=time.perf_counter() - t0, zero_tol=zt)
        for i, v in enumerate(lam[:n_show]):
            log.info("lambda_%d = %.10g", i + 1, v)
        reports.append(rep)
        _dump(config, d, A, B, f"N{N}", res)
    return reports


# ------------------------------------------------------------------- output

def _dump(config, d, A, B, tag, res=None):
    if config.out is None:
        return
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    if config.dump_matrices:
        write_matrix_market(out / f"A_{tag}.mtx", A)
        write_matrix_market(out / f"B_{tag}.mtx", B)
    if config.dump_quadrature:
        write_quadrature_csv(d.rules, out / f"quadrature_{tag}.csv")
    if config.dump_mesh:
        write_mesh(d.mesh, out / f"mesh_{tag}.txt", d.cutset.ids)
    if res is not None and res.K:
        write_eigen_csv(res, out / f"pencil_{tag}.csv")
    if config.samples and res is not None and len(res.eigenvalues):
        _write_samples(d, res, out / f"eigenfunctions_{tag}.csv")


def _write_samples(d, res, path, n_modes=6):
    vals = []
    for lo in range(0, len(d.rules), 2000):
        hi = min(lo + 2000, len(d.rules))
        phi, _, el = evaluate_at_rules(d.space, d.rules, lo, hi)
        c = res.eigenvectors[:, :n_modes][d.space.element_dofs[el]]
        vals.append(np.einsum("pa,pam->pm", phi, c))
    vals = np.concatenate(vals)
    header = "x,y,z," + ",".join(f"u{i + 1}" for i in range(vals.shape[1]))
    np.savetxt(path, np.column_stack([d.rules.points, vals]), delimiter=",", header=header,
               comments="", fmt="%.12g")


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def emit_reports(reports, out):
    """Write error or eigenvalue reports as CSV files into directory ``out``.

    Error reports go to ``errors_k{k}.csv`` with columns
    ``N,E_L2,EOC_L2,E_H1,EOC_H1,E_H1_semi,EOC_H1_semi`` (``E_H1`` is the full
    norm).  Eigenvalue reports go to ``eigenvalues_N{N}_k{k}.csv`` with
    columns ``lambda,tag,cluster,exact,abs_err``.  Returns the written paths.

    Raises
    ------
    ValueError
        If there is nothing to write; no file is created then.
    OSError
        With the offending path in the message.
    """
    if isinstance(reports, (ErrorReport, EigenReport)):
        reports = [reports]
    reports = list(reports)
    if not reports or any(isinstance(r, ErrorReport) and not r.rows for r in reports):
        raise ValueError("no report rows to write")
    out = Path(out)
    written = []
    for rep in reports:
        if isinstance(rep, ErrorReport):
            path = out / f"errors_k{rep.k}.csv"
            rows = [["N", "E_L2", "EOC_L2", "E_H1", "EOC_H1", "E_H1_semi", "EOC_H1_semi"]]
            cols = [rep.column("l2"), rep.eoc("l2"), rep.column("h1"), rep.eoc("h1"),
                    rep.column("h1_semi"), rep.eoc("h1_semi")]
            for i, N in enumerate(rep.N):
                rows.append([N] + [_fmt(c[i]) for c in cols])
        else:
            path = out / f"eigenvalues_N{rep.N}_k{rep.k}.csv"
            rows = [["lambda", "tag", "cluster", "exact", "abs_err"]]
            for ci, block in enumerate(rep.clusters):
                ex = rep.exact[ci] if ci < len(rep.exact) else None
                for v in block:
                    rows.append([_fmt(v), "true", ci + 1, _fmt(ex),
                                 _fmt(abs(v - ex)) if ex is not None else ""])
            used = sum(len(b) for b in rep.clusters)
            for v in rep.eigenvalues[used:]:
                rows.append([_fmt(v), "true", "", "", ""])
            if rep.result is not None:
                for v, tag in zip(rep.result.all_eigenvalues, rep.result.tags):
                    if tag != "true":
                        rows.append([_fmt(v), tag, "", "", ""])
        try:
            out.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerows(rows)
        except OSError as err:
            raise OSError(f"cannot write {path}: {err}") from err
        written.append(path)
    return written
