"""Acceptance criteria, one test each.

Every test prints a ``criterion n: PASS|FAIL`` line, and the lines are
repeated in the terminal summary.  The expensive runs are cached at module
scope, so each discretization is solved once.
"""
import time

import numpy as np
import pytest

from lbtrace.assembly import assemble
from lbtrace.fespace import evaluate_at_rules
from lbtrace.harness import (ExperimentConfig, discretize, run_example1, run_example2,
                             run_example3, sphere_spectrum)
from lbtrace.levelset import sphere, tooth
from lbtrace.mesh import build_uniform_mesh, classify_cut_elements
from lbtrace.quadrature import build_rules, integrate_global
from lbtrace.solvers import rank_drop_certificate, solve_singular_gep

from pencils import block_pencil

pytestmark = pytest.mark.slow

BOX = ((-2.0,) * 3, (2.0,) * 3)
FOUR_PI = 4 * np.pi
# star-shaped oracle (tests/sphere_oracles.py) on a 300 x 600 grid
TOOTH_AREA = 42.19607387811358

# exTraceFEM columns, rows N = 8, 16, 32, 64
TABLE1_L2 = np.array([2.05e-2, 5.12e-3, 1.30e-3, 3.13e-4])
TABLE1_H1 = np.array([4.76e-1, 2.20e-1, 1.04e-1, 5.22e-2])
TABLE2_N32_L2, TABLE2_N32_H1 = 8.71e-6, 6.61e-4

LAM_MAX = 32.0   # keeps the clusters 0, 2, ..., 30 and nothing above
LAM_MAX_ORDER = 70.0   # holds the 36 lowest k=1 values from N=8 on
EXTRA_BELOW = 31.0


def _fmt(a):
    return "[" + ", ".join(f"{v:.3g}" for v in np.atleast_1d(a)) + "]"


def _in(a, lo, hi):
    a = np.asarray(a)
    return bool(np.all((a >= lo) & (a <= hi)))


# ------------------------------------------------------------------ caches

@pytest.fixture(scope="module")
def example1():
    cache = {}

    def get(k):
        if k not in cache:
            cache[k] = run_example1(ExperimentConfig(example=1, k=k, sweep=(8, 16, 32, 64)))
        return cache[k]
    return get


@pytest.fixture(scope="module")
def example2():
    cache = {}

    def get(k, N, strict=True):
        if (k, N, strict) not in cache:
            if strict:
                cfg = ExperimentConfig(example=2, k=k, N=N, lam_max=LAM_MAX, seed=0)
                cache[k, N, strict] = run_example2(cfg)[0]
            else:
                # order pairing: the coarse k=1 spectrum spreads past 42 at N=8
                cfg = ExperimentConfig(example=2, k=k, N=N, lam_max=LAM_MAX_ORDER, seed=0)
                cache[k, N, strict] = run_example2(cfg, n_clusters=6, strict=False)[0]
        return cache[k, N, strict]
    return get


# ---------------------------------------------------------------- criteria

def test_criterion_1_quadrature_exactness(criterion):
    s = sphere(bbox=BOX)
    t0 = time.perf_counter()
    mesh = build_uniform_mesh(16, BOX)
    rules = build_rules(mesh, classify_cut_elements(mesh, s), s, q=6)
    seconds = time.perf_counter() - t0
    area = integrate_global(rules, lambda x: np.ones(len(x)))
    x1sq = integrate_global(rules, lambda x: x[:, 0] ** 2)
    e_area = abs(area - FOUR_PI) / FOUR_PI
    e_x1 = abs(x1sq - FOUR_PI / 3) / (FOUR_PI / 3)
    criterion(1, {
        "area": (e_area <= 1e-8, f"rel err {e_area:.2e}"),
        "x1^2": (e_x1 <= 1e-8, f"rel err {e_x1:.2e}"),
        "runtime": (seconds < 10, f"{seconds:.1f} s"),
    })


def test_criterion_2_example1_linear(criterion, example1):
    rep = example1(1)
    eoc_l2, eoc_h1 = rep.eoc("l2")[1:], rep.eoc("h1_semi")[1:]
    r_l2 = rep.column("l2") / TABLE1_L2
    r_h1 = rep.column("h1_semi") / TABLE1_H1
    criterion(2, {
        "EOC L2": (_in(eoc_l2, 1.85, 2.15), _fmt(eoc_l2)),
        "EOC H1 semi": (_in(eoc_h1, 0.85, 1.20), _fmt(eoc_h1)),
        "L2 / table": (_in(r_l2, 0.5, 2.0), _fmt(r_l2)),
        "H1 / table": (_in(r_h1, 0.5, 2.0), _fmt(r_h1)),
    })


def test_criterion_3_example1_quadratic(criterion, example1):
    rep = example1(2)
    eoc_l2, eoc_h1 = rep.eoc("l2")[1:], rep.eoc("h1_semi")[1:]
    row = rep.rows[rep.N.index(32)]
    r_l2, r_h1 = row.l2 / TABLE2_N32_L2, row.h1_semi / TABLE2_N32_H1
    seconds = rep.rows[rep.N.index(64)].seconds
    criterion(3, {
        "EOC L2": (_in(eoc_l2, 2.8, 3.2), _fmt(eoc_l2)),
        "EOC H1 semi": (_in(eoc_h1, 1.8, 2.2), _fmt(eoc_h1)),
        "N=32 L2 / table": (1 / 3 <= r_l2 <= 3, f"{r_l2:.3g}"),
        "N=32 H1 / table": (1 / 3 <= r_h1 <= 3, f"{r_h1:.3g}"),
        "N=64 runtime": (seconds < 600, f"{seconds:.0f} s"),
    })


def test_criterion_4_sphere_spectrum(criterion, example2):
    rep = example2(2, 32)
    exact, mult = sphere_spectrum(6)
    counts = [len(b) for b in rep.clusters]
    bounds = np.array([np.inf, 1e-6, 1e-6, 1e-4, 5e-4, 2e-3])
    n_below = int(np.sum(rep.eigenvalues < EXTRA_BELOW))
    criterion(4, {
        "multiplicities": (counts == mult.tolist(), str(counts)),
        "cluster errors": (bool(np.all(rep.errors[1:] <= bounds[1:])), _fmt(rep.errors)),
        "values below 31": (n_below == mult.sum(), str(n_below)),
    })


@pytest.mark.parametrize("k", [1, 2])
def test_criterion_5_eigenvalue_order(criterion, example2, k):
    reports = [example2(k, N, strict=(k == 2)) for N in (8, 16, 32)]
    err = np.array([r.errors[3:6] for r in reports])      # λ = 12, 20, 30
    rates = np.log2(err[:-1] / err[1:])
    criterion(f"5 (k={k})", {
        "EOC": (_in(rates, 2 * k - 0.4, 2 * k + 0.4),
                "rows 8->16, 16->32: " + " ".join(_fmt(r) for r in rates)),
    })


def _pencil_cases(rng, n_cases=100):
    cases = []
    for _ in range(n_cases):
        K = int(rng.integers(0, 6))
        m = int(rng.integers(1, 31 - K))
        cases.append(block_pencil(rng, m, K))
    return cases


def test_criterion_6_singular_pencil_oracle(criterion):
    cases = _pencil_cases(np.random.default_rng(2024))
    worst, miscount, spread = 0.0, 0, 0.0
    for A, B, ref in cases:
        runs = [solve_singular_gep(A, B, seed=s).eigenvalues for s in range(5)]
        for lam in runs:
            if len(lam) != len(ref):
                miscount += 1
                continue
            worst = max(worst, np.max(np.abs(lam - ref) / np.maximum(np.abs(ref), 1e-300)))
        same = [r for r in runs if len(r) == len(ref)]
        if len(same) > 1:
            s = np.ptp(np.array(same), axis=0) / np.abs(ref)
            spread = max(spread, s.max())
    criterion(6, {
        "match": (worst <= 1e-8, f"max rel err {worst:.2e}"),
        "misclassified runs": (miscount == 0, str(miscount)),
        "seed spread": (spread <= 1e-8, f"{spread:.2e}"),
    })


def test_criterion_7_rank_drop_certificate(criterion):
    problems = _pencil_cases(np.random.default_rng(7), n_cases=30)
    for name in ("sphere", "tooth"):
        d = discretize(name, 4, 1, 4)
        A, B, _ = assemble(d.space, d.surface, rules=d.rules)
        assert A.n <= 200
        problems.append((A.toarray(), B.toarray(), None))
    checked, failed = 0, 0
    for A, B, _ in problems:
        res = solve_singular_gep(A, B, seed=0)
        ok = rank_drop_certificate(A, B, res.eigenvalues, nrank=res.nrank)
        checked += len(ok)
        failed += int(np.sum(~ok))
    criterion(7, {"certificates": (failed == 0, f"{checked - failed}/{checked} pass")})


def test_criterion_8_tooth_regression(criterion):
    rep = run_example3(ExperimentConfig(example=3, surface="tooth", N=32, k=1))[0]
    lam = rep.eigenvalues
    mid, hi = lam[1:4], lam[4:6]
    criterion(8, {
        "lambda_1": (abs(lam[0]) <= 1e-6, f"{lam[0]:.2e}"),
        "lambda_2..4": (_in(mid, 0.58, 0.60) and np.ptp(mid) <= 1e-3,
                        f"{_fmt(mid)} spread {np.ptp(mid):.1e}"),
        "lambda_5..6": (_in(hi, 1.60, 1.63), _fmt(hi)),
    })


@pytest.mark.parametrize("name", ["sphere", "tooth"])
@pytest.mark.parametrize("N", [4, 8])
def test_criterion_9_invariants(criterion, name, N):
    surf = sphere(bbox=BOX) if name == "sphere" else tooth()
    area_ref = FOUR_PI if name == "sphere" else TOOTH_AREA
    checks = {}
    # the area identity holds to the quadrature error, geometric in q
    q = 16
    for k in (1, 2):
        d = discretize(surf, N, k, q)
        A, B, _ = assemble(d.space, surf, rules=d.rules)
        one = np.ones(d.space.M)
        a1 = np.abs(A @ one).max() / A.norm()
        area = one @ (B @ one)
        phi, _, _ = evaluate_at_rules(d.space, d.rules)
        pu = np.abs(phi.sum(axis=1) - 1).max()
        off = np.abs(surf(d.rules.points)).max()
        rules4 = build_rules(d.mesh, d.cutset, surf, q=q, workers=4, chunk=53)
        A4, B4, _ = assemble(d.space, surf, rules=rules4, workers=4, chunk=97)
        same = (np.array_equal(rules4.points, d.rules.points)
                and all(np.array_equal(x.upper.data, y.upper.data)
                        and np.array_equal(x.upper.indices, y.upper.indices)
                        for x, y in ((A, A4), (B, B4))))
        checks[f"k={k} A1=0"] = (a1 <= 1e-12, f"{a1:.1e}")
        wsum = d.rules.weights.sum()
        checks[f"k={k} 1B1=sum w"] = (abs(area - wsum) <= 1e-13 * wsum,
                                      f"rel {abs(area - wsum) / wsum:.1e}")
        checks[f"k={k} 1B1=|G|"] = (abs(area - area_ref) <= 1e-9 * area_ref,
                                    f"rel {abs(area - area_ref) / area_ref:.1e}")
        checks[f"k={k} partition of unity"] = (pu <= 1e-12, f"{pu:.1e}")
        checks[f"k={k} on surface"] = (off <= surf.eps_surf, f"{off:.1e}")
        checks[f"k={k} parallel"] = (same, "bitwise" if same else "differs")
    criterion(f"9 ({name}, N={N})", checks)
