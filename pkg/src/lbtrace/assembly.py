"""Surface stiffness and mass matrices and load vectors.

All integrals are evaluated with the quadrature rules on the exact surface.
Matrices are kept as their upper triangle in CSR form.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp

from .fespace import evaluate_at_rules
from .quadrature import build_rules
from .solvers import EPS_RANK

log = logging.getLogger(__name__)

__all__ = [
    "SparseSymMatrix",
    "assemble",
    "assemble_load",
    "default_order",
    "kernel_dimension_report",
    "write_matrix_market",
]


class SparseSymMatrix:
    """Symmetric sparse matrix stored as its upper triangle."""

    def __init__(self, upper):
        upper = sp.csr_matrix(sp.triu(upper))
        upper.sort_indices()
        self.upper = upper

    @classmethod
    def from_full(cls, A):
        return cls(sp.triu(sp.csr_matrix(A)))

    @property
    def shape(self):
        return self.upper.shape

    @property
    def n(self):
        return self.upper.shape[0]

    @property
    def nnz(self):
        return self.upper.nnz

    def full(self):
        """The whole matrix as CSR."""
        U = self.upper
        D = sp.diags(U.diagonal())
        return sp.csr_matrix(U + U.T - D)

    def toarray(self):
        return self.full().toarray()

    def dot(self, x):
        U = self.upper
        x = np.asarray(x, dtype=float)
        d = U.diagonal().reshape((-1,) + (1,) * (x.ndim - 1))
        return U @ x + U.T @ x - d * x

    __matmul__ = dot

    def norm(self):
        """Frobenius norm."""
        return float(sp.linalg.norm(self.full()))

    def diagonal(self):
        return self.upper.diagonal()


@dataclass
class AssemblyResult:
    A: SparseSymMatrix
    B: SparseSymMatrix
    load: np.ndarray
    c: float
    rules: object

    def __iter__(self):
        return iter((self.A, self.B, self.load))


def default_order(k, q=None):
    """Gauss order used for degree ``k``: at least ``2k + 2``."""
    return max(2 * k + 2, int(q or 0))


def _local_blocks(space, surface, rules, lo, hi, f):
    phi, grad, el = evaluate_at_rules(space, rules, lo, hi)
    x = rules.points[rules.offsets[lo]:rules.offsets[hi]]
    w = rules.weights[rules.offsets[lo]:rules.offsets[hi]]
    n = surface.unit_normal(x)
    tg = grad - np.einsum("pad,pd->pa", grad, n)[..., None] * n[:, None, :]
    starts = rules.offsets[lo:hi] - rules.offsets[lo]
    Bl = np.add.reduceat(w[:, None, None] * phi[:, :, None] * phi[:, None, :], starts, axis=0)
    Al = np.add.reduceat(w[:, None, None] * np.einsum("pad,pbd->pab", tg, tg), starts, axis=0)
    fl = None
    if f is not None:
        fl = np.add.reduceat((w * np.asarray(f(x), dtype=float))[:, None] * phi, starts, axis=0)
    return Al, Bl, fl


def _scatter(dofs, blocks, M):
    nloc = dofs.shape[1]
    rows = np.repeat(dofs, nloc, axis=1).ravel()
    cols = np.tile(dofs, (1, nloc)).ravel()
    keep = rows <= cols
    mat = sp.coo_matrix((blocks.ravel()[keep], (rows[keep], cols[keep])), shape=(M, M))
    return SparseSymMatrix(mat.tocsr())


def assemble(space, surface, q=None, c=0.0, f=None, rules=None, workers=1, chunk=1000):
    """Assemble ``A_ij = (∇_Γφ_i, ∇_Γφ_j)``, ``B_ij = (φ_i, φ_j)`` and
    ``load_i = (f, φ_i)`` on the surface.

    Parameters
    ----------
    space : FESpace
        Built on the pruned cut set of ``rules`` (see ``build_rules``).
    q : int, optional
        Gauss order; raised to ``2k + 2`` if lower.  Ignored when ``rules``
        is given.
    c : float
        Reaction coefficient; returned with the result, not added to ``A``.
    f : callable, optional
        Right-hand side; the load is zero when omitted.
    workers : int
        Threads used for the element loop.  Local blocks are merged in
        element order, so the result does not depend on ``workers``.

    Returns
    -------
    AssemblyResult
        Unpacks as ``A, B, load``.
    """
    if rules is None:
        rules = build_rules(space.mesh, space.cutset, surface, q=default_order(space.k, q),
                            workers=workers)
    if not np.array_equal(rules.cutset.ids, space.cutset.ids):
        raise ValueError("space and quadrature rules use different cut sets")
    n = len(rules)
    jobs = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]

    def run(job):
        return _local_blocks(space, surface, rules, job[0], job[1], f)

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(j) for j in jobs]

    Al = np.concatenate([p[0] for p in parts])
    Bl = np.concatenate([p[1] for p in parts])
    A = _scatter(space.element_dofs, Al, space.M)
    B = _scatter(space.element_dofs, Bl, space.M)
    load = np.zeros(space.M)
    if f is not None:
        fl = np.concatenate([p[2] for p in parts])
        load = np.bincount(space.element_dofs.ravel(), weights=fl.ravel(), minlength=space.M)
    return AssemblyResult(A, B, load, float(c), rules)


def assemble_load(space, rules, surface, f):
    """Load vector ``(f, φ_i)`` alone."""
    vals = []
    for lo in range(0, len(rules), 1000):
        hi = min(lo + 1000, len(rules))
        phi, _, _ = evaluate_at_rules(space, rules, lo, hi)
        sl = slice(rules.offsets[lo], rules.offsets[hi])
        fx = np.asarray(f(rules.points[sl]), dtype=float)
        starts = rules.offsets[lo:hi] - rules.offsets[lo]
        vals.append(np.add.reduceat((rules.weights[sl] * fx)[:, None] * phi, starts, axis=0))
    fl = np.concatenate(vals)
    return np.bincount(space.element_dofs.ravel(), weights=fl.ravel(), minlength=space.M)


def kernel_dimension_report(B, eps_rank=EPS_RANK):
    """Numerical rank of ``B`` and the deficiency ``K = M - rank``.

    The rank counts eigenvalues of ``B`` above ``eps_rank * |B|_2``.
    """
    Bd = B.toarray() if hasattr(B, "toarray") else np.asarray(B, dtype=float)
    ev = scipy.linalg.eigvalsh(Bd)
    scale = max(np.abs(ev).max(), np.finfo(float).tiny)
    rank = int(np.sum(ev > eps_rank * scale))
    return rank, Bd.shape[0] - rank


def write_matrix_market(path, M, comment=""):
    """Write a ``SparseSymMatrix`` in MatrixMarket symmetric coordinate format."""
    # mmwrite detects symmetry on the full matrix and writes one triangle
    scipy.io.mmwrite(str(path), M.full(), comment=comment, symmetry="symmetric")
