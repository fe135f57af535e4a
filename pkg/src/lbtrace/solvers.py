"""Linear and eigenvalue solvers for the surface pencil ``(A, B)``.

The pencil is symmetric positive semidefinite and may be singular: a
function in ``W_h`` whose trace vanishes lies in the kernel of both
matrices.  Its finite eigenvalues are recovered by a rank-completing random
perturbation followed by an eigenvector test.
"""
import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .exceptions import (ClassificationAmbiguous, InconsistentRHS, NoConvergence,
                         NotDefinite, RankEstimateUnstable)

log = logging.getLogger(__name__)

__all__ = [
    "FiniteEigenResult",
    "solve_helmholtz",
    "numerical_rank",
    "nrank_estimate",
    "solve_regular_gep",
    "solve_singular_gep",
    "rank_drop_certificate",
    "write_eigen_csv",
]

TAG_TRUE = "true"
TAG_PRESCRIBED = "prescribed"
TAG_RANDOM = "random"

EPS_RANK = 1e-13
DELTA_CLASSIFY = 1e-6


def _dense(M, copy=True):
    """Dense float array in Fortran order.

    LAPACK copies C-ordered input, which doubles the memory of large dense
    solves.  Without ``copy`` a suitable array is returned as is.
    """
    if hasattr(M, "full"):
        M = M.full()
    if sp.issparse(M):
        return np.asarray(M.toarray(order="F"), dtype=float)
    return np.array(M, dtype=float, order="F", copy=copy or None)


def _operator(M):
    """Anything supporting ``M @ X``."""
    if hasattr(M, "__matmul__") and not isinstance(M, (list, tuple)):
        return M
    return np.asarray(M, dtype=float)


def _sparse(M):
    if hasattr(M, "full"):
        return M.full()
    return sp.csr_matrix(M)


@dataclass
class FiniteEigenResult:
    """Eigenvalues of a pencil with their classification.

    ``eigenvalues`` holds only the TRUE (finite) eigenvalues in ascending
    order; ``all_eigenvalues``, ``tags`` and the two indicator arrays cover
    every eigenvalue of the perturbed pencil.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    all_eigenvalues: np.ndarray
    tags: list
    v_indicator: np.ndarray
    u_indicator: np.ndarray
    nrank: int
    K: int
    seed: object = None
    tau: float = 0.0
    prescribed: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.eigenvalues)


def solve_helmholtz(A, B, c, load, zero_mean=False, rtol=1e-12, maxiter=None,
                    preconditioner="lu"):
    """Solve ``(A + c B) u = load`` by preconditioned CG.

    The matrix is singular whenever the pencil is (functions without trace
    lie in its kernel), but the system is consistent and CG converges on
    the range; all solutions have the same trace.  Small cut elements make
    the matrix very badly conditioned, so by default CG is preconditioned
    with a sparse LU factorization of the Jacobi-scaled matrix and
    converges in a few steps.

    Parameters
    ----------
    A, B : SparseSymMatrix or sparse/dense symmetric matrices
    c : float
    load : ndarray
    zero_mean : bool
        Project the solution so that ``(u_h, 1)_Γ = 0``.  Required for
        ``c = 0``, where the load must satisfy ``sum(load) ≈ 0``.
    rtol : float
        Relative residual target.
    maxiter : int, optional
        Total iteration cap, ``10 n`` by default.
    preconditioner : {"lu", "jacobi"}
        ``"jacobi"`` is plain diagonal scaling; it needs up to ``O(n)``
        iterations and stalls on fine meshes.

    Raises
    ------
    InconsistentRHS
        For ``c = 0`` with a load that is not orthogonal to constants, or when
        a restart fails to reduce the true residual.
    NoConvergence
        When the iteration cap is reached.
    """
    if preconditioner not in ("lu", "jacobi"):
        raise ValueError(f"unknown preconditioner {preconditioner!r}")
    As, Bs = _sparse(A), _sparse(B)
    load = np.asarray(load, dtype=float)
    n = len(load)
    one = np.ones(n)
    bnorm = np.linalg.norm(load)
    if bnorm == 0.0:
        return np.zeros(n)
    if c == 0:
        if not zero_mean:
            raise ValueError("c = 0 needs zero_mean=True")
        if abs(load.sum()) > 1e-8 * np.abs(load).sum():
            raise InconsistentRHS(f"sum(load) = {load.sum():.3g} is not zero")
    K = sp.csr_matrix(As + c * Bs)
    d = K.diagonal()
    if np.any(d <= 0):
        raise NotDefinite("non-positive diagonal in A + cB")
    # symmetric Jacobi scaling is the same as a diagonal preconditioner
    s = 1.0 / np.sqrt(d)
    Ks = sp.csr_matrix(sp.diags(s) @ K @ sp.diags(s))
    bs = s * load
    M = _lu_operator(Ks) if preconditioner == "lu" else None
    maxiter = 10 * n if maxiter is None else int(maxiter)

    y = np.zeros(n)
    res = np.inf
    used = 0
    while True:
        count = [0]

        def tick(_):
            count[0] += 1

        y, info = spla.cg(Ks, bs, x0=y, rtol=rtol, atol=0.0, maxiter=maxiter - used, M=M,
                          callback=tick)
        used += count[0]
        new = np.linalg.norm(load - K @ (s * y)) / bnorm
        if new <= rtol:
            break
        if info != 0 or used >= maxiter:
            raise NoConvergence(f"CG reached {used} iterations, residual {new:.3g}")
        # CG claims convergence but the true residual disagrees: restart
        if new > 0.5 * res:
            raise InconsistentRHS(f"residual stagnated at {new:.3g} after {used} iterations")
        res = new
    u = s * y
    if zero_mean:
        m = Bs @ one
        u = u - (m @ u) / (m @ one) * one
    return u


def _lu_operator(Ks):
    """Sparse LU of a symmetric matrix as a ``LinearOperator`` for its inverse.

    Symmetric mode with a minimum degree ordering keeps the fill low on the
    band of cut elements.  An exactly zero pivot, possible on the kernel,
    is avoided by shifting the diagonal by machine precision.
    """
    Kc = sp.csc_matrix(Ks)
    opts = dict(permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True))
    try:
        lu = spla.splu(Kc, **opts)
    except RuntimeError:
        shift = np.finfo(float).eps * abs(Kc.diagonal()).max()
        lu = spla.splu(sp.csc_matrix(Kc + shift * sp.identity(Kc.shape[0])), **opts)
    return spla.LinearOperator(Kc.shape, matvec=lu.solve, dtype=float)


def numerical_rank(M, eps_rank=EPS_RANK, overwrite=False, scale=None):
    """Count eigenvalues of a symmetric matrix above ``eps_rank * scale`` in modulus.

    ``scale`` defaults to ``|M|_2``.
    """
    M = _dense(M, copy=not overwrite)
    if M.shape[0] == 0:
        return 0
    ev = scipy.linalg.eigvalsh(M, overwrite_a=True, check_finite=False)
    if scale is None:
        scale = np.abs(ev).max()
    if scale == 0.0:
        return 0
    return int(np.sum(np.abs(ev) > eps_rank * scale))


def nrank_estimate(A, B, n_samples=3, eps_rank=EPS_RANK, rng=None, return_all=False):
    """Normal rank ``max_β rank(A - βB)`` over random shifts ``β ∈ [1, 2]``.

    Sparse inputs are densified one shift at a time.  With ``return_all``
    the list of sampled ranks is returned as well.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    rng = np.random.default_rng(rng)
    if hasattr(A, "full") or sp.issparse(A):
        As, Bs = _sparse(A), _sparse(B)

        def shifted(beta):
            return sp.csr_matrix(As - beta * Bs).toarray(order="F")
    else:
        Ad, Bd = _dense(A, copy=False), _dense(B, copy=False)

        def shifted(beta):
            return np.asfortranarray(Ad - beta * Bd)
    ranks = [numerical_rank(shifted(beta), eps_rank, overwrite=True)
             for beta in rng.uniform(1.0, 2.0, n_samples)]
    return (max(ranks), ranks) if return_all else max(ranks)


def _subset(lam_max):
    return None if lam_max is None else (-np.inf, float(lam_max))


def solve_regular_gep(A, B, eps_rank=EPS_RANK, lam_max=None):
    """Eigenpairs of ``A x = λ B x`` with ``B`` positive definite.

    Parameters
    ----------
    lam_max : float, optional
        Only return eigenvalues up to this value.

    Returns
    -------
    lam : ndarray
        Ascending eigenvalues.
    X : ndarray
        ``B``-orthonormal eigenvectors in columns.

    Raises
    ------
    NotDefinite
        If the smallest eigenvalue of ``B`` is at most ``eps_rank * |B|_2``.
    """
    Ad, Bd = _dense(A), _dense(B)
    n = Bd.shape[0]
    if n == 0:
        return np.zeros(0), np.zeros((0, 0))
    bmin = scipy.linalg.eigvalsh(Bd, subset_by_index=[0, 0])[0]
    bmax = scipy.linalg.eigvalsh(Bd, subset_by_index=[n - 1, n - 1])[0]
    if not bmin > eps_rank * abs(bmax):
        raise NotDefinite(f"lambda_min(B) = {bmin:.3g} <= {eps_rank:g} * |B|")
    try:
        return scipy.linalg.eigh(Ad, Bd, subset_by_value=_subset(lam_max), overwrite_a=True,
                                 overwrite_b=True, check_finite=False)
    except np.linalg.LinAlgError as err:
        raise NotDefinite(str(err)) from None


def _orthonormal(rng, n, k):
    Q, _ = np.linalg.qr(rng.standard_normal((n, k)))
    return Q


def _unit_columns(X):
    nrm = np.linalg.norm(X, axis=0)
    nrm[nrm == 0] = 1.0
    return X / nrm


def solve_singular_gep(A, B, tau=None, delta=DELTA_CLASSIFY, prescribed=None, eps_rank=EPS_RANK,
                       seed=None, n_rank_samples=3, symmetric=True, strict=True, lam_max=None):
    """Finite eigenvalues of a possibly singular symmetric pencil.

    With ``K = n - nrank(A, B)`` the pencil is perturbed to

        (A + tau s U D_A V^T,  B + tau s U V^T),   s = |B|_F / (|A|_F + |B|_F)

    with random ``U``, ``V`` having ``K`` orthonormal columns and
    ``D_A = diag(prescribed)``.  The perturbed pencil is regular.  Its
    eigenpairs ``(λ, x, y)`` with ``|V^T x|`` and ``|U^T y|`` both below
    ``delta`` (unit ``x``, ``y``) are the finite eigenvalues of ``(A, B)``;
    pairs at the prescribed values are tagged PRESCRIBED and the rest RANDOM.

    Parameters
    ----------
    tau : float, optional
        Perturbation size, ``1e-2 (|A|_F + |B|_F)`` by default.  The factor
        ``s`` makes the perturbation of ``B`` of relative size ``tau / (|A|_F
        + |B|_F)``.
    delta : float
        Indicator threshold; values in ``(delta, 10 delta]`` are ambiguous.
    prescribed : sequence of float, optional
        ``K`` planted eigenvalues, ``10 |A|_F / |B|_F * (1, ..., K)`` by default.
    seed : int or Generator, optional
        Seed of the shifts and random factors; stored in the result.
    symmetric : bool
        Use ``V = U``, which keeps the perturbed pencil symmetric so that a
        Hermitian solver applies and left and right eigenvectors coincide.
        Otherwise ``U`` and ``V`` are independent and left eigenvectors are
        computed separately.
    strict : bool
        Raise on ambiguous indicators and unstable rank estimates instead of
        logging a warning.
    lam_max : float, optional
        Only compute eigenvalues up to this value (symmetric mode).  Saves
        time and memory on large pencils.

    Raises
    ------
    ClassificationAmbiguous, RankEstimateUnstable
    """
    rng = np.random.default_rng(seed)
    nrank, ranks = nrank_estimate(A, B, n_rank_samples, eps_rank, rng, return_all=True)
    Ad, Bd = _dense(A), _dense(B)
    n = Ad.shape[0]
    if len(set(ranks)) > 1:
        msg = f"normal rank estimates differ across shifts: {ranks}"
        if strict:
            raise RankEstimateUnstable(msg)
        log.warning(msg)
    K = n - nrank
    nA = float(np.linalg.norm(Ad))
    nB = float(np.linalg.norm(Bd))

    if K == 0:
        lam, X = _regular_any(Ad, Bd, eps_rank, lam_max)
        z = np.zeros(len(lam))
        return FiniteEigenResult(lam, X, lam.copy(), [TAG_TRUE] * len(lam), z, z.copy(),
                                 nrank, 0, seed, 0.0, np.zeros(0))

    tau = 1e-2 * (nA + nB) if tau is None else float(tau)
    if prescribed is None:
        prescribed = 10.0 * nA / max(nB, np.finfo(float).tiny) * np.arange(1, K + 1)
    prescribed = np.asarray(prescribed, dtype=float)
    if prescribed.shape != (K,):
        raise ValueError(f"need {K} prescribed eigenvalues, got {prescribed.shape}")
    scale = tau * nB / (nA + nB)
    U = _orthonormal(rng, n, K)
    V = U if symmetric else _orthonormal(rng, n, K)
    # rank-K updates in place: the dense copies are the largest objects here
    Ad = scipy.linalg.blas.dgemm(scale, U * prescribed, V, beta=1.0, c=Ad, trans_b=True,
                                 overwrite_c=True)
    Bd = scipy.linalg.blas.dgemm(scale, U, V, beta=1.0, c=Bd, trans_b=True, overwrite_c=True)

    if symmetric:
        lam, X = scipy.linalg.eigh(Ad, Bd, subset_by_value=_subset(lam_max), overwrite_a=True,
                                   overwrite_b=True, check_finite=False)
        Y = X
    else:
        w, Yl, Xr = scipy.linalg.eig(Ad, Bd, left=True, right=True)
        keep = np.isfinite(w)
        if lam_max is not None:
            keep &= w.real <= lam_max
        lam = w.real[keep]
        order = np.argsort(lam)
        lam, X, Y = lam[order], Xr[:, keep][:, order].real, Yl[:, keep][:, order].real
    del Ad, Bd
    v_ind = np.linalg.norm(V.T @ _unit_columns(X), axis=0)
    u_ind = np.linalg.norm(U.T @ _unit_columns(Y), axis=0)

    ind = np.maximum(v_ind, u_ind)
    ambiguous = (ind > delta) & (ind <= 10 * delta)
    rel = np.abs(lam[:, None] - prescribed[None, :]) / np.abs(prescribed)[None, :]
    near_p = rel.min(axis=1) <= 1e-6 if len(lam) else np.zeros(0, dtype=bool)
    tags = []
    for i in range(len(lam)):
        if ind[i] <= delta:
            tags.append(TAG_TRUE)
        elif near_p[i] and min(v_ind[i], u_ind[i]) > 10 * delta:
            tags.append(TAG_PRESCRIBED)
        else:
            tags.append(TAG_RANDOM)
    if ambiguous.any():
        msg = (f"{int(ambiguous.sum())} eigenvalues with indicators in "
               f"({delta:g}, {10 * delta:g}]: {lam[ambiguous].tolist()}")
        if strict:
            raise ClassificationAmbiguous(msg, eigenvalues=lam[ambiguous])
        log.warning(msg)
    true = np.array([t == TAG_TRUE for t in tags], dtype=bool)
    lam_t, X_t = _rayleigh(A, B, X[:, true], Y[:, true])
    return FiniteEigenResult(lam_t, X_t, lam, tags, v_ind, u_ind, nrank, K, seed, tau,
                             prescribed)


def _rayleigh(A, B, X, Y):
    """Two-sided Rayleigh quotients ``y^T A x / y^T B x`` on the unperturbed pencil.

    TRUE eigenvectors satisfy ``V^T x ≈ 0``, so the quotient drops the
    perturbation and gains a second order of accuracy over the eigenvalue of
    the perturbed pencil.  Returns sorted values and the matching columns.
    """
    if X.shape[1] == 0:
        return np.zeros(0), X
    AX = np.asarray(_operator(A) @ X)
    BX = np.asarray(_operator(B) @ X)
    lam = np.einsum("ij,ij->j", Y, AX) / np.einsum("ij,ij->j", Y, BX)
    order = np.argsort(lam, kind="stable")
    return lam[order], X[:, order]


def _regular_any(Ad, Bd, eps_rank, lam_max=None):
    """Regular pencil: Cholesky of ``B`` when definite, else a shift of ``A``."""
    try:
        return solve_regular_gep(Ad.copy(), Bd.copy(), eps_rank, lam_max)
    except NotDefinite:
        pass
    # A + sB is definite for a regular PSD pencil; B x = mu (A + sB) x, lam = 1/mu - s
    s = np.linalg.norm(Ad) / max(np.linalg.norm(Bd), np.finfo(float).tiny)
    mu, X = scipy.linalg.eigh(Bd, Ad + s * Bd)
    finite = mu > eps_rank * np.abs(mu).max()
    lam = 1.0 / mu[finite] - s
    X = X[:, finite]
    if lam_max is not None:
        X, lam = X[:, lam <= lam_max], lam[lam <= lam_max]
    order = np.argsort(lam)
    return lam[order], X[:, order]


def rank_drop_certificate(A, B, lam, nrank=None, eps_rank=EPS_RANK):
    """Check ``rank(A - λB) < nrank(A, B)`` for each ``λ``.

    The rank threshold is ``eps_rank (|A|_2 + |λ| |B|_2)``: at an eigenvalue
    ``A - λB`` may cancel to rounding level, so its own norm is no scale.
    Returns a boolean array; intended for small problems (dense eigensolves).
    """
    Ad, Bd = _dense(A, copy=False), _dense(B, copy=False)
    if nrank is None:
        nrank = nrank_estimate(Ad, Bd, eps_rank=eps_rank, rng=0)
    nA, nB = np.linalg.norm(Ad, 2), np.linalg.norm(Bd, 2)
    return np.array([numerical_rank(Ad - l * Bd, eps_rank, overwrite=True,
                                    scale=nA + abs(l) * nB) < nrank
                     for l in np.atleast_1d(lam)], dtype=bool)


def write_eigen_csv(result, path):
    """Write every computed eigenvalue as ``lambda,tag,v_indicator,u_indicator``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "tag", "v_indicator", "u_indicator"])
        for row in zip(result.all_eigenvalues, result.tags, result.v_indicator,
                       result.u_indicator):
            w.writerow([repr(float(row[0])), row[1], repr(float(row[2])), repr(float(row[3]))])
