"""Quadrature rules whose points lie exactly on the surface.

Inside one element the patch ``F_T = T ∩ Γ`` is written as a graph over the
plane spanned by ``nv`` and ``nw``::

    x(s, t) = x0 + r(s, t) nu + s nv + t nw,    phi(x(s, t)) = 0,

so that

    ∫_{F_T} g dS = ∫∫ g(x(s, t)) |∇φ| / |nu·∇φ| ds dt.

The height ``r`` is the root of ``phi`` on the chord of ``T`` through
``(s, t)`` in direction ``nu``.  The outer range in ``t`` is split at the
``t``-values of the points where Γ crosses the edges of ``T``; each slice
``t = const`` is split at the points where Γ crosses the slice boundary.  A
frame is accepted when ``phi`` is strictly monotone along ``nu`` on ``T`` and
along the slice direction on every cut face.  Then every chord holds at most
one root, each slice boundary edge holds at most one root, and the Gauss
rules only ever see smooth integrands.  Elements without such a frame are
split by 1:8 red refinement and treated recursively.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .exceptions import FrameFailure, RootFindFailure
from .mesh import TET_EDGES, TET_FACES, barycentric_lattice, hidden_sign_change

log = logging.getLogger(__name__)

__all__ = [
    "LocalFrame",
    "ElementSurfaceRule",
    "SurfaceRules",
    "gauss_legendre",
    "segment_roots",
    "choose_frame",
    "build_element_rule",
    "build_rules",
    "integrate_global",
    "write_quadrature_csv",
]

EPS_ROOT = 1e-13
MAX_ROOT_ITER = 100
TAU_SING = 0.2
TAU_FAIL = 0.05
TAU_SLICE = 0.1
N_THETA = 36
MAX_DEPTH = 6

# sample lattice used for sign and gradient tests
_LAT = barycentric_lattice(4)
_VERTEX_IDX = np.array([np.flatnonzero(_LAT[:, k] == 1.0)[0] for k in range(4)])
_EDGE_IDX = []
for _a, _b in TET_EDGES:
    _rest = [c for c in range(4) if c not in (_a, _b)]
    _on = np.flatnonzero((_LAT[:, _rest] == 0).all(axis=1))
    _EDGE_IDX.append(_on[np.argsort(_LAT[_on, _b])])
_EDGE_IDX = np.array(_EDGE_IDX)
_FACE_IDX = np.array([np.flatnonzero(_LAT[:, f] == 0) for f in range(4)])
# edges (indices into TET_EDGES) and vertices on each face
_FACE_EDGES = np.array([[e for e, (a, b) in enumerate(TET_EDGES) if a != f and b != f]
                        for f in range(4)])
_FACE_VERTS = TET_FACES
# neighbouring lattice points on each face, tagged with the face
_FACE_PAIRS, _PAIR_FACE = [], []
for _f in range(4):
    for _i in _FACE_IDX[_f]:
        for _j in _FACE_IDX[_f]:
            if _i < _j and np.isclose(np.abs(_LAT[_i] - _LAT[_j]).sum(), 0.5):
                _FACE_PAIRS.append((_i, _j))
                _PAIR_FACE.append(_f)
_FACE_PAIRS = np.array(_FACE_PAIRS)
_PAIR_FACE = np.array(_PAIR_FACE)

# children of the 1:8 red refinement, in terms of the 10 nodes
# (4 vertices followed by the 6 edge midpoints in TET_EDGES order)
_RED_CHILDREN = np.array([
    [0, 4, 5, 6], [4, 1, 7, 8], [5, 7, 2, 9], [6, 8, 9, 3],
    [4, 5, 6, 8], [4, 5, 7, 8], [5, 6, 8, 9], [5, 7, 8, 9],
])

_GAUSS_CACHE = {}


def gauss_legendre(q):
    """Gauss-Legendre nodes and weights on ``[0, 1]``."""
    q = int(q)
    if q < 1:
        raise ValueError("q must be >= 1")
    if q not in _GAUSS_CACHE:
        x, w = np.polynomial.legendre.leggauss(q)
        _GAUSS_CACHE[q] = (0.5 * (x + 1.0), 0.5 * w)
    return _GAUSS_CACHE[q]


@dataclass
class LocalFrame:
    """Orthonormal frame ``(nu, nv, nw)`` with ``T`` inside the box
    ``origin + (0, a) nu + (0, b) nv + (0, c) nw``.

    ``score_normal`` is ``min |nu·∇φ| / |∇φ|`` over the samples and
    ``score_slice`` the matching margin for the slice direction on cut faces.
    """

    origin: np.ndarray
    nu: np.ndarray
    nv: np.ndarray
    nw: np.ndarray
    extents: np.ndarray
    score_normal: float
    score_slice: float


@dataclass
class ElementSurfaceRule:
    points: np.ndarray
    weights: np.ndarray
    element: int
    order: int

    @property
    def area(self):
        return float(self.weights.sum())


@dataclass
class SurfaceRules:
    """Quadrature rules for all cut elements, stored flat.

    Points of element ``cutset.ids[i]`` are ``points[offsets[i]:offsets[i+1]]``.
    ``cutset`` only holds elements with a non-empty rule.
    """

    points: np.ndarray
    weights: np.ndarray
    element: np.ndarray
    offsets: np.ndarray
    cutset: object
    order: int

    def __len__(self):
        return len(self.cutset)

    def element_rule(self, i):
        sl = slice(self.offsets[i], self.offsets[i + 1])
        return ElementSurfaceRule(self.points[sl], self.weights[sl], int(self.cutset.ids[i]),
                                  self.order)

    def element_areas(self):
        return np.bincount(self.element, weights=self.weights, minlength=len(self.cutset))

    def integrate(self, f):
        """Sum ``w_i f(x_i)`` in a fixed order."""
        vals = np.asarray(f(self.points), dtype=float)
        return float(np.dot(self.weights, vals))


def segment_roots(surface, a, b, fa, fb, eps=EPS_ROOT, maxit=MAX_ROOT_ITER):
    """Roots of ``phi`` on segments ``[a, b]`` with ``phi(a)``, ``phi(b)`` of
    opposite sign.

    Newton's method in the segment parameter, falling back to bisection
    whenever a step leaves the current bracket.  Iteration stops when the step
    (relative to the segment length) drops below ``eps``.

    Returns
    -------
    x : ndarray (n, 3)
    u : ndarray (n,)
        Segment parameters of the roots.
    """
    a = np.asarray(a, dtype=float)
    d = np.asarray(b, dtype=float) - a
    n = len(a)
    lo = np.zeros(n)
    hi = np.ones(n)
    neg_lo = np.asarray(fa) < 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.asarray(fa) / (np.asarray(fa) - np.asarray(fb))
    u = np.where(np.isfinite(u), np.clip(u, 0.0, 1.0), 0.5)
    todo = np.arange(n)
    for _ in range(maxit):
        if len(todo) == 0:
            break
        uu = u[todo]
        dd = d[todo]
        x = a[todo] + uu[:, None] * dd
        f = surface(x)
        g = np.einsum("ij,ij->i", surface.gradient(x), dd)
        right = (f < 0) == neg_lo[todo]
        lo_t = np.where(right, uu, lo[todo])
        hi_t = np.where(right, hi[todo], uu)
        lo[todo] = lo_t
        hi[todo] = hi_t
        with np.errstate(divide="ignore", invalid="ignore"):
            un = uu - f / g
        bad = ~np.isfinite(un) | (un <= lo_t) | (un >= hi_t)
        un = np.where(bad, 0.5 * (lo_t + hi_t), un)
        un = np.where(f == 0, uu, un)
        done = (np.abs(un - uu) <= eps) | (f == 0) | (hi_t - lo_t <= eps)
        u[todo] = un
        todo = todo[~done]
    if len(todo):
        raise RootFindFailure(f"{len(todo)} root searches did not converge in {maxit} iterations")
    return a + u[:, None] * d, u


def _bracket_root(fun, lo, hi, flo, fhi, eps=1e-12, maxit=MAX_ROOT_ITER):
    """Illinois iteration for sign-changing brackets ``[lo, hi]``.

    ``fun(idx, u)`` evaluates the function for the brackets ``idx`` at ``u``.
    A step that fails to halve the bracket is followed by a bisection step, so
    jumps in ``fun`` cannot stall the iteration.
    """
    lo, hi = lo.astype(float).copy(), hi.astype(float).copy()
    flo, fhi = flo.astype(float).copy(), fhi.astype(float).copy()
    u = 0.5 * (lo + hi)
    todo = np.arange(len(lo))
    side = np.zeros(len(lo), dtype=int)
    width = hi - lo
    for _ in range(maxit):
        if len(todo) == 0:
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            un = (lo[todo] * fhi[todo] - hi[todo] * flo[todo]) / (fhi[todo] - flo[todo])
        mid = 0.5 * (lo[todo] + hi[todo])
        slow = hi[todo] - lo[todo] > 0.5 * width[todo]
        un = np.where(np.isfinite(un) & ~slow, un, mid)
        width[todo] = hi[todo] - lo[todo]
        fu = fun(todo, un)
        left = np.sign(fu) == np.sign(flo[todo])
        # Illinois: halve the retained end value when the same side repeats
        lo[todo] = np.where(left, un, lo[todo])
        flo[todo] = np.where(left, fu, np.where(side[todo] == -1, 0.5 * flo[todo], flo[todo]))
        hi[todo] = np.where(left, hi[todo], un)
        fhi[todo] = np.where(left, np.where(side[todo] == 1, 0.5 * fhi[todo], fhi[todo]), fu)
        side[todo] = np.where(left, 1, -1)
        u[todo] = un
        done = (hi[todo] - lo[todo] <= eps) | (fu == 0)
        todo = todo[~done]
    if len(todo):
        raise RootFindFailure(f"{len(todo)} bracketed searches did not converge in {maxit} iterations")
    return u


def _face_critical_points(surface, tri, ab, maxit=30, tol=1e-11):
    """Newton search for zeros of the in-plane gradient on triangles.

    ``tri`` is (n, 3, 3), ``ab`` (n, 2) start coordinates along the two
    edges from the first vertex.  Returns the points and a mask of searches
    that converged inside the triangle.
    """
    A = tri[:, 0]
    E = np.stack([tri[:, 1] - A, tri[:, 2] - A], axis=1)      # (n, 2, 3)
    delta = 1e-5
    ab = ab.astype(float).copy()
    conv = np.zeros(len(A), dtype=bool)
    todo = np.arange(len(A))
    # each search stops on its own, so results do not depend on the batch
    for _ in range(maxit):
        if len(todo) == 0:
            break
        Et = E[todo]
        p = A[todo] + np.einsum("na,nad->nd", ab[todo], Et)
        r = np.einsum("nad,nd->na", Et, surface.gradient(p))
        HE = np.stack([(surface.gradient(p + delta * Et[:, k]) - surface.gradient(p - delta * Et[:, k]))
                       / (2 * delta) for k in range(2)], axis=1)
        J = np.einsum("nad,nbd->nab", Et, HE)
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        ok = np.abs(det) > 1e-300
        safe = np.where(ok, det, 1.0)
        step = np.stack([J[:, 1, 1] * r[:, 0] - J[:, 0, 1] * r[:, 1],
                         J[:, 0, 0] * r[:, 1] - J[:, 1, 0] * r[:, 0]], axis=1) / safe[:, None]
        step = np.where(ok[:, None], step, 0.0)
        ab[todo] = np.clip(ab[todo] - step, -1.0, 2.0)
        done = ok & (np.abs(step).max(axis=1) < tol)
        conv[todo] = done
        todo = todo[ok & ~done]
    p = A + np.einsum("na,nad->nd", ab, E)
    inside = (ab >= -1e-9).all(axis=1) & (ab.sum(axis=1) <= 1 + 1e-9)
    return p, conv & inside


def _red_refine(V):
    """Split tetrahedra ``V`` (n, 4, 3) into 8 children each."""
    mids = 0.5 * (V[:, TET_EDGES[:, 0]] + V[:, TET_EDGES[:, 1]])
    nodes = np.concatenate([V, mids], axis=1)
    return nodes[:, _RED_CHILDREN].reshape(-1, 4, 3)


def _sign(f):
    return np.sign(f).astype(np.int8)


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _face_normals(V):
    a = V[:, TET_FACES[:, 0]]
    b = V[:, TET_FACES[:, 1]]
    c = V[:, TET_FACES[:, 2]]
    return _unit(np.cross(b - a, c - a))


def _analyse(surface, V, prefer_axis=None):
    """Sign structure, edge crossings and frame selection for a batch.

    Returns a dict of per-element arrays.  ``topo_bad`` marks elements whose
    cut could not be resolved by the samples, ``active`` marks elements with a
    sign change of ``phi``.
    """
    ne = len(V)
    X = np.einsum("sk,ekd->esd", _LAT, V)
    F = surface(X)
    S = _sign(F)
    # tiny vertex values count as zeros so that the vertex becomes a corner
    vzero = np.abs(F[:, _VERTEX_IDX]) <= surface.eps_surf
    S[:, _VERTEX_IDX] = np.where(vzero, 0, S[:, _VERTEX_IDX])
    F[:, _VERTEX_IDX] = np.where(vzero, 0.0, F[:, _VERTEX_IDX])

    # exact zeros away from the vertices count as positive, like the root
    # finders do; a crossing then ends on the sample itself
    interior_mask = np.ones(len(_LAT), dtype=bool)
    interior_mask[_VERTEX_IDX] = False
    S[:, interior_mask] = np.where(S[:, interior_mask] == 0, 1, S[:, interior_mask])
    active = (S.min(axis=1) < 0) & (S.max(axis=1) > 0)
    topo_bad = np.zeros(ne, dtype=bool)

    # edge crossings: sign changes between samples, plus pairs of crossings
    # hidden between two samples of equal sign around an extremum of phi
    SE = S[:, _EDGE_IDX]                     # (ne, 6, 5)
    change = SE[:, :, :-1] * SE[:, :, 1:] == -1
    endzero = (SE[:, :, 0] == 0).astype(int) + (SE[:, :, -1] == 0)
    G = surface.gradient(X)
    evec = V[:, TET_EDGES[:, 1]] - V[:, TET_EDGES[:, 0]]          # (ne, 6, 3)
    slope = np.einsum("eksd,ekd->eks", G[:, _EDGE_IDX], evec)
    turn = (slope[:, :, :-1] * slope[:, :, 1:] < 0) & (SE[:, :, :-1] * SE[:, :, 1:] == 1)
    hidden = np.zeros(change.shape, dtype=bool)
    te, tk, ts = np.nonzero(turn)
    if len(te):
        xa = X[te, _EDGE_IDX[tk, ts]]
        dvec = X[te, _EDGE_IDX[tk, ts + 1]] - xa

        def dslope(idx, u):
            return np.einsum("nd,nd->n", surface.gradient(xa[idx] + u[:, None] * dvec[idx]), dvec[idx])

        u = _bracket_root(dslope, np.zeros(len(te)), np.ones(len(te)),
                          slope[te, tk, ts], slope[te, tk, ts + 1])
        xext = xa + u[:, None] * dvec
        fext = surface(xext)
        h = (np.sign(fext) != SE[te, tk, ts]) & (fext != 0)
        te, tk, ts, xext, fext = te[h], tk[h], ts[h], xext[h], fext[h]
        hidden[te, tk, ts] = True
    n_cross = change.sum(axis=2) + 2 * hidden.sum(axis=2) + endzero
    topo_bad |= (n_cross > 2).any(axis=1)
    active |= hidden.any(axis=(1, 2))

    # brackets ordered along each edge; key orders them within an edge
    ce_, ck, cs_ = np.nonzero(change)
    ia, ib = _EDGE_IDX[ck, cs_], _EDGE_IDX[ck, cs_ + 1]
    ba = [X[ce_, ia], X[te, _EDGE_IDX[tk, ts]], xext if len(te) else np.zeros((0, 3))]
    bb = [X[ce_, ib], xext if len(te) else np.zeros((0, 3)), X[te, _EDGE_IDX[tk, ts + 1]]]
    fa = [F[ce_, ia], F[te, _EDGE_IDX[tk, ts]], fext if len(te) else np.zeros(0)]
    fb = [F[ce_, ib], fext if len(te) else np.zeros(0), F[te, _EDGE_IDX[tk, ts + 1]]]
    be = np.concatenate([ce_, te, te])
    bk = np.concatenate([ck, tk, tk])
    key = np.concatenate([2 * cs_, 2 * ts, 2 * ts + 1])
    corners = np.full((ne, 16, 3), np.nan)
    cmask = np.zeros((ne, 16), dtype=bool)
    if len(be):
        xc, _ = segment_roots(surface, np.concatenate(ba), np.concatenate(bb),
                              np.concatenate(fa), np.concatenate(fb))
        order = np.lexsort((key, bk, be))
        be, bk, xc = be[order], bk[order], xc[order]
        grp = be * 6 + bk
        first = np.r_[True, grp[1:] != grp[:-1]]
        slot = np.arange(len(grp)) - np.maximum.accumulate(np.where(first, np.arange(len(grp)), 0))
        k2 = slot < 2
        corners[be[k2], 6 * slot[k2] + bk[k2]] = xc[k2]
        cmask[be[k2], 6 * slot[k2] + bk[k2]] = True
    corners[:, 12:] = np.where(vzero[:, :, None], V, np.nan)
    cmask[:, 12:] = vzero

    # faces crossed by the surface must carry at least two corners
    SF = S[:, _FACE_IDX]                     # (ne, 4, 15)
    face_cut = (SF.min(axis=2) < 0) & (SF.max(axis=2) > 0)
    face_corners = (cmask[:, _FACE_EDGES].sum(axis=2) + cmask[:, 6 + _FACE_EDGES].sum(axis=2)
                    + cmask[:, 12:][:, _FACE_VERTS].sum(axis=2))
    topo_bad |= (face_cut & (face_corners < 2)).any(axis=1)
    topo_bad |= active & ~face_cut.any(axis=1) & ~hidden.any(axis=(1, 2))

    # normal direction: phi monotone along nu over the element
    gn = np.linalg.norm(G, axis=2)
    degenerate = (gn <= surface.eps_grad).any(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        Gh = G / gn[:, :, None]
    Gh = np.where(np.isfinite(Gh), Gh, 0.0)
    avg = Gh.sum(axis=1)
    avg_n = np.linalg.norm(avg, axis=1, keepdims=True)
    avg = np.where(avg_n > 0, avg / np.where(avg_n > 0, avg_n, 1.0), np.array([1.0, 0.0, 0.0]))
    dirs = np.concatenate([np.broadcast_to(np.eye(3), (ne, 3, 3)), avg[:, None]], axis=1)
    c = np.einsum("esd,ecd->ecs", Gh, dirs)
    score = np.maximum(c.min(axis=2), (-c).min(axis=2))     # (ne, 4)
    choice = np.argmax(score[:, :3], axis=1)
    if prefer_axis is not None:
        ok = score[:, prefer_axis] >= TAU_SING
        choice = np.where(ok, prefer_axis, choice)
    best = score[np.arange(ne), choice]
    use_avg = (best < TAU_SING) & (score[:, 3] > best)
    choice = np.where(use_avg, 3, choice)
    score_nu = np.where(degenerate, -1.0, score[np.arange(ne), choice])
    nu = dirs[np.arange(ne), choice]
    flip = c[np.arange(ne), choice].min(axis=1) < 0
    nu = np.where(flip[:, None], -nu, nu)

    # completing axes, then a rotation about nu for the slice direction
    helper = np.eye(3)[np.argmin(np.abs(nu), axis=1)]
    nv0 = _unit(helper - np.sum(helper * nu, axis=1, keepdims=True) * nu)
    nw0 = np.cross(nu, nv0)
    # tangents of the face curves, sampled at roots on face lattice lines
    NF = _face_normals(V)                    # (ne, 4, 3)
    pa, pb = _FACE_PAIRS[:, 0], _FACE_PAIRS[:, 1]
    pe, pp = np.nonzero(S[:, pa] * S[:, pb] == -1)
    pts, _ = segment_roots(surface, X[pe, pa[pp]], X[pe, pb[pp]], F[pe, pa[pp]], F[pe, pb[pp]])
    pf = _PAIR_FACE[pp]
    ve, vk = np.nonzero(vzero)
    vfaces = np.array([[f for f in range(4) if f != k] for k in range(4)])
    # edge corners on both faces of their edge: this catches short arcs that
    # leave and re-enter one edge between the face samples
    efaces = np.array([[f for f in range(4) if k in _FACE_EDGES[f]] for k in range(6)])
    ke, kc = np.nonzero(cmask[:, :12])
    pe = np.concatenate([pe, np.repeat(ve, 3), np.repeat(ke, 2)])
    pf = np.concatenate([pf, vfaces[vk].ravel(), efaces[kc % 6].ravel()])
    pts = np.concatenate([pts, np.repeat(V[ve, vk], 3, axis=0), np.repeat(corners[ke, kc], 2, axis=0)])
    tang = np.cross(NF[pe, pf], _unit(surface.gradient(pts)))
    tn = np.linalg.norm(tang, axis=1)
    # the crossing point of a face tangent to the surface has no tangent
    use = tn > 1e-3
    pe, pf, tang = pe[use], pf[use], tang[use] / tn[use, None]
    # points where a cut face touches the surface: the face curve has a
    # crossing there, so they become extra outer breakpoints
    fcrit = np.full((ne, 4, 3), np.nan)
    ftan = np.linalg.norm(np.cross(NF[:, :, None, :], Gh[:, _FACE_IDX]), axis=3)
    ce, cf = np.nonzero(face_cut & (ftan.min(axis=2) < 0.5))
    if len(ce):
        tri = V[ce[:, None], TET_FACES[cf]]
        start = _LAT[_FACE_IDX[cf, np.argmin(ftan[ce, cf], axis=1)]]
        start = np.take_along_axis(start, TET_FACES[cf], axis=1)
        p, ok = _face_critical_points(surface, tri, start[:, 1:])
        fcrit[ce[ok], cf[ok]] = p[ok]
    # a cap poking through a face between the samples: the in-plane critical
    # point lies inside the face with the sign opposite to all three vertices.
    # The face curve then turns all the way round and no slice direction works.
    fv = S[:, _VERTEX_IDX][:, TET_FACES]      # (ne, 4, 3)
    same = (fv == fv[..., :1]).all(axis=2) & (fv[..., 0] != 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        fdist = np.abs(F[:, _FACE_IDX]) / gn[:, _FACE_IDX]
    fdist = np.where(np.isfinite(fdist), fdist, np.inf).min(axis=2)
    hmax = np.linalg.norm(evec, axis=2).max(axis=1)
    ce, cf = np.nonzero(active[:, None] & same & (fdist < hmax[:, None]))
    if len(ce):
        tri = V[ce[:, None], TET_FACES[cf]]
        start = _LAT[_FACE_IDX[cf, np.argmin(ftan[ce, cf], axis=1)]]
        start = np.take_along_axis(start, TET_FACES[cf], axis=1)
        p, ok = _face_critical_points(surface, tri, start[:, 1:])
        cap = ok & (np.sign(surface(p)) == -fv[ce, cf, 0])
        topo_bad[ce[cap]] = True

    theta = np.pi * np.arange(N_THETA) / N_THETA
    cval = (np.einsum("nd,nd->n", tang, nw0[pe])[:, None] * np.cos(theta)
            + np.einsum("nd,nd->n", tang, nv0[pe])[:, None] * np.sin(theta))
    lo = np.full((ne, 4, N_THETA), np.inf)
    hi = np.full((ne, 4, N_THETA), np.inf)
    np.minimum.at(lo, (pe, pf), cval)
    np.minimum.at(hi, (pe, pf), -cval)
    fscore = np.maximum(lo, hi)
    tscore = fscore.min(axis=1)
    it = np.argmax(tscore, axis=1)
    score_w = tscore[np.arange(ne), it]
    score_w = np.where(np.isfinite(score_w), score_w, 1.0)
    th = theta[it][:, None]
    nw = np.cos(th) * nw0 + np.sin(th) * nv0
    nv = np.cross(nw, nu)

    # sign-free elements close to the surface may still hold a small cap
    spacing = np.linalg.norm(evec, axis=2).max(axis=1) / (len(_EDGE_IDX[0]) - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = np.abs(F) / gn
    dist = np.where(np.isfinite(dist), dist, np.inf)
    near = np.zeros(ne, dtype=bool)
    ce = np.flatnonzero(~active & (dist.min(axis=1) < spacing) & (S != 0).all(axis=1))
    if len(ce):
        best = np.argmin(dist[ce], axis=1)
        near[ce], _ = hidden_sign_change(surface, V[ce], _LAT[best], S[ce, best])

    return dict(active=active, topo_bad=topo_bad, near=near, corners=corners, cmask=cmask, fcrit=fcrit,
                nu=nu, nv=nv, nw=nw, score_nu=score_nu, score_w=score_w)


def _frame_extents(V, nu, nv, nw, pad=1e-12):
    R = np.stack([nu, nv, nw], axis=1)       # (ne, 3 axes, 3)
    loc = np.einsum("ekd,ead->eka", V, R)
    lo = loc.min(axis=1) - pad
    hi = loc.max(axis=1) + pad
    origin = np.einsum("ea,ead->ed", lo, R)
    return origin, hi - lo


def _chord_range(sA, rA, sB, rB, smask, s):
    """Bottom and top ``r`` of the slice polygon at abscissae ``s`` (n, m)."""
    ds = (sB - sA)[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = (s[:, :, None] - sA[:, None, :]) / ds
    inside = smask[:, None, :] & (np.abs(ds) > 0) & (lam >= -1e-12) & (lam <= 1.0 + 1e-12)
    with np.errstate(invalid="ignore"):
        r = rA[:, None, :] + lam * (rB - rA)[:, None, :]
    rlo = np.where(inside, r, np.inf).min(axis=2)
    rhi = np.where(inside, r, -np.inf).max(axis=2)
    return rlo, rhi


def _integrate_batch(surface, V, an, q, sel):
    """Quadrature points for the elements ``sel`` of the batch ``V``.

    Returns points, weights, the batch index of each point and a mask of
    elements found inconsistent while slicing.
    """
    gx, gw = gauss_legendre(q)
    empty = (np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=int), np.zeros(len(V), dtype=bool))
    if len(sel) == 0:
        return empty
    Vs = V[sel]
    nu, nv, nw = an["nu"][sel], an["nv"][sel], an["nw"][sel]
    origin, _ = _frame_extents(Vs, nu, nv, nw)
    hsize = np.linalg.norm(Vs[:, TET_EDGES[:, 0]] - Vs[:, TET_EDGES[:, 1]], axis=2).max(axis=1)

    # outer breakpoints: t-values of the corners
    tc = np.einsum("ecd,ed->ec", an["corners"][sel] - origin[:, None], nw)
    tc = np.where(an["cmask"][sel], tc, np.nan)
    tcrit = np.einsum("ecd,ed->ec", an["fcrit"][sel] - origin[:, None], nw)
    tc = np.concatenate([tc, tcrit], axis=1)
    tc = np.sort(tc, axis=1)
    t0, t1 = tc[:, :-1], tc[:, 1:]
    width = t1 - t0
    ok = np.isfinite(width) & (width > 1e-12 * hsize[:, None])
    el, iv = np.nonzero(ok)
    if len(el) == 0:
        return empty
    tt = t0[el, iv][:, None] + width[el, iv][:, None] * gx
    wt = width[el, iv][:, None] * gw
    el = np.repeat(el, q)
    tt = tt.ravel()
    wt = wt.ravel()

    # slice polygons: plane t = const intersected with the element
    o, U, Vv, W = origin[el], nu[el], nv[el], nw[el]
    P4 = Vs[el]
    dv = np.einsum("ekd,ed->ek", P4 - o[:, None], W) - tt[:, None]
    pos = dv >= 0
    ea, eb = TET_EDGES[:, 0], TET_EDGES[:, 1]
    xm = pos[:, ea] != pos[:, eb]            # (ns, 6)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = dv[:, ea] / (dv[:, ea] - dv[:, eb])
    lam = np.where(xm, lam, 0.0)
    P = P4[:, ea] + lam[:, :, None] * (P4[:, eb] - P4[:, ea])
    fP = np.zeros(xm.shape)
    fP[xm] = surface(P[xm])
    sP = np.einsum("ekd,ed->ek", P - o[:, None], Vv)
    rP = np.einsum("ekd,ed->ek", P - o[:, None], U)

    # polygon sides lie on faces: the two crossed edges of each face
    fe = _FACE_EDGES                          # (4, 3)
    crossed = xm[:, fe]                       # (ns, 4, 3)
    smask = crossed.sum(axis=2) == 2
    order = np.argsort(~crossed, axis=2, kind="stable")[:, :, :2]
    e1 = np.take_along_axis(np.broadcast_to(fe, crossed.shape), order[:, :, :1], axis=2)[..., 0]
    e2 = np.take_along_axis(np.broadcast_to(fe, crossed.shape), order[:, :, 1:], axis=2)[..., 0]
    rows = np.arange(len(el))[:, None]
    sA, sB = sP[rows, e1], sP[rows, e2]
    rA, rB = rP[rows, e1], rP[rows, e2]
    fA, fB = fP[rows, e1], fP[rows, e2]

    # slice breakpoints: polygon extent plus boundary roots
    smin = np.where(xm, sP, np.inf).min(axis=1)
    smax = np.where(xm, sP, -np.inf).max(axis=1)
    # phi along a side has at most one critical point; split the side there
    # so that each piece holds at most one root
    xa_all, xb_all = P[rows, e1], P[rows, e2]
    D = xb_all - xa_all
    gA = np.zeros(D.shape)
    gB = np.zeros(D.shape)
    gA[smask] = surface.gradient(xa_all[smask])
    gB[smask] = surface.gradient(xb_all[smask])
    dA = np.einsum("nfd,nfd->nf", gA, D)
    dB = np.einsum("nfd,nfd->nf", gB, D)
    crit = smask & (dA * dB < 0)
    xM, fM = xb_all.copy(), fB.copy()
    cs, cf = np.nonzero(crit)
    if len(cs):
        a0, d0 = xa_all[cs, cf], D[cs, cf]

        def slope(idx, u):
            x = a0[idx] + u[:, None] * d0[idx]
            return np.einsum("nd,nd->n", surface.gradient(x), d0[idx])

        uc = _bracket_root(slope, np.zeros(len(cs)), np.ones(len(cs)), dA[cs, cf], dB[cs, cf])
        xM[cs, cf] = a0 + uc[:, None] * d0
        fM[cs, cf] = surface(xM[cs, cf])
    pieces = [(xa_all, xM, fA, fM, smask), (xM, xb_all, fM, fB, crit)]
    sb = []
    for xa, xb, fa, fb, m in pieces:
        col = np.full(m.shape, np.nan)
        rs, rf = np.nonzero(m & ((fa < 0) != (fb < 0)))
        if len(rs):
            xr, _ = segment_roots(surface, xa[rs, rf], xb[rs, rf], fa[rs, rf], fb[rs, rf])
            col[rs, rf] = np.einsum("nd,nd->n", xr - o[rs], Vv[rs])
        sb.append(col)
    sb = np.concatenate(sb, axis=1)
    brk = np.sort(np.concatenate([smin[:, None], smax[:, None], sb], axis=1), axis=1)
    brk = np.clip(brk, smin[:, None], smax[:, None])
    s0, s1 = brk[:, :-1], brk[:, 1:]
    sw = s1 - s0
    sok = np.isfinite(sw) & (sw > 1e-12 * hsize[el][:, None])

    def chord_points(js, s):
        rlo, rhi = _chord_range(sA[js], rA[js], sB[js], rB[js], smask[js], s)
        base = o[js][:, None] + s[..., None] * Vv[js][:, None] + tt[js][:, None, None] * W[js][:, None]
        return base + rlo[..., None] * U[js][:, None], base + rhi[..., None] * U[js][:, None]

    # keep sub-intervals whose midpoint chord changes sign
    js, ks = np.nonzero(sok)
    smid = 0.5 * (s0[js, ks] + s1[js, ks])[:, None]
    xlo, xhi = chord_points(js, smid)
    act = (surface(xlo[:, 0]) < 0) != (surface(xhi[:, 0]) < 0)
    js, ks = js[act], ks[act]
    if len(js) == 0:
        return empty

    sn = s0[js, ks][:, None] + sw[js, ks][:, None] * gx
    ws = sw[js, ks][:, None] * gw * wt[js][:, None]
    xlo, xhi = chord_points(js, sn)
    xlo = xlo.reshape(-1, 3)
    xhi = xhi.reshape(-1, 3)
    flo = surface(xlo)
    fhi = surface(xhi)
    owner = np.repeat(el[js], q)
    good = (flo < 0) != (fhi < 0)
    bad_el = np.zeros(len(V), dtype=bool)
    if not good.all():
        bad_el[sel[np.unique(owner[~good])]] = True
    keep = good & ~bad_el[sel[owner]]
    xr, _ = segment_roots(surface, xlo[keep], xhi[keep], flo[keep], fhi[keep])
    g = surface.gradient(xr)
    unu = U[np.repeat(js, q)[keep]]
    w = ws.ravel()[keep] * np.linalg.norm(g, axis=1) / np.abs(np.einsum("nd,nd->n", g, unu))
    return xr, w, sel[owner[keep]], bad_el


def _face_rule(A, B, C, q):
    """Collapsed Gauss rule on triangles ``(A, B, C)`` (n, 3)."""
    gx, gw = gauss_legendre(q)
    xi, eta = np.meshgrid(gx, gx, indexing="ij")
    wxi, weta = np.meshgrid(gw, gw, indexing="ij")
    a = xi.ravel()
    b = (eta * (1.0 - xi)).ravel()
    w = (wxi * weta * (1.0 - xi)).ravel()
    area2 = np.linalg.norm(np.cross(B - A, C - A), axis=1)
    pts = A[:, None] + a[None, :, None] * (B - A)[:, None] + b[None, :, None] * (C - A)[:, None]
    return pts, w[None, :] * area2[:, None]


def _rules_for_tets(surface, V, labels, q, depth, max_depth, prefer_axis=None):
    """Recursive driver; returns a list of (points, weights, labels) blocks."""
    an = _analyse(surface, V, prefer_axis)
    frame_bad = (an["score_nu"] < TAU_SING) | (an["score_w"] < TAU_SLICE)
    hard = an["active"] & (an["topo_bad"] | frame_bad)
    force = depth >= max_depth
    # sign-free elements may still hold a cap: refine them when an edge hides a
    # pair of crossings or a projected sample lands inside
    refine = hard | (~an["active"] & (an["near"] | an["topo_bad"]))
    if force:
        fail = an["active"] & (an["score_nu"] < TAU_FAIL)
        if fail.any():
            i = int(np.flatnonzero(fail)[0])
            raise FrameFailure(f"best |nu.grad phi|/|grad phi| = {an['score_nu'][i]:.3g}",
                               element=int(labels[i]))
        if hard.any():
            log.warning("%d sub-elements integrated with a marginal frame", int(hard.sum()))
        sel = np.flatnonzero(an["active"])
    else:
        sel = np.flatnonzero(an["active"] & ~hard)
    pts, w, loc, bad = _integrate_batch(surface, V, an, q, sel)
    blocks = [(pts, w, labels[loc])]
    if not force:
        refine |= bad
    if not force and refine.any():
        children = _red_refine(V[refine])
        blocks += _rules_for_tets(surface, children, np.repeat(labels[refine], 8), q,
                                  depth + 1, max_depth, prefer_axis)
    return blocks


def choose_frame(vertices, surface, prefer_axis=None):
    """Frame for a single element given by its vertices (4, 3).

    ``nu`` is the coordinate axis (or, failing that, the mean normal) along
    which ``phi`` is most strongly monotone; ``nw`` is rotated about ``nu`` so
    that ``phi`` is monotone along the slice direction on every cut face.

    Raises
    ------
    FrameFailure
        If ``|nu·∇φ| / |∇φ| < 0.05`` somewhere on the element.
    """
    V = np.asarray(vertices, dtype=float).reshape(1, 4, 3)
    an = _analyse(surface, V, prefer_axis)
    if an["score_nu"][0] < TAU_FAIL:
        raise FrameFailure(f"best |nu.grad phi|/|grad phi| = {an['score_nu'][0]:.3g}")
    nu, nv, nw = an["nu"], an["nv"], an["nw"]
    origin, ext = _frame_extents(V, nu, nv, nw)
    return LocalFrame(origin[0], nu[0], nv[0], nw[0], ext[0], float(an["score_nu"][0]),
                      float(an["score_w"][0]))


def build_element_rule(vertices, surface, q, element=-1, max_depth=MAX_DEPTH, prefer_axis=None):
    """Quadrature rule on ``T ∩ Γ`` for one element given by its vertices."""
    V = np.asarray(vertices, dtype=float).reshape(1, 4, 3)
    blocks = _rules_for_tets(surface, V, np.zeros(1, dtype=int), q, 0, max_depth, prefer_axis)
    pts = np.concatenate([b[0] for b in blocks])
    w = np.concatenate([b[1] for b in blocks])
    return ElementSurfaceRule(pts, w, element, q)


def _chunk_rules(surface, V, labels, q, max_depth, prefer_axis):
    blocks = _rules_for_tets(surface, V, labels, q, 0, max_depth, prefer_axis)
    return (np.concatenate([b[0] for b in blocks]), np.concatenate([b[1] for b in blocks]),
            np.concatenate([b[2] for b in blocks]))


def build_rules(mesh, cutset, surface, q=4, workers=1, chunk=2000, max_depth=MAX_DEPTH,
                prefer_axis=None):
    """Build rules on all cut elements.

    Elements are processed in chunks (optionally on a thread pool); the
    result does not depend on ``workers`` or ``chunk``.  Elements whose patch
    turns out to have zero area are removed from the returned cut set.

    Parameters
    ----------
    q : int
        Gauss points per direction and sub-interval.
    prefer_axis : int, optional
        Use this coordinate axis as ``nu`` wherever it is admissible.
    """
    ids = cutset.ids
    V = mesh.vertices[mesh.tets[ids]]
    generic = np.flatnonzero(cutset.owned_face < 0)
    jobs = [generic[s:s + chunk] for s in range(0, len(generic), chunk)]

    def run(idx):
        try:
            return _chunk_rules(surface, V[idx], idx, q, max_depth, prefer_axis)
        except (FrameFailure, RootFindFailure) as err:
            if err.element is not None:
                err.element = int(ids[err.element])
                err.args = (f"element {err.element}: {err}",)
            raise

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    owned = np.flatnonzero(cutset.owned_face >= 0)
    if len(owned):
        tri = TET_FACES[cutset.owned_face[owned]]
        Vo = V[owned]
        r = np.arange(len(owned))[:, None]
        A, B, C = (Vo[r, tri[:, k:k + 1]][:, 0] for k in range(3))
        fp, fw = _face_rule(A, B, C, q)
        results.append((fp.reshape(-1, 3), fw.ravel(), np.repeat(owned, fp.shape[1])))

    if results:
        pts = np.concatenate([r[0] for r in results])
        w = np.concatenate([r[1] for r in results])
        loc = np.concatenate([r[2] for r in results])
    else:
        pts, w, loc = np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=int)
    order = np.argsort(loc, kind="stable")
    pts, w, loc = pts[order], w[order], loc[order]

    counts = np.bincount(loc, minlength=len(ids))
    keep = counts > 0
    if not keep.all():
        log.info("dropping %d cut elements with empty surface patch", int((~keep).sum()))
    new_index = np.cumsum(keep) - 1
    loc = new_index[loc]
    offsets = np.concatenate([[0], np.cumsum(counts[keep])])
    return SurfaceRules(pts, w, loc, offsets, cutset.subset(keep), int(q))


def integrate_global(rules, f):
    """``sum_T sum_i w_i f(x_i)`` for a vectorised field ``f``."""
    return rules.integrate(f)


def write_quadrature_csv(rules, path):
    """Write all points and weights as ``elem,x,y,z,w``."""
    elem = rules.cutset.ids[rules.element]
    data = np.column_stack([elem, rules.points, rules.weights])
    np.savetxt(path, data, delimiter=",", header="elem,x,y,z,w", comments="",
               fmt=["%d", "%.17g", "%.17g", "%.17g", "%.17g"])
