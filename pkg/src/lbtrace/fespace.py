"""Continuous Lagrange spaces of degree 1 and 2 on the band of cut elements.

Local dof order is the four vertices followed by the six edge midpoints in
``TET_EDGES`` order.  Global dofs are keyed by doubled integer lattice
coordinates, which makes the identification of shared nodes exact, and are
numbered lexicographically by position.
"""
from dataclasses import dataclass

import numpy as np

from .exceptions import OutsideElement, UnsupportedDegree
from .mesh import TET_EDGES

__all__ = [
    "FESpace",
    "ShapeEval",
    "build_space",
    "barycentric",
    "barycentric_gradients",
    "shape_values",
    "shape_gradients",
    "eval_basis",
    "tangential_gradient",
    "interpolate",
    "evaluate_at_rules",
    "SUPPORTED_DEGREES",
]

SUPPORTED_DEGREES = (1, 2)
BARY_TOL = 1e-10


@dataclass
class FESpace:
    """Lagrange space ``W_h`` on the cut elements.

    Attributes
    ----------
    k : int
        Polynomial degree.
    mesh : TetMesh
    cutset : CutElementSet
        Elements carrying dofs; ``element_dofs[i]`` belongs to ``cutset.ids[i]``.
    element_dofs : ndarray of int, shape (n_elements, 4 or 10)
    dof_coords : ndarray, shape (M, 3)
    """

    k: int
    mesh: object
    cutset: object
    element_dofs: np.ndarray
    dof_coords: np.ndarray

    @property
    def M(self):
        return len(self.dof_coords)

    @property
    def n_local(self):
        return self.element_dofs.shape[1]

    def element_vertices(self, i=None):
        ids = self.cutset.ids if i is None else self.cutset.ids[i]
        return self.mesh.vertices[self.mesh.tets[ids]]


@dataclass
class ShapeEval:
    values: np.ndarray
    gradients: np.ndarray
    dofs: np.ndarray


def build_space(mesh, cutset, k):
    """Lagrange space of degree ``k`` on the elements of ``cutset``.

    Raises
    ------
    UnsupportedDegree
        If ``k`` is not 1 or 2.
    """
    if k not in SUPPORTED_DEGREES:
        raise UnsupportedDegree(f"degree {k!r} not in {SUPPORTED_DEGREES}")
    if len(cutset) == 0:
        raise ValueError("empty cut set")
    tets = mesh.tets[cutset.ids]
    lat = 2 * mesh.lattice[tets]                        # (n, 4, 3)
    if k == 2:
        mid = (lat[:, TET_EDGES[:, 0]] + lat[:, TET_EDGES[:, 1]]) // 2
        lat = np.concatenate([lat, mid], axis=1)
    n, nloc = lat.shape[:2]
    # np.unique sorts rows lexicographically, which equals sorting by position
    keys, inverse = np.unique(lat.reshape(-1, 3), axis=0, return_inverse=True)
    lo, hi = mesh.box
    coords = lo + (hi - lo) * keys / (2.0 * mesh.N)
    return FESpace(int(k), mesh, cutset, inverse.reshape(n, nloc), coords)


def barycentric(V, x):
    """Barycentric coordinates of points ``x (..., 3)`` in tets ``V (..., 4, 3)``."""
    V = np.asarray(V, dtype=float)
    x = np.asarray(x, dtype=float)
    J = np.swapaxes(V[..., 1:, :] - V[..., :1, :], -1, -2)
    lam = np.linalg.solve(J, (x - V[..., 0, :])[..., None])[..., 0]
    return np.concatenate([1.0 - lam.sum(axis=-1, keepdims=True), lam], axis=-1)


def barycentric_gradients(V):
    """Constant gradients of the barycentric coordinates, shape ``(..., 4, 3)``."""
    V = np.asarray(V, dtype=float)
    J = np.swapaxes(V[..., 1:, :] - V[..., :1, :], -1, -2)
    Jinv = np.linalg.inv(J)
    return np.concatenate([-Jinv.sum(axis=-2, keepdims=True), Jinv], axis=-2)


def shape_values(lam, k):
    """Basis values from barycentric coordinates ``lam (..., 4)``."""
    if k == 1:
        return lam.copy()
    if k == 2:
        a, b = lam[..., TET_EDGES[:, 0]], lam[..., TET_EDGES[:, 1]]
        return np.concatenate([lam * (2.0 * lam - 1.0), 4.0 * a * b], axis=-1)
    raise UnsupportedDegree(f"degree {k!r} not in {SUPPORTED_DEGREES}")


def shape_gradients(lam, dlam, k):
    """Basis gradients, shape ``(..., n_local, 3)``.

    ``dlam`` holds the barycentric gradients and broadcasts against ``lam``.
    """
    dlam = np.broadcast_to(dlam, lam.shape + (3,))
    if k == 1:
        return dlam.copy()
    if k == 2:
        gv = (4.0 * lam - 1.0)[..., None] * dlam
        ia, ib = TET_EDGES[:, 0], TET_EDGES[:, 1]
        ge = 4.0 * (lam[..., ia, None] * dlam[..., ib, :] + lam[..., ib, None] * dlam[..., ia, :])
        return np.concatenate([gv, ge], axis=-2)
    raise UnsupportedDegree(f"degree {k!r} not in {SUPPORTED_DEGREES}")


def eval_basis(space, element, x, tol=BARY_TOL):
    """Values and gradients of the local basis of cut element ``element``
    (an index into ``space.cutset``) at a point ``x``.

    Raises
    ------
    OutsideElement
        If a barycentric coordinate of ``x`` is below ``-tol``.
    """
    V = space.element_vertices(element)
    lam = barycentric(V, x)
    if lam.min() < -tol:
        raise OutsideElement(f"point {np.asarray(x).tolist()} outside element "
                             f"{int(space.cutset.ids[element])} (min barycentric {lam.min():.3g})")
    dlam = barycentric_gradients(V)
    return ShapeEval(shape_values(lam, space.k), shape_gradients(lam, dlam, space.k),
                     space.element_dofs[element])


def tangential_gradient(space, surface, element, x, coeffs):
    """Surface gradient ``P ∇u_h`` at a point ``x`` on the surface."""
    ev = eval_basis(space, element, x)
    g = np.asarray(coeffs, dtype=float)[ev.dofs] @ ev.gradients
    return surface.tangential_project(x, g)


def interpolate(space, u):
    """Nodal interpolant coefficients of a vectorised field ``u``."""
    return np.asarray(u(space.dof_coords), dtype=float)


def evaluate_at_rules(space, rules, lo=0, hi=None):
    """Basis data at the quadrature points of elements ``lo:hi`` of ``rules``.

    ``rules.cutset`` must be the cut set the space was built on.

    Returns
    -------
    values : ndarray, shape (n_points, n_local)
    gradients : ndarray, shape (n_points, n_local, 3)
        Ambient gradients.
    element : ndarray of int, shape (n_points,)
        Index into ``space.cutset`` of the element owning each point.
    """
    hi = len(rules) if hi is None else hi
    sl = slice(rules.offsets[lo], rules.offsets[hi])
    el = rules.element[sl]
    x = rules.points[sl]
    V = space.element_vertices(np.arange(lo, hi))
    lam = barycentric(V[el - lo], x)
    dlam = barycentric_gradients(V)[el - lo]
    return shape_values(lam, space.k), shape_gradients(lam, dlam, space.k), el
