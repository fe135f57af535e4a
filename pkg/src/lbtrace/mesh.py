"""Uniform background tetrahedral meshes and cut-element classification."""
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .exceptions import EmptyCut

log = logging.getLogger(__name__)

__all__ = [
    "TetMesh",
    "CutElementSet",
    "build_uniform_mesh",
    "classify_cut_elements",
    "barycentric_lattice",
    "hidden_sign_change",
    "write_mesh",
    "TET_EDGES",
    "TET_FACES",
]

# local vertex pairs / triples; the face index equals the opposite vertex
TET_EDGES = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])
TET_FACES = np.array([(1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)])


@dataclass
class TetMesh:
    """Background tetrahedral partition of an axis-aligned box.

    ``lattice`` holds integer grid coordinates of the vertices, which give
    exact keys for identifying shared finite element nodes.
    """

    vertices: np.ndarray
    tets: np.ndarray
    lattice: np.ndarray
    N: int
    box: np.ndarray
    h: float

    @property
    def n_tets(self):
        return len(self.tets)

    def tet_vertices(self, ids=None):
        t = self.tets if ids is None else self.tets[ids]
        return self.vertices[t]

    def volumes(self, ids=None):
        v = self.tet_vertices(ids)
        e = v[:, 1:] - v[:, :1]
        return np.linalg.det(e) / 6.0


@dataclass
class CutElementSet:
    """Elements of the background mesh whose intersection with the surface has
    positive area.

    Attributes
    ----------
    ids : ndarray of int
        Sorted element indices.
    signs : ndarray of int8, shape (n, 4)
        Sign of ``phi`` at the element vertices (0 for exact zeros).
    owned_face : ndarray of int8
        Local face index when the surface patch coincides with an element face
        owned by this element, else -1.
    flagged : ndarray of bool
        Elements found by the interior sampling safeguard only.
    """

    ids: np.ndarray
    signs: np.ndarray
    owned_face: np.ndarray
    flagged: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.flagged is None:
            self.flagged = np.zeros(len(self.ids), dtype=bool)

    def __len__(self):
        return len(self.ids)

    def subset(self, mask):
        mask = np.asarray(mask)
        return CutElementSet(self.ids[mask], self.signs[mask], self.owned_face[mask],
                             self.flagged[mask])


def build_uniform_mesh(N, box=((-2.0,) * 3, (2.0,) * 3)):
    """Split ``N**3`` cubes into six tetrahedra each (Kuhn/Freudenthal).

    Every cube uses the same diagonal, so the split is conforming across cube
    faces.  All tetrahedra are returned with positive orientation.
    """
    N = int(N)
    if N < 1:
        raise ValueError("N must be >= 1")
    box = np.asarray(box, dtype=float).reshape(2, 3)
    if np.any(box[1] <= box[0]):
        raise ValueError("degenerate box")
    n1 = N + 1
    g = np.arange(n1)
    lattice = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    vertices = box[0] + (box[1] - box[0]) * lattice / N

    c = np.arange(N)
    cubes = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1).reshape(-1, 3)

    def vid(ijk):
        return (ijk[:, 0] * n1 + ijk[:, 1]) * n1 + ijk[:, 2]

    tets = []
    for perm in itertools.permutations(range(3)):
        step = np.zeros(3, dtype=int)
        corner = [vid(cubes)]
        for axis in perm:
            step = step.copy()
            step[axis] += 1
            corner.append(vid(cubes + step))
        t = np.stack(corner, axis=1)
        # odd permutations give negatively oriented paths
        inversions = sum(perm[i] > perm[j] for i in range(3) for j in range(i + 1, 3))
        if inversions % 2:
            t = t[:, [0, 2, 1, 3]]
        tets.append(t)
    tets = np.stack(tets, axis=1).reshape(-1, 4)
    h = float(np.linalg.norm((box[1] - box[0]) / N))
    return TetMesh(vertices, tets, lattice, N, box, h)


def barycentric_lattice(n):
    """Barycentric coordinates ``(i, j, k, l) / n`` with ``i + j + k + l = n``."""
    pts = [(i, j, k, n - i - j - k) for i in range(n + 1) for j in range(n + 1 - i)
           for k in range(n + 1 - i - j)]
    return np.array(pts, dtype=float) / n


def _strict_change(values, axis=-1):
    return (values.min(axis=axis) < 0) & (values.max(axis=axis) > 0)


def _project_simplex(v):
    """Euclidean projection of the rows of ``v`` onto the probability simplex."""
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    k = np.arange(1, v.shape[1] + 1)
    rho = (u - css / k > 0).sum(axis=1) - 1
    theta = css[np.arange(len(v)), rho] / (rho + 1)
    return np.maximum(v - theta[:, None], 0.0)


def hidden_sign_change(surface, V, lam0, sign, maxit=40):
    """Search tetrahedra for a point where ``phi`` has sign ``-sign``.

    Projected gradient descent on ``sign * phi`` in barycentric coordinates,
    started at ``lam0`` (n, 4).  Used on elements whose samples all share one
    sign but lie close to the surface, where a thin cap of the other sign may
    hide between the samples.

    Returns
    -------
    found : bool ndarray (n,)
    lam : ndarray (n, 4)
        Barycentric coordinates of the last iterate.
    """
    lam = np.array(lam0, dtype=float)
    sign = np.asarray(sign, dtype=float)
    psi = sign * surface(np.einsum("nk,nkd->nd", lam, V))
    found = psi < 0
    todo = np.flatnonzero(~found)
    for _ in range(maxit):
        if len(todo) == 0:
            break
        Vt, lt, pt = V[todo], lam[todo], psi[todo]
        g = sign[todo, None] * surface.gradient(np.einsum("nk,nkd->nd", lt, Vt))
        gl = np.einsum("nkd,nd->nk", Vt, g)
        gl -= gl.mean(axis=1, keepdims=True)
        gn2 = np.einsum("nk,nk->n", gl, gl)
        live = gn2 > 0
        # a step to the zero of the linearisation stalls when the minimum is
        # barely below zero, so trial steps also start at a fixed length
        safe = np.where(live, gn2, 1.0)
        alpha = np.where(live, np.maximum(2.0 * np.abs(pt) / safe, 0.5 / np.sqrt(safe)), 0.0)
        new_l, new_p = lt.copy(), pt.copy()
        pending = np.flatnonzero(live)
        for _ in range(30):
            if len(pending) == 0:
                break
            cand = _project_simplex(lt[pending] - alpha[pending, None] * gl[pending])
            cp = sign[todo[pending]] * surface(np.einsum("nk,nkd->nd", cand, Vt[pending]))
            better = cp < pt[pending]
            new_l[pending[better]] = cand[better]
            new_p[pending[better]] = cp[better]
            alpha[pending] *= 0.5
            pending = pending[~better]
        moved = np.abs(new_l - lt).max(axis=1) > 1e-14
        lam[todo], psi[todo] = new_l, new_p
        found[todo] = new_p < 0
        todo = todo[~found[todo] & moved]
    return found, lam


def classify_cut_elements(mesh, surface, n_sample=4, region=None, chunk=200_000):
    """Find the elements ``T`` with ``meas(T ∩ Γ) > 0``.

    An element is cut when ``phi`` changes sign strictly over its vertices,
    over a barycentric sampling lattice with ``n_sample`` subdivisions per
    edge, or at a point found by descending ``±phi`` from the sample closest
    to the surface.  Elements whose face lies on the surface are kept only once: the
    face belongs to the element with the smaller index.

    Parameters
    ----------
    region : callable, optional
        Boolean mask on element centroids; elements outside it are dropped
        (used to select one component of a level set).

    Raises
    ------
    EmptyCut
        If no element is cut.
    """
    phi_v = surface(mesh.vertices)
    pt = phi_v[mesh.tets]
    cut = _strict_change(pt, axis=1)
    flagged = np.zeros(mesh.n_tets, dtype=bool)

    # sampling safeguard, restricted to a Lipschitz band around the surface
    bary = barycentric_lattice(n_sample)
    interior = bary[(bary < 1.0).all(axis=1)]
    if len(interior):
        cand = np.flatnonzero(~cut)
        for s in range(0, len(cand), chunk):
            ids = cand[s:s + chunk]
            v = mesh.vertices[mesh.tets[ids]]
            centroid = v.mean(axis=1)
            lip = 2.0 * np.linalg.norm(surface.gradient(np.concatenate([centroid[:, None], v], axis=1)),
                                       axis=-1).max(axis=1)
            near = np.abs(pt[ids]).min(axis=1) <= lip * mesh.h + surface.eps_surf
            ids = ids[near]
            if len(ids) == 0:
                continue
            v = mesh.vertices[mesh.tets[ids]]
            x = np.einsum("sk,ekd->esd", interior, v)
            ps = np.concatenate([surface(x), pt[ids]], axis=1)
            hit = _strict_change(ps, axis=1)
            flagged[ids[hit]] = True
            # thin caps between the samples: descend from the closest sample
            rest = np.flatnonzero(~hit & (np.abs(ps).min(axis=1) > 0))
            if len(rest):
                lat = np.concatenate([interior, np.eye(4)])
                start = lat[np.argmin(np.abs(ps[rest]), axis=1)]
                sign = np.sign(ps[rest, 0])
                found, _ = hidden_sign_change(surface, v[rest], start, sign)
                flagged[ids[rest[found]]] = True
    cut |= flagged

    # surface patches lying on an element face
    owned_face = np.full(mesh.n_tets, -1, dtype=np.int8)
    zero = np.abs(pt) <= surface.eps_surf
    cand = np.flatnonzero(~cut & (zero.sum(axis=1) >= 3))
    if len(cand):
        keys, owners, local = [], [], []
        fbary = barycentric_lattice(3)
        fbary = fbary[:, :3][np.isclose(fbary[:, 3], 0.0)]
        for e in cand:
            for f, tri in enumerate(TET_FACES):
                if not zero[e, tri].all():
                    continue
                x = fbary @ mesh.vertices[mesh.tets[e, tri]]
                if np.all(np.abs(surface(x)) <= surface.eps_surf):
                    keys.append(tuple(sorted(mesh.tets[e, tri])))
                    owners.append(e)
                    local.append(f)
        best = {}
        for key, e, f in zip(keys, owners, local):
            if key not in best or e < best[key][0]:
                best[key] = (e, f)
        for e, f in best.values():
            if owned_face[e] < 0:
                owned_face[e] = f
                cut[e] = True

    if region is not None:
        centroid = mesh.vertices[mesh.tets].mean(axis=1)
        cut &= np.asarray(region(centroid), dtype=bool)

    ids = np.flatnonzero(cut)
    if len(ids) == 0:
        raise EmptyCut(f"surface {surface.name!r} does not cut the mesh")
    n_flag = int(flagged[ids].sum())
    if n_flag:
        log.info("%d elements found by the sampling safeguard only", n_flag)
    signs = np.sign(pt[ids]).astype(np.int8)
    signs[zero[ids]] = 0
    return CutElementSet(ids, signs, owned_face[ids], flagged[ids])


def write_mesh(mesh, path, elements=None):
    """Dump vertices and tetrahedra as plain text for debugging."""
    tets = mesh.tets if elements is None else mesh.tets[elements]
    with open(path, "w") as fh:
        fh.write(f"vertices {len(mesh.vertices)}\n")
        np.savetxt(fh, mesh.vertices, fmt="%.17g")
        fh.write(f"tets {len(tets)}\n")
        np.savetxt(fh, tets, fmt="%d")
