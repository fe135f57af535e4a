"""Implicit surfaces given as the zero level set of a scalar function.

All evaluations are vectorised over leading axes: points are arrays of shape
``(..., 3)``.  Built-in surfaces are negative inside and positive outside.
"""
import json
from pathlib import Path

import numpy as np

from .exceptions import DegenerateGradient

__all__ = [
    "LevelSetSurface",
    "sphere",
    "tooth",
    "polynomial_surface",
    "load_surface",
]


class LevelSetSurface:
    """A closed surface ``{x : phi(x) = 0}``.

    Parameters
    ----------
    phi : callable
        Maps an array of points ``(..., 3)`` to values ``(...)``.
    grad : callable, optional
        Maps points to gradients ``(..., 3)``.  When omitted, central finite
        differences with step ``fd_step`` are used.
    bbox : array_like of shape (2, 3)
        Axis-aligned box containing the surface.
    name : str
        Identifier used in reports.
    fd_step : float, optional
        Finite-difference step; defaults to ``1e-6`` times the box diameter.
    eps_grad : float
        Gradients with norm at or below this value count as degenerate.
    eps_surf : float, optional
        Tolerance for "point lies on the surface"; defaults to ``1e-10`` times
        the box diameter.
    """

    def __init__(self, phi, grad=None, bbox=((-2.0,) * 3, (2.0,) * 3), name="user",
                 fd_step=None, eps_grad=1e-12, eps_surf=None):
        self._phi = phi
        self._grad = grad
        self.bbox = np.asarray(bbox, dtype=float).reshape(2, 3)
        self.name = name
        self.diameter = float(np.linalg.norm(self.bbox[1] - self.bbox[0]))
        self.fd_step = 1e-6 * self.diameter if fd_step is None else float(fd_step)
        self.eps_grad = float(eps_grad)
        self.eps_surf = 1e-10 * self.diameter if eps_surf is None else float(eps_surf)

    def __repr__(self):
        return f"LevelSetSurface(name={self.name!r})"

    @property
    def has_analytic_gradient(self):
        return self._grad is not None

    def value(self, x):
        return self._phi(np.asarray(x, dtype=float))

    __call__ = value

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        if self._grad is not None:
            return self._grad(x)
        h = self.fd_step
        g = np.empty(x.shape, dtype=float)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            g[..., i] = (self._phi(x + e) - self._phi(x - e)) / (2.0 * h)
        return g

    def unit_normal(self, x):
        """Return ``grad(phi) / |grad(phi)|``.

        Raises
        ------
        DegenerateGradient
            If ``|grad(phi)| <= eps_grad`` at any of the points.
        """
        g = self.gradient(x)
        nrm = np.linalg.norm(g, axis=-1, keepdims=True)
        if np.any(nrm <= self.eps_grad):
            raise DegenerateGradient(f"|grad phi| <= {self.eps_grad:g} on {self.name}")
        return g / nrm

    def tangential_project(self, x, v):
        """Apply ``P = I - n n^T`` at surface points ``x`` to vectors ``v``."""
        n = self.unit_normal(x)
        v = np.asarray(v, dtype=float)
        return v - np.sum(v * n, axis=-1, keepdims=True) * n

    def on_surface(self, x, tol=None):
        tol = self.eps_surf if tol is None else tol
        return np.abs(self.value(x)) <= tol


def sphere(radius=1.0, center=(0.0, 0.0, 0.0), bbox=None):
    """Sphere with the exact signed distance ``|x - c| - R``."""
    c = np.asarray(center, dtype=float)
    R = float(radius)

    def phi(x):
        return np.linalg.norm(x - c, axis=-1) - R

    def grad(x):
        d = x - c
        r = np.linalg.norm(d, axis=-1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            g = d / r
        return np.where(r > 0, g, 0.0)

    if bbox is None:
        bbox = (c - 2 * R, c + 2 * R)
    return LevelSetSurface(phi, grad, bbox=bbox, name="sphere")


_TOOTH_A = 256.0 / 625.0
_TOOTH_B = 16.0 / 25.0


def tooth(bbox=((-2.0,) * 3, (2.0,) * 3)):
    """Quartic "tooth" surface ``a*sum(x_i^4) - b*sum(x_i^2) = 0``.

    The zero set also contains the isolated point at the origin; no element is
    cut there because ``phi < 0`` in a punctured neighbourhood of it.
    """
    def phi(x):
        x2 = x * x
        return _TOOTH_A * np.sum(x2 * x2, axis=-1) - _TOOTH_B * np.sum(x2, axis=-1)

    def grad(x):
        return 4.0 * _TOOTH_A * x ** 3 - 2.0 * _TOOTH_B * x

    return LevelSetSurface(phi, grad, bbox=bbox, name="tooth")


def polynomial_surface(terms, bbox=((-2.0,) * 3, (2.0,) * 3), name="polynomial"):
    """Surface defined by a polynomial ``sum_k c_k x^a_k y^b_k z^c_k``.

    Parameters
    ----------
    terms : sequence of (coef, (a, b, c))
        Coefficients and non-negative integer exponents.
    """
    coefs = np.array([float(t[0]) for t in terms])
    powers = np.array([[int(p) for p in t[1]] for t in terms], dtype=int).reshape(-1, 3)
    if np.any(powers < 0):
        raise ValueError("exponents must be non-negative")

    def _pow(x, p):
        # x ** 0 == 1 also at x == 0
        return np.where(p == 0, 1.0, x ** np.maximum(p, 0))

    def phi(x):
        out = np.zeros(x.shape[:-1])
        for c, p in zip(coefs, powers):
            out = out + c * _pow(x[..., 0], p[0]) * _pow(x[..., 1], p[1]) * _pow(x[..., 2], p[2])
        return out

    def grad(x):
        g = np.zeros(x.shape)
        for c, p in zip(coefs, powers):
            f = [_pow(x[..., i], p[i]) for i in range(3)]
            for i in range(3):
                if p[i] == 0:
                    continue
                d = p[i] * _pow(x[..., i], p[i] - 1)
                others = [f[j] for j in range(3) if j != i]
                g[..., i] += c * d * others[0] * others[1]
        return g

    return LevelSetSurface(phi, grad, bbox=bbox, name=name)


def load_surface(spec):
    """Resolve a surface by name or from a JSON file.

    ``spec`` is ``"sphere"``, ``"tooth"``, ``"file:<path>"`` or a path.  The
    JSON file holds ``{"name": ..., "terms": [[coef, [a, b, c]], ...],
    "bbox": [[x0, y0, z0], [x1, y1, z1]]}``.
    """
    if isinstance(spec, LevelSetSurface):
        return spec
    if spec == "sphere":
        return sphere()
    if spec == "tooth":
        return tooth()
    path = Path(spec[5:] if spec.startswith("file:") else spec)
    if not path.exists():
        raise ValueError(f"unknown surface {spec!r}")
    cfg = json.loads(path.read_text())
    bbox = cfg.get("bbox", [[-2.0] * 3, [2.0] * 3])
    return polynomial_surface(cfg["terms"], bbox=bbox, name=cfg.get("name", path.stem))
