"""Parametric test surfaces and their tensor Gauss-Legendre discretizations.

Every surface is a union of quadrilateral patches. A patch is the image of a
rectangle of a global parameter domain under a smooth map; its chart is
re-parametrized over the unit square so that all patches look alike to the
quadrature code.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def gauss_legendre_01(q: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(q)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


class ParametricSurface:
    """A closed surface given by one or more smooth maps (faces) of rectangles.

    Subclasses implement :meth:`_evaluate_face`, returning points and the two
    parameter derivatives for a single face.
    """

    n_faces = 1
    #: rectangle (u0, u1, v0, v1) of the parameter domain of each face
    domain = (0.0, 1.0, 0.0, 1.0)
    #: identifier of a compiled evaluator in ``fmmlu.quadrature`` (None: numpy only)
    compiled_code = None

    def compiled_params(self) -> np.ndarray:
        return np.zeros(0)

    def __init__(self):
        self._orientation = np.ones(self.n_faces)
        for face in range(self.n_faces):
            u0, u1, v0, v1 = self.domain
            uc = np.array([0.5 * (u0 + u1)])
            vc = np.array([0.5 * (v0 + v1)])
            X, Xu, Xv = self._evaluate_face(face, uc, vc)
            nrm = np.cross(Xu, Xv)
            if np.dot(nrm[0], X[0] - self.interior_reference(X)[0]) < 0:
                self._orientation[face] = -1.0

    def _evaluate_face(self, face, u, v):
        raise NotImplementedError

    def interior_reference(self, X: np.ndarray) -> np.ndarray:
        """Points inside the body, used only to orient normals outward."""
        return np.zeros_like(X)

    def evaluate(self, face, u, v):
        """Evaluate ``X, X_u, X_v`` at parameters (vectorized over faces).

        The tangent ``X_v`` is sign-flipped on faces whose natural orientation
        points inward, so ``X_u x X_v`` is always the outward normal.
        """
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        face = np.broadcast_to(np.asarray(face), u.shape)
        X = np.empty(u.shape + (3,))
        Xu = np.empty_like(X)
        Xv = np.empty_like(X)
        for f in np.unique(face):
            m = face == f
            x, xu, xv = self._evaluate_face(int(f), u[m], v[m])
            X[m], Xu[m], Xv[m] = x, xu, self._orientation[int(f)] * xv
        return X, Xu, Xv


class WigglyTorus(ParametricSurface):
    """The wiggly torus ``X(u, v)`` on ``[0, 2pi]^2``."""

    domain = (0.0, 2 * np.pi, 0.0, 2 * np.pi)
    compiled_code = 0

    def _evaluate_face(self, face, u, v):
        rho = 2.0 + np.cos(v) + 0.25 * np.cos(5 * u)
        drho_du = -1.25 * np.sin(5 * u)
        drho_dv = -np.sin(v)
        cu, su = np.cos(u), np.sin(u)
        X = np.stack([1.2 * rho * cu, rho * su, 1.7 * np.sin(v)], axis=-1)
        Xu = np.stack([1.2 * (drho_du * cu - rho * su),
                       drho_du * su + rho * cu,
                       np.zeros_like(u)], axis=-1)
        Xv = np.stack([1.2 * drho_dv * cu, drho_dv * su, 1.7 * np.cos(v)],
                      axis=-1)
        return X, Xu, Xv

    def interior_reference(self, X):
        # tube centre line at the same azimuth
        u = np.arctan2(X[..., 1] / 1.0, X[..., 0] / 1.2)
        rho = 2.0 + 0.25 * np.cos(5 * u)
        return np.stack([1.2 * rho * np.cos(u), rho * np.sin(u),
                         np.zeros_like(u)], axis=-1)

    def interior_points(self, u, v, shrink=0.5):
        """Points strictly inside the tube, at fraction ``shrink`` of its radius."""
        rho = 2.0 + shrink * np.cos(v) + 0.25 * np.cos(5 * u)
        return np.stack([1.2 * rho * np.cos(u), rho * np.sin(u),
                         1.7 * shrink * np.sin(v)], axis=-1)


# (normal axis, first tangent axis, second tangent axis, sign) per cube face;
# tangent order is irrelevant since normals are re-oriented.
_CUBE_FACES = [(0, 1, 2, 1.0), (0, 1, 2, -1.0), (1, 2, 0, 1.0),
               (1, 2, 0, -1.0), (2, 0, 1, 1.0), (2, 0, 1, -1.0)]


class CubedEllipsoid(ParametricSurface):
    """Ellipsoid with semi-axes ``axes``, charted by projecting a cube's faces."""

    n_faces = 6
    domain = (-1.0, 1.0, -1.0, 1.0)
    compiled_code = 1

    def __init__(self, axes=(1.0, 1.0, 1.0)):
        self.axes = np.asarray(axes, dtype=float)
        super().__init__()

    def compiled_params(self):
        return self.axes.copy()

    def _evaluate_face(self, face, u, v):
        k, a, b, sgn = _CUBE_FACES[face]
        c = np.zeros(u.shape + (3,))
        c[..., k] = sgn
        c[..., a] = u
        c[..., b] = v
        r = np.linalg.norm(c, axis=-1, keepdims=True)
        s = c / r
        # d(c/|c|) = (I - s s^T) dc / |c|
        du = np.zeros_like(c)
        du[..., a] = 1.0
        dv = np.zeros_like(c)
        dv[..., b] = 1.0
        su = (du - s * s[..., a:a + 1]) / r
        sv = (dv - s * s[..., b:b + 1]) / r
        return s * self.axes, su * self.axes, sv * self.axes


@dataclass(frozen=True)
class Chart:
    """A patch chart over the unit square ``(s, t) in [0, 1]^2``."""

    surface: ParametricSurface
    face: int
    u0: float
    u1: float
    v0: float
    v1: float

    def to_global(self, s, t):
        return (self.u0 + (self.u1 - self.u0) * np.asarray(s),
                self.v0 + (self.v1 - self.v0) * np.asarray(t))

    def __call__(self, s, t):
        X, Xs, Xt = self.evaluate(s, t)
        return X

    def evaluate(self, s, t):
        """Return ``X, X_s, X_t`` with derivatives in unit-square coordinates."""
        u, v = self.to_global(s, t)
        X, Xu, Xv = self.surface.evaluate(self.face, u, v)
        return X, Xu * (self.u1 - self.u0), Xv * (self.v1 - self.v0)


@dataclass
class Patch:
    chart: Chart
    start: int
    stop: int
    center: np.ndarray
    diameter: float


@dataclass
class SurfaceDiscretization:
    """Nodes, outward unit normals and smooth weights of a patched surface.

    Nodes of patch ``j`` occupy the contiguous range ``patches[j].start`` to
    ``patches[j].stop``; ``ref_coords`` holds each node's unit-square
    coordinates inside its patch.
    """

    nodes: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    patch_of_node: np.ndarray
    ref_coords: np.ndarray
    patches: list
    order: int
    surface: ParametricSurface
    name: str = ""
    interior_sources: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.weights)

    @property
    def n_patches(self) -> int:
        return len(self.patches)

    @property
    def patch_centers(self) -> np.ndarray:
        return np.array([pt.center for pt in self.patches])

    @property
    def patch_diameters(self) -> np.ndarray:
        return np.array([pt.diameter for pt in self.patches])

    def points_per_wavelength(self, k: float) -> np.ndarray:
        """Effective sampling rate ``R_j k / pi`` per patch."""
        return self.patch_diameters * k / np.pi

    def circumradius(self) -> float:
        c = self.nodes.mean(axis=0)
        return float(np.max(np.linalg.norm(self.nodes - c, axis=1)))

    def to_csv(self, path):
        """Write ``x,y,z,nx,ny,nz,w,patch`` rows for visualization."""
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["x", "y", "z", "nx", "ny", "nz", "w", "patch"])
            for x, nv, w, j in zip(self.nodes, self.normals, self.weights,
                                   self.patch_of_node):
                wr.writerow([*map(repr, x), *map(repr, nv), repr(w), int(j)])


def patch_diameter(chart: Chart) -> float:
    """Max pairwise distance among the images of the 4 corners and the centre."""
    s = np.array([0.0, 1.0, 0.0, 1.0, 0.5])
    t = np.array([0.0, 0.0, 1.0, 1.0, 0.5])
    P = chart(s, t)
    d = np.linalg.norm(P[:, None, :] - P[None, :, :], axis=-1)
    return float(d.max())


def discretize(charts, p: int, surface, name="") -> SurfaceDiscretization:
    """Place a ``p x p`` Gauss-Legendre grid on every chart."""
    if p < 2:
        raise ValueError("polynomial order p must be >= 2")
    x, w = gauss_legendre_01(p)
    S, T = np.meshgrid(x, x, indexing="ij")
    W = np.outer(w, w).ravel()
    S, T = S.ravel(), T.ravel()
    m = p * p
    nodes, normals, weights, ref, patches = [], [], [], [], []
    for j, ch in enumerate(charts):
        X, Xs, Xt = ch.evaluate(S, T)
        nv = np.cross(Xs, Xt)
        J = np.linalg.norm(nv, axis=1)
        if np.any(J <= 0):
            raise ValueError(f"degenerate chart on patch {j}")
        nodes.append(X)
        normals.append(nv / J[:, None])
        weights.append(W * J)
        ref.append(np.stack([S, T], axis=1))
        patches.append(Patch(ch, j * m, (j + 1) * m, ch(0.5, 0.5),
                             patch_diameter(ch)))
    npt = len(charts)
    return SurfaceDiscretization(
        nodes=np.concatenate(nodes), normals=np.concatenate(normals),
        weights=np.concatenate(weights),
        patch_of_node=np.repeat(np.arange(npt), m),
        ref_coords=np.concatenate(ref), patches=patches, order=p,
        surface=surface, name=name)


def _grid_charts(surface, face, nu, nv):
    u0, u1, v0, v1 = surface.domain
    us = np.linspace(u0, u1, nu + 1)
    vs = np.linspace(v0, v1, nv + 1)
    return [Chart(surface, face, us[a], us[a + 1], vs[b], vs[b + 1])
            for a in range(nu) for b in range(nv)]


def make_wiggly_torus(n_u_patches: int, n_v_patches: int, p: int
                      ) -> SurfaceDiscretization:
    if n_u_patches < 1 or n_v_patches < 1:
        raise ValueError("need at least one patch per direction")
    surf = WigglyTorus()
    disc = discretize(_grid_charts(surf, 0, n_u_patches, n_v_patches), p, surf,
                      name=f"torus-{n_u_patches}x{n_v_patches}")
    return disc


def torus_patch_split(n_target: int, p: int) -> tuple[int, int]:
    """Patch counts ``(n_u, n_v)`` with ``1.5 <= n_u / n_v <= 2.5`` and ``n`` closest to a target.

    Ties go to the aspect ratio closest to 2.
    """
    best = None
    for nv in range(1, 400):
        for nu in range(max(1, int(np.ceil(1.5 * nv))), int(2.5 * nv) + 1):
            key = (abs(nu * nv * p * p - n_target), abs(nu / nv - 2))
            if best is None or key < best[0]:
                best = (key, nu, nv)
    return best[1], best[2]


def make_sphere(radius: float, n_patches_per_face: int, p: int
                ) -> SurfaceDiscretization:
    if radius <= 0:
        raise ValueError("radius must be positive")
    surf = CubedEllipsoid((radius, radius, radius))
    charts = []
    for face in range(6):
        charts += _grid_charts(surf, face, n_patches_per_face,
                               n_patches_per_face)
    return discretize(charts, p, surf, name=f"sphere-{n_patches_per_face}")


PLATE_AXES = (1.0, 1.0, 0.25)


def make_multiscale_plate(refine_depth: int, p: int, base: int = 2
                          ) -> SurfaceDiscretization:
    """Flattened ellipsoid with patches graded geometrically toward the +z pole.

    All six cube faces start with ``base x base`` patches. For
    ``refine_depth > 0`` the patches touching the pole (centre of the +z face)
    are split into four ``refine_depth + 1`` times; the extra split makes up
    for the projection shrinking off-centre patches, so the diameter ratio is
    at least ``2**refine_depth``.
    """
    if refine_depth < 0:
        raise ValueError("refine_depth must be >= 0")
    surf = CubedEllipsoid(PLATE_AXES)
    top = 4  # +z face in _CUBE_FACES
    charts = []
    for face in range(6):
        if face != top:
            charts += _grid_charts(surf, face, base, base)
    cells = [(c.u0, c.u1, c.v0, c.v1) for c in _grid_charts(surf, top, base, base)]
    for _ in range(refine_depth + 1 if refine_depth > 0 else 0):
        nxt = []
        for (a0, a1, b0, b1) in cells:
            if a0 <= 0.0 <= a1 and b0 <= 0.0 <= b1:
                am, bm = 0.5 * (a0 + a1), 0.5 * (b0 + b1)
                nxt += [(a0, am, b0, bm), (am, a1, b0, bm),
                        (a0, am, bm, b1), (am, a1, bm, b1)]
            else:
                nxt.append((a0, a1, b0, b1))
        cells = nxt
    charts += [Chart(surf, top, *c) for c in cells]
    return discretize(charts, p, surf, name=f"plate-{refine_depth}")


def interior_sources(disc: SurfaceDiscretization, count: int,
                     rng: np.random.Generator, shrink: float = 0.5) -> np.ndarray:
    """Random points strictly inside the body bounded by ``disc``.

    For the torus the points lie on the tube shrunk to ``shrink`` of its
    radius; for star-shaped ellipsoids they lie on the surface scaled by
    ``shrink`` about the origin.
    """
    surf = disc.surface
    if isinstance(surf, WigglyTorus):
        u = rng.uniform(0, 2 * np.pi, count)
        v = rng.uniform(0, 2 * np.pi, count)
        return surf.interior_points(u, v, shrink)
    idx = rng.choice(disc.n, size=count, replace=disc.n < count)
    return shrink * disc.nodes[idx]


def exterior_targets(disc: SurfaceDiscretization, count: int,
                     rng: np.random.Generator, factor: float = 2.0) -> np.ndarray:
    """Uniform random points on a sphere of ``factor`` times the circumradius."""
    g = rng.standard_normal((count, 3))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    c = disc.nodes.mean(axis=0)
    return c + factor * disc.circumradius() * g
