"""Locally corrected Nystrom quadrature and the scaled system-matrix oracle.

Far interactions use the smooth patch rule ``K(x_i, x_j) w_j``. For every
target ``x_i`` and every patch in its near region the smooth rule is replaced
by ``int_patch K(x_i, y) L_l(y) da(y)``, where ``L_l`` are the Lagrange
polynomials of the patch's Gauss-Legendre grid. Those integrals are computed
by vectorized adaptive subdivision of the patch's unit square; on the
target's own patch the square is split at the target and each piece is
Duffy-transformed so the ``1/r`` singularity is cancelled by the Jacobian.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .geometry import SurfaceDiscretization, gauss_legendre_01
from .kernels import KernelKind, kernel_matrix, kernel_pairs

logger = logging.getLogger(__name__)


class NonConvergent(RuntimeError):
    """Adaptive near quadrature hit its depth limit before meeting the tolerance."""

    def __init__(self, target, patch, achieved):
        super().__init__(f"near quadrature for target {target}, patch {patch} "
                         f"did not converge (achieved {achieved:.2e})")
        self.target = target
        self.patch = patch
        self.achieved = achieved


def near_pairs(disc: SurfaceDiscretization, eta: float):
    """All (target, patch) pairs with ``|x_i - c_j| <= eta R_j`` or ``i`` on ``j``.

    Returns two index arrays sorted by target then patch.
    """
    tree = cKDTree(disc.nodes)
    centers = disc.patch_centers
    radii = eta * disc.patch_diameters
    tg, pt = [], []
    for j, (c, rad) in enumerate(zip(centers, radii)):
        idx = tree.query_ball_point(c, rad)
        tg.append(np.asarray(idx, dtype=np.int64))
        pt.append(np.full(len(idx), j, dtype=np.int64))
    tg.append(np.arange(disc.n))
    pt.append(disc.patch_of_node.astype(np.int64))
    key = np.unique(np.concatenate(tg) * disc.n_patches + np.concatenate(pt))
    return key // disc.n_patches, key % disc.n_patches


def near_region(disc: SurfaceDiscretization, i: int, eta: float) -> set:
    """Patches whose near region contains node ``i`` (its own patch always)."""
    d = np.linalg.norm(disc.patch_centers - disc.nodes[i], axis=1)
    out = set(np.flatnonzero(d <= eta * disc.patch_diameters).tolist())
    out.add(int(disc.patch_of_node[i]))
    return out


def lagrange_basis(x_nodes, x):
    """Values of the Lagrange polynomials on ``x_nodes`` at points ``x``.

    Barycentric form; ``x`` must not coincide with a node to machine precision
    (Gauss nodes of the adaptive cells never do).
    """
    x_nodes = np.asarray(x_nodes, dtype=float)
    bw = 1.0 / np.prod(x_nodes[:, None] - x_nodes[None, :]
                       + np.eye(len(x_nodes)), axis=1)
    diff = np.asarray(x)[..., None] - x_nodes
    diff[diff == 0.0] = 1e-300
    ell = np.prod(diff, axis=-1)
    return ell[..., None] * bw / diff


@dataclass
class _Items:
    """Flat arrays describing cells of pending adaptive-quadrature work."""

    pair: np.ndarray
    c: np.ndarray       # (m, 2) corner of the map in the patch unit square
    e1: np.ndarray      # (m, 2)
    e2: np.ndarray      # (m, 2)
    duffy: np.ndarray   # (m,) bool
    box: np.ndarray     # (m, 4) xi0, xi1, eta0, eta1

    def take(self, sel):
        return _Items(self.pair[sel], self.c[sel], self.e1[sel], self.e2[sel],
                      self.duffy[sel], self.box[sel])

    def __len__(self):
        return len(self.pair)


_KIND_CODE = {KernelKind.SINGLE_LAYER: 0, KernelKind.DOUBLE_LAYER: 1,
              KernelKind.COMBINED_FIELD: 2,
              KernelKind.SINGLE_LAYER_NORMAL_DERIV: 3}


@numba.njit(cache=True, fastmath=False)
def _reduce_cells(code, k, tx, tn, gidx, X, NY, W, S, T, xp, bw, dens, dpat):
    """Sum ``K(x, y) W(y) phi(y)`` over each cell's points.

    ``phi`` runs over the ``p*p`` tensor Lagrange basis, or is the single
    interpolated density ``dens[dpat[m]]`` when ``dens`` has rows.
    """
    m = gidx.shape[0]
    Q = X.shape[1]
    p = xp.shape[0]
    use_dens = dens.shape[0] > 0
    nout = 1 if use_dens else p * p
    out = np.zeros((m, nout), dtype=np.complex128)
    Ls = np.empty(p)
    Lt = np.empty(p)
    inv4pi = 1.0 / (4.0 * np.pi)
    for it in range(m):
        g = gidx[it]
        for qq in range(Q):
            d0 = tx[it, 0] - X[g, qq, 0]
            d1 = tx[it, 1] - X[g, qq, 1]
            d2 = tx[it, 2] - X[g, qq, 2]
            r = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            rinv = 1.0 / r
            G = np.exp(1j * k * r) * (rinv * inv4pi)
            if code == 0:
                kv = G
            else:
                g1 = G * (1j * k - rinv) * rinv
                if code == 3:
                    kv = g1 * (d0 * tn[it, 0] + d1 * tn[it, 1] + d2 * tn[it, 2])
                else:
                    kv = -g1 * (d0 * NY[g, qq, 0] + d1 * NY[g, qq, 1]
                                + d2 * NY[g, qq, 2])
                    if code == 2:
                        kv = kv - 1j * k * G
            f = kv * W[g, qq]
            s = S[g, qq]
            t = T[g, qq]
            ls = 1.0
            lt = 1.0
            for a in range(p):
                ds = s - xp[a]
                dt = t - xp[a]
                if ds == 0.0:
                    ds = 1e-300
                if dt == 0.0:
                    dt = 1e-300
                Ls[a] = bw[a] / ds
                Lt[a] = bw[a] / dt
                ls *= ds
                lt *= dt
            if use_dens:
                acc = 0.0j
                row = dens[dpat[it]]
                for a in range(p):
                    inner = 0.0j
                    for b in range(p):
                        inner += row[a * p + b] * Lt[b]
                    acc += inner * Ls[a]
                out[it, 0] += f * ls * lt * acc
            else:
                f = f * ls * lt
                for a in range(p):
                    fa = f * Ls[a]
                    for b in range(p):
                        out[it, a * p + b] += fa * Lt[b]
    return out


_CUBE = np.array([[0, 1, 2, 1], [0, 1, 2, -1], [1, 2, 0, 1],
                  [1, 2, 0, -1], [2, 0, 1, 1], [2, 0, 1, -1]], dtype=np.int64)


@numba.njit(cache=True)
def _surface_point(code, prm, face, u, v, X, Xu, Xv):
    """Compiled twin of ``ParametricSurface._evaluate_face`` for one point."""
    if code == 0:
        cu, su = np.cos(u), np.sin(u)
        cv, sv = np.cos(v), np.sin(v)
        rho = 2.0 + cv + 0.25 * np.cos(5 * u)
        dru = -1.25 * np.sin(5 * u)
        X[0] = 1.2 * rho * cu
        X[1] = rho * su
        X[2] = 1.7 * sv
        Xu[0] = 1.2 * (dru * cu - rho * su)
        Xu[1] = dru * su + rho * cu
        Xu[2] = 0.0
        Xv[0] = -1.2 * sv * cu
        Xv[1] = -sv * su
        Xv[2] = 1.7 * cv
    else:
        kk, a, b, sg = _CUBE[face, 0], _CUBE[face, 1], _CUBE[face, 2], _CUBE[face, 3]
        X[kk] = sg
        X[a] = u
        X[b] = v
        r = np.sqrt(X[0] * X[0] + X[1] * X[1] + X[2] * X[2])
        ca, cb = u / r, v / r
        for i in range(3):
            sI = X[i] / r
            Xu[i] = ((1.0 if i == a else 0.0) - sI * ca) / r * prm[i]
            Xv[i] = ((1.0 if i == b else 0.0) - sI * cb) / r * prm[i]
        for i in range(3):
            X[i] = X[i] / r * prm[i]


@numba.njit(cache=True)
def _basis(xp, bw, z, out):
    """Lagrange basis values at ``z`` (barycentric form) into ``out``."""
    lz = 1.0
    for a in range(xp.shape[0]):
        dz = z - xp[a]
        if dz == 0.0:
            dz = 1e-300
        out[a] = bw[a] / dz
        lz *= dz
    for a in range(xp.shape[0]):
        out[a] *= lz


@numba.njit(cache=True)
def _fused_cells(code, k, mode, tx, tn, scode, sprm, chart, cmap, box,
                 xq, wq, xp, bw, dens, dpat):
    """Like :func:`_reduce_cells` but evaluates the surface itself.

    ``chart[m]`` = (face, u0, du, v0, dv, orientation); ``cmap[m]`` =
    (c_s, c_t, e1_s, e1_t, e2_s, e2_t, duffy). ``mode`` 0: basis,
    1: interpolated density, 2: unit density.
    """
    m = tx.shape[0]
    q = xq.shape[0]
    p = xp.shape[0]
    nout = p * p if mode == 0 else 1
    out = np.zeros((m, nout), dtype=np.complex128)
    Ls = np.empty(p)
    Lt = np.empty(p)
    Lc = np.empty(p)
    inner = np.zeros(p, dtype=np.complex128)
    X = np.empty(3)
    Xu = np.empty(3)
    Xv = np.empty(3)
    inv4pi = 1.0 / (4.0 * np.pi)
    for it in range(m):
        face = int(chart[it, 0])
        u0, du, v0, dv, orient = chart[it, 1], chart[it, 2], chart[it, 3], chart[it, 4], chart[it, 5]
        cs, ct = cmap[it, 0], cmap[it, 1]
        e1s, e1t, e2s, e2t = cmap[it, 2], cmap[it, 3], cmap[it, 4], cmap[it, 5]
        duffy = cmap[it, 6] != 0.0
        det = abs(e1s * e2t - e1t * e2s)
        x0, x1, y0, y1 = box[it, 0], box[it, 1], box[it, 2], box[it, 3]
        area = (x1 - x0) * (y1 - y0)
        # a coordinate that depends on xi only lets the p*p basis sum factor
        if duffy:
            fixed = 0 if e2s == e1s else (1 if e2t == e1t else -1)
        else:
            fixed = 0 if e2s == 0.0 else (1 if e2t == 0.0 else -1)
        if mode != 0:
            fixed = -1
        for ia in range(q):
            xi = x0 + (x1 - x0) * xq[ia]
            if fixed >= 0:
                inner[:] = 0.0
            for ib in range(q):
                et = y0 + (y1 - y0) * xq[ib]
                if duffy:
                    s = cs + xi * (e1s + et * (e2s - e1s))
                    t = ct + xi * (e1t + et * (e2t - e1t))
                    jac = det * xi
                else:
                    s = cs + xi * e1s + et * e2s
                    t = ct + xi * e1t + et * e2t
                    jac = det
                _surface_point(scode, sprm, face, u0 + du * s, v0 + dv * t, X, Xu, Xv)
                n0 = (Xu[1] * Xv[2] - Xu[2] * Xv[1]) * orient
                n1 = (Xu[2] * Xv[0] - Xu[0] * Xv[2]) * orient
                n2 = (Xu[0] * Xv[1] - Xu[1] * Xv[0]) * orient
                J = np.sqrt(n0 * n0 + n1 * n1 + n2 * n2)
                wgt = J * abs(du * dv) * jac * wq[ia] * wq[ib] * area
                d0 = tx[it, 0] - X[0]
                d1 = tx[it, 1] - X[1]
                d2 = tx[it, 2] - X[2]
                r = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
                rinv = 1.0 / r
                G = np.exp(1j * k * r) * (rinv * inv4pi)
                if code == 0:
                    kv = G
                else:
                    g1 = G * (1j * k - rinv) * rinv
                    if code == 3:
                        kv = g1 * (d0 * tn[it, 0] + d1 * tn[it, 1] + d2 * tn[it, 2])
                    else:
                        kv = -g1 * (d0 * n0 + d1 * n1 + d2 * n2) / J
                        if code == 2:
                            kv = kv - 1j * k * G
                f = kv * wgt
                if mode == 2:
                    out[it, 0] += f
                    continue
                if fixed >= 0:
                    # only the varying coordinate's basis is needed here
                    z = t if fixed == 0 else s
                    lz = 1.0
                    for a in range(p):
                        dz = z - xp[a]
                        if dz == 0.0:
                            dz = 1e-300
                        Lt[a] = bw[a] / dz
                        lz *= dz
                    f = f * lz
                    for a in range(p):
                        inner[a] += f * Lt[a]
                    continue
                _basis(xp, bw, s, Ls)
                _basis(xp, bw, t, Lt)
                if mode == 1:
                    row = dens[dpat[it]]
                    acc = 0.0j
                    for a in range(p):
                        tmp = 0.0j
                        for b in range(p):
                            tmp += row[a * p + b] * Lt[b]
                        acc += tmp * Ls[a]
                    out[it, 0] += f * acc
                else:
                    for a in range(p):
                        fa = f * Ls[a]
                        for b in range(p):
                            out[it, a * p + b] += fa * Lt[b]
            if fixed >= 0:
                z = s if fixed == 0 else t
                _basis(xp, bw, z, Lc)
                for a in range(p):
                    for b in range(p):
                        if fixed == 0:
                            out[it, a * p + b] += Lc[a] * inner[b]
                        else:
                            out[it, a * p + b] += inner[a] * Lc[b]
    return out


class _PatchIntegrator:
    """Evaluation of ``int_cell K(x, y) phi(y) da(y)`` for batches of cells."""

    def __init__(self, disc, kind, k, q, density=None, unit_density=False):
        if kind not in _KIND_CODE:
            raise ValueError(f"near quadrature not available for {kind}")
        self.disc = disc
        self.code = _KIND_CODE[kind]
        self.k = complex(k)
        self.p = disc.order
        self.xq, self.wq = gauss_legendre_01(q)
        self.xp, _ = gauss_legendre_01(self.p)
        self.bw = 1.0 / np.prod(self.xp[:, None] - self.xp[None, :]
                                + np.eye(self.p), axis=1)
        ch = [pt.chart for pt in disc.patches]
        self.face = np.array([c.face for c in ch])
        self.u0 = np.array([c.u0 for c in ch])
        self.du = np.array([c.u1 - c.u0 for c in ch])
        self.v0 = np.array([c.v0 for c in ch])
        self.dv = np.array([c.v1 - c.v0 for c in ch])
        self.orient = np.array([disc.surface._orientation[f] for f in self.face])
        self.scode = disc.surface.compiled_code
        self.sprm = np.asarray(disc.surface.compiled_params(), dtype=float)
        self.unit = unit_density
        if unit_density and self.scode is None:
            density = np.ones(disc.n)
        if density is None or unit_density:
            self.dens = np.zeros((0, self.p ** 2), dtype=complex)
        else:
            starts = np.array([pt.start for pt in disc.patches])
            idx = starts[:, None] + np.arange(self.p ** 2)
            self.dens = np.ascontiguousarray(np.asarray(density, dtype=complex)[idx])

    @property
    def nout(self):
        return 1 if (len(self.dens) or self.unit) else self.p ** 2

    def _geometry(self, pj, c, e1, e2, duffy, box):
        """Points, normals, weights and patch coordinates of whole cells."""
        q = len(self.xq)
        a = box[:, 0:1] + (box[:, 1:2] - box[:, 0:1]) * self.xq
        b = box[:, 2:3] + (box[:, 3:4] - box[:, 2:3]) * self.xq
        xi = np.repeat(a, q, axis=1)          # (m, q*q), xi-major
        et = np.tile(b, (1, q))
        cw = (np.outer(self.wq, self.wq).ravel()[None, :]
              * ((box[:, 1] - box[:, 0]) * (box[:, 3] - box[:, 2]))[:, None])
        du = duffy[:, None]
        e1_, e2_ = e1[:, None, :], e2[:, None, :]
        # rectangle: c + xi e1 + eta e2; Duffy triangle: c + xi (e1 + eta (e2 - e1))
        st = np.where(du[..., None],
                      c[:, None, :] + xi[..., None] * (e1_ + et[..., None] * (e2_ - e1_)),
                      c[:, None, :] + xi[..., None] * e1_ + et[..., None] * e2_)
        det = np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        jac = det[:, None] * np.where(du, xi, 1.0)
        s, t = st[..., 0], st[..., 1]
        u = self.u0[pj][:, None] + self.du[pj][:, None] * s
        v = self.v0[pj][:, None] + self.dv[pj][:, None] * t
        X, Xu, Xv = self.disc.surface.evaluate(
            np.broadcast_to(self.face[pj][:, None], u.shape), u, v)
        nv = np.cross(Xu, Xv) * (self.du[pj] * self.dv[pj])[:, None, None]
        J = np.linalg.norm(nv, axis=-1)
        return X, nv / J[..., None], J * jac * cw, s, t

    def evaluate(self, items: _Items, targets, tnormals, patches):
        """Integrals over each item's cell; shape ``(len(items), nout)``."""
        pj = patches[items.pair]
        tx = np.ascontiguousarray(targets[items.pair])
        tn = (np.zeros_like(tx) if tnormals is None
              else np.ascontiguousarray(tnormals[items.pair]))
        if self.scode is not None:
            mode = 2 if self.unit else (1 if len(self.dens) else 0)
            chart = np.column_stack([self.face[pj], self.u0[pj], self.du[pj],
                                     self.v0[pj], self.dv[pj], self.orient[pj]])
            cmap = np.column_stack([items.c, items.e1, items.e2, items.duffy])
            return _fused_cells(self.code, self.k, mode, tx, tn, self.scode,
                                self.sprm, chart, cmap,
                                np.ascontiguousarray(items.box), self.xq, self.wq,
                                self.xp, self.bw, self.dens, pj.astype(np.int64))
        # rectangle cells of a patch are shared by all of its targets
        key = np.column_stack([pj, items.box])
        key[items.duffy, 0] = -1 - np.flatnonzero(items.duffy)
        _, first, gidx = np.unique(key, axis=0, return_index=True,
                                   return_inverse=True)
        X, NY, W, S, T = self._geometry(pj[first], items.c[first], items.e1[first],
                                        items.e2[first], items.duffy[first],
                                        items.box[first])
        return _reduce_cells(self.code, self.k, tx, tn, gidx.ravel().astype(np.int64),
                             X, NY, W, S, T, self.xp, self.bw, self.dens,
                             pj.astype(np.int64))


@dataclass
class NearCorrectionTable:
    """Near-quadrature values for every near (target, patch) pair.

    ``values[m]`` holds ``int_patch K(x_i, y) L_l(y) da(y)`` for the nodes
    ``l`` of patch ``patches[m]`` and target ``targets[m]``; this equals
    ``K(x_i, x_l) w_il`` in corrected-weight notation. ``scaled`` is the
    sparse ``n x n`` matrix of differences between the corrected and the
    smooth (sqrt-w scaled) entries, with the smooth diagonal taken as zero.
    """

    targets: np.ndarray
    patches: np.ndarray
    values: np.ndarray
    eta: float
    eps_q: float
    max_depth: int
    scaled: sp.csr_matrix = field(repr=False)
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._index:
            self._index = {(int(i), int(j)): m for m, (i, j) in
                           enumerate(zip(self.targets, self.patches))}

    def __len__(self):
        return len(self.targets)

    def __contains__(self, key):
        return (int(key[0]), int(key[1])) in self._index

    def row(self, i, j):
        """Corrected kernel-times-weight values of target ``i`` over patch ``j``."""
        return self.values[self._index[(int(i), int(j))]]

    def touched(self, rows, cols):
        """Boolean ``(len(rows), len(cols))`` mask of near-corrected entries."""
        return self.scaled[rows][:, cols].toarray() != 0


def _initial_items(disc, tgt, pat):
    """Root cells: the whole square for near pairs, 8 Duffy triangles for self pairs."""
    own = disc.patch_of_node[tgt] == pat
    pair_ids = np.arange(len(tgt))
    far_ids = pair_ids[~own]
    nf = len(far_ids)
    c = [np.zeros((nf, 2))]
    e1 = [np.tile([1.0, 0.0], (nf, 1))]
    e2 = [np.tile([0.0, 1.0], (nf, 1))]
    pr = [far_ids]
    self_ids = pair_ids[own]
    st = disc.ref_coords[tgt[self_ids]]
    corners = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    for a in range(4):
        v1 = np.broadcast_to(corners[a], st.shape)
        v2 = np.broadcast_to(corners[(a + 1) % 4], st.shape)
        # triangle (x_i, corner_a, corner_a+1), split at the foot of x_i on
        # that edge so every piece is a right triangle with apex x_i
        mid = np.stack([np.where(v1[:, 0] == v2[:, 0], v1[:, 0], st[:, 0]),
                        np.where(v1[:, 1] == v2[:, 1], v1[:, 1], st[:, 1])], axis=1)
        # e1 runs to the foot (axis aligned) so one patch coordinate depends
        # on the radial Duffy variable only
        for corner in (v1, v2):
            c.append(st.copy())
            e1.append(mid - st)
            e2.append(corner - st)
            pr.append(self_ids)
    c, e1, e2, pr = (np.concatenate(z) for z in (c, e1, e2, pr))
    duffy = np.concatenate([np.zeros(nf, bool), np.ones(len(pr) - nf, bool)])
    box = np.tile([0.0, 1.0, 0.0, 1.0], (len(pr), 1))
    return _Items(pr, c, e1, e2, duffy, box)


def _split(items: _Items) -> _Items:
    x0, x1, y0, y1 = items.box.T
    xm, ym = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    boxes = np.concatenate([np.stack(b, axis=1) for b in
                            ((x0, xm, y0, ym), (xm, x1, y0, ym),
                             (x0, xm, ym, y1), (xm, x1, ym, y1))])
    rep = np.tile(np.arange(len(items)), 4)
    out = items.take(rep)
    out.box = boxes
    return out


def adaptive_patch_integrals(disc, kind, k, tgt, pat, *, eps_q=1e-8,
                             max_depth=14, q=8, targets=None, tnormals=None,
                             initial=None, chunk=20000, density=None,
                             unit_density=False):
    """Adaptive integrals ``int_{patch} K(x, y) L_l(y) da(y)`` for each pair.

    ``tgt`` indexes ``targets`` (default: the discretization nodes) and
    ``pat`` the patches. Returns an array of shape ``(len(tgt), p*p)``, or
    ``(len(tgt), 1)`` holding ``int K sigma da`` of the interpolated nodal
    ``density`` when one is given.
    """
    if targets is None:
        targets = disc.nodes
    tgt = np.asarray(tgt)
    pat = np.asarray(pat)
    integ = _PatchIntegrator(disc, kind, k, q, density, unit_density)
    items = _initial_items(disc, tgt, pat) if initial is None else initial
    tpts = targets[tgt]
    tn = None if tnormals is None else tnormals[tgt]

    def ev(it):
        out = np.empty((len(it), integ.nout), dtype=complex)
        for a in range(0, len(it), chunk):
            sl = slice(a, a + chunk)
            out[sl] = integ.evaluate(it.take(sl), tpts, tn, pat)
        return out

    coarse = ev(items)
    result = np.zeros((len(tgt), integ.nout), dtype=complex)
    scale = np.zeros(len(tgt))
    np.add.at(scale, items.pair, np.abs(coarse).max(axis=1))
    scale = np.maximum(scale, 1e-300)
    for depth in range(max_depth + 1):
        if len(items) == 0:
            break
        logger.debug("depth %d: %d cells (%d Duffy)", depth, len(items), items.duffy.sum())
        kids = _split(items)
        kv = ev(kids)
        m = len(items)
        fine = kv[:m] + kv[m:2 * m] + kv[2 * m:3 * m] + kv[3 * m:]
        err = np.abs(fine - coarse).max(axis=1)
        # cells whose disagreement is at roundoff level cannot improve further
        floor = 100 * np.finfo(float).eps * np.abs(kv).reshape(4, m, -1).sum(axis=0).max(axis=1)
        ok = err <= np.maximum(eps_q * scale[items.pair], floor)
        np.add.at(result, items.pair[ok], fine[ok])
        if depth == max_depth and not ok.all():
            bad = np.flatnonzero(~ok)[np.argmax(err[~ok] / scale[items.pair[~ok]])]
            pr = items.pair[bad]
            raise NonConvergent(int(tgt[pr]), int(pat[pr]),
                                float(err[bad] / scale[pr]))
        keep = np.tile(~ok, 4)
        items = kids.take(keep)
        coarse = kv[keep]
    return result


def build_near_table(disc: SurfaceDiscretization, kind: KernelKind, k,
                     eps_q: float = 1e-7, eta: float = 1.25, *, q=None,
                     max_depth=14, batch=16384) -> NearCorrectionTable:
    """Corrected near-field values for all near (target, patch) pairs.

    Pairs are integrated ``batch`` at a time to bound the adaptive work arrays.
    """
    if not 1e-14 < eps_q < 1e-2:
        raise ValueError("eps_q must lie in (1e-14, 1e-2)")
    if eta < 1:
        raise ValueError("eta must be >= 1")
    if q is None:
        q = max(8, disc.order + 4)
    tgt, pat = near_pairs(disc, eta)
    vals = np.concatenate([
        adaptive_patch_integrals(disc, kind, k, tgt[a:a + batch],
                                 pat[a:a + batch], eps_q=eps_q, q=q,
                                 max_depth=max_depth, tnormals=disc.normals)
        for a in range(0, len(tgt), batch)]) if len(tgt) else np.zeros((0, disc.order ** 2), complex)
    scaled = _scaled_corrections(disc, kind, k, tgt, pat, vals)
    logger.info("near table: %d pairs, %d corrected entries", len(tgt), scaled.nnz)
    return NearCorrectionTable(tgt, pat, vals, eta, eps_q, max_depth, scaled)


def _scaled_corrections(disc, kind, k, tgt, pat, vals):
    p2 = disc.order ** 2
    starts = np.array([pt.start for pt in disc.patches])
    cols = (starts[pat][:, None] + np.arange(p2)).ravel()
    rows = np.repeat(tgt, p2)
    smooth = np.zeros(len(rows), dtype=complex)
    for a in range(0, len(rows), 1 << 18):
        r, c = rows[a:a + (1 << 18)], cols[a:a + (1 << 18)]
        off = r != c
        r, c = r[off], c[off]
        smooth[a:a + (1 << 18)][off] = kernel_pairs(
            kind, k, disc.nodes[r], disc.nodes[c], disc.normals[r],
            disc.normals[c]) * disc.weights[c]
    sw = np.sqrt(disc.weights)
    data = sw[rows] * (vals.ravel() - smooth) / sw[cols]
    return sp.csr_matrix((data, (rows, cols)), shape=(disc.n, disc.n))


class EntryOracle:
    """Entries of the scaled Nystrom matrix ``alpha I + sqrt(W) K sqrt(W)``.

    Blocks are pure kernel evaluations plus sparse near corrections; the
    factorization layers its own Schur-complement updates on top (see
    :class:`fmmlu.factorization.BlockUpdateStore`).
    """

    def __init__(self, disc: SurfaceDiscretization, kind: KernelKind, k,
                 alpha: complex, table: NearCorrectionTable | None):
        self.disc = disc
        self.kind = kind
        self.k = complex(k)
        self.alpha = complex(alpha)
        self.table = table
        self.sqrt_w = np.sqrt(disc.weights)

    @property
    def n(self):
        return self.disc.n

    # row chunks keep the kernel's pairwise temporaries near this many entries
    chunk_entries = 1 << 20

    def kernel_block(self, rows, cols):
        """Pure ``sqrt(w_i) K(x_i, x_j) sqrt(w_j)`` with zero on coincident pairs."""
        rows = np.asarray(rows)
        cols = np.asarray(cols)
        mask = rows[:, None] == cols[None, :]
        K = np.empty((len(rows), len(cols)), dtype=complex)
        step = max(1, self.chunk_entries // max(1, len(cols)))
        for a in range(0, len(rows), step):
            K[a:a + step] = self._kernel_rows(rows[a:a + step], cols, mask[a:a + step])
        return K, mask

    def _kernel_rows(self, rows, cols, mask):
        d = self.disc
        K = kernel_matrix(self.kind, self.k, d.nodes[rows], d.nodes[cols],
                          d.normals[rows], d.normals[cols],
                          zero_diagonal_mask=mask if mask.any() else None)
        K *= self.sqrt_w[rows][:, None]
        K *= self.sqrt_w[cols][None, :]
        return K

    def block(self, rows, cols, order="C"):
        """Dense block ``A[rows][:, cols]`` of the (uncompressed) system matrix."""
        rows = np.asarray(rows)
        cols = np.asarray(cols)
        K = np.empty((len(rows), len(cols)), dtype=complex, order=order)
        step = max(1, self.chunk_entries // max(1, len(cols)))
        for a in range(0, len(rows), step):
            r = rows[a:a + step]
            mask = r[:, None] == cols[None, :]
            Kc = self._kernel_rows(r, cols, mask)
            if mask.any():
                Kc[mask] += self.alpha
            if self.table is not None and len(cols):
                Kc += self.table.scaled[r][:, cols].toarray()
            K[a:a + step] = Kc
        return K

    def entry(self, i, j) -> complex:
        return complex(self.block(np.array([i]), np.array([j]))[0, 0])

    def dense(self):
        idx = np.arange(self.n)
        return self.block(idx, idx)
