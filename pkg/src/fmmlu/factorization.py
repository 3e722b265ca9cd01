"""Recursive strong skeletonization (the FMM-LU factorization).

Each box ``B`` is compressed against its far field, split into skeleton
``S`` and redundant ``R`` indices with ``A[F, R] ~= A[F, S] T`` and
``A[R, F] ~= T^T A[S, F]``, and ``R`` is eliminated against ``S`` and the near
field ``N``. The Schur complements land in a block-update store consulted by
later reads. Boxes are processed level by level from fine to coarse; the
indices left at the end are factorized densely.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import gauss_legendre_01
from .hlinalg import LUFactor, id_fixed_tolerance
from .kernels import KernelKind, kernel_matrix
from .octree import Octree, near_owners, partition_far_field
from .quadrature import EntryOracle

logger = logging.getLogger(__name__)


# ----------------------------------------------------------------------------
# proxy surfaces

@dataclass
class ProxySurface:
    center: np.ndarray
    radius: float
    order: int
    points: np.ndarray
    normals: np.ndarray
    weights: np.ndarray

    @property
    def n_points(self) -> int:
        return len(self.points)


def proxy_order(kappa, eps, p_min=8):
    """Multipole truncation estimate ``max(p_min, ceil(kappa + 1.8 d^(2/3) kappa^(1/3)))``."""
    d = math.log10(1.0 / eps)
    return max(p_min, math.ceil(kappa + 1.8 * d ** (2 / 3) * kappa ** (1 / 3)))


def make_proxy(center, side, rho, k, eps, p_min=8) -> ProxySurface:
    """Sphere of radius ``rho * side`` about ``center`` with ``2 p (p + 1)`` points."""
    if not math.sqrt(3) / 2 < rho < 2.5:
        raise ValueError("proxy radius factor must lie in (sqrt(3)/2, 5/2)")
    radius = rho * side
    p = proxy_order(abs(complex(k)) * radius, eps, p_min)
    x, w = np.polynomial.legendre.leggauss(p + 1)       # cos(theta)
    nphi = 2 * p
    phi = 2 * np.pi * np.arange(nphi) / nphi
    ct = np.repeat(x, nphi)
    st = np.sqrt(1 - ct ** 2)
    ph = np.tile(phi, len(x))
    nrm = np.stack([st * np.cos(ph), st * np.sin(ph), ct], axis=1)
    wts = np.repeat(w, nphi) * (2 * np.pi / nphi) * radius ** 2
    return ProxySurface(np.asarray(center, float), radius, p,
                        np.asarray(center, float) + radius * nrm, nrm, wts)


# ----------------------------------------------------------------------------
# block updates

class BlockUpdateStore:
    """Schur-complement updates held as dense blocks between owner boxes.

    ``owners[b]`` is the current active index array of box ``b``; the block
    for ``(a, b)`` has shape ``(len(owners[a]), len(owners[b]))``.
    """

    def __init__(self, n, track_touched=False):
        self.blocks = {}
        self._partners = {}
        self.owners = {}
        self.owner_of = np.full(n, -1, dtype=np.int64)
        self.pos = np.full(n, -1, dtype=np.int64)
        self.touched = np.zeros((n, n), dtype=bool) if track_touched else None

    # owner bookkeeping -----------------------------------------------------
    def set_owner(self, b, idx):
        idx = np.asarray(idx, dtype=np.int64)
        old = self.owners.get(b)
        if old is not None:
            self.owner_of[old] = -1
            self.pos[old] = -1
        if len(idx) == 0:
            self.owners.pop(b, None)
            return
        self.owners[b] = idx
        self.owner_of[idx] = b
        self.pos[idx] = np.arange(len(idx))

    def partners(self, b):
        return self._partners.get(b, set())

    def _link(self, a, b):
        self._partners.setdefault(a, set()).add(b)
        self._partners.setdefault(b, set()).add(a)

    def _drop(self, a, b):
        self.blocks.pop((a, b), None)
        self.blocks.pop((b, a), None)
        self._partners.get(a, set()).discard(b)
        self._partners.get(b, set()).discard(a)

    # updates ------------------------------------------------------------------
    def add(self, boxes, M):
        """Add ``M`` over the concatenated indices of ``boxes`` (rows and columns)."""
        offs = np.cumsum([0] + [len(self.owners[b]) for b in boxes])
        for i, a in enumerate(boxes):
            for j, b in enumerate(boxes):
                blk = M[offs[i]:offs[i + 1], offs[j]:offs[j + 1]]
                if (a, b) in self.blocks:
                    self.blocks[(a, b)] += blk
                else:
                    self.blocks[(a, b)] = blk.copy()
                    self._link(a, b)
        if self.touched is not None:
            idx = np.concatenate([self.owners[b] for b in boxes])
            self.touched[np.ix_(idx, idx)] = True

    def add_product(self, boxes, X, Y):
        """Add ``-X @ Y`` block by block; rows of ``X`` and columns of ``Y``
        run over the concatenated indices of ``boxes``."""
        offs = np.cumsum([0] + [len(self.owners[b]) for b in boxes])
        for i, a in enumerate(boxes):
            Xa = X[offs[i]:offs[i + 1]]
            for j, b in enumerate(boxes):
                blk = Xa @ Y[:, offs[j]:offs[j + 1]]
                if (a, b) in self.blocks:
                    self.blocks[(a, b)] -= blk
                else:
                    np.negative(blk, out=blk)
                    self.blocks[(a, b)] = blk
                    self._link(a, b)
        if self.touched is not None:
            idx = np.concatenate([self.owners[b] for b in boxes])
            self.touched[np.ix_(idx, idx)] = True

    def restrict(self, b, keep):
        """Box ``b`` keeps only positions ``keep`` of its active indices."""
        for c in list(self.partners(b)):
            if (b, c) in self.blocks:
                self.blocks[(b, c)] = self.blocks[(b, c)][keep]
            if (c, b) in self.blocks:
                self.blocks[(c, b)] = self.blocks[(c, b)][:, keep]
        self.set_owner(b, self.owners[b][keep])

    def merge(self, parent, children):
        """Re-key blocks of ``children`` onto ``parent`` (its actives = concatenation)."""
        children = [c for c in children if c in self.owners]
        if not children:
            return
        idx = np.concatenate([self.owners[c] for c in children])
        offs = {c: o for c, o in zip(children, np.cumsum(
            [0] + [len(self.owners[c]) for c in children])[:-1])}
        chset = set(children)
        new = {}
        for c in children:
            for d in list(self.partners(c)):
                if (c, d) in self.blocks:
                    key = (parent, parent if d in chset else d)
                    c0 = offs[d] if d in chset else 0
                    new.setdefault(key, []).append((offs[c], c0, self.blocks[(c, d)]))
                if d not in chset and (d, c) in self.blocks:
                    new.setdefault((d, parent), []).append((0, offs[c], self.blocks[(d, c)]))
        for c in children:
            for d in list(self.partners(c)):
                self._drop(c, d)
            self.set_owner(c, [])
        self.set_owner(parent, idx)
        n_p = len(idx)
        for key, parts in new.items():
            rows = n_p if key[0] == parent else len(self.owners[key[0]])
            cols = n_p if key[1] == parent else len(self.owners[key[1]])
            M = np.zeros((rows, cols), dtype=complex)
            for r0, c0, blk in parts:
                M[r0:r0 + blk.shape[0], c0:c0 + blk.shape[1]] += blk
            self.blocks[key] = M
            self._link(*key)

    def add_to(self, rows, cols, M):
        """Add stored updates to ``M = A[rows][:, cols]`` in place."""
        if not self.blocks:
            return M
        ro = self.owner_of[rows]
        co = self.owner_of[cols]
        rp = self.pos[rows]
        cp = self.pos[cols]
        col_groups = {}
        for b in np.unique(co[co >= 0]):
            col_groups[int(b)] = np.flatnonzero(co == b)
        for a in np.unique(ro[ro >= 0]):
            a = int(a)
            rsel = np.flatnonzero(ro == a)
            for b in self.partners(a):
                if b not in col_groups or (a, b) not in self.blocks:
                    continue
                csel = col_groups[b]
                blk = self.blocks[(a, b)]
                M[np.ix_(rsel, csel)] += blk[np.ix_(rp[rsel], cp[csel])]
        return M

    @property
    def nbytes(self):
        return sum(b.nbytes for b in self.blocks.values())


class UpdatedOracle:
    """System-matrix entries including the factorization's Schur updates."""

    def __init__(self, base: EntryOracle, store: BlockUpdateStore):
        self.base = base
        self.store = store

    def block(self, rows, cols, order="C"):
        M = self.base.block(rows, cols, order=order)
        return self.store.add_to(np.asarray(rows), np.asarray(cols), M)

    def entry(self, i, j):
        return complex(self.block(np.array([i]), np.array([j]))[0, 0])


# ----------------------------------------------------------------------------
# per-box factors

@dataclass
class SkeletonFactor:
    box: int
    level: int
    S: np.ndarray
    R: np.ndarray
    J: np.ndarray                 # S followed by the near-field indices
    T_out: np.ndarray             # A[F, R] ~= A[F, S] T_out
    T_in: np.ndarray              # A[R, F] ~= T_in^T A[S, F]
    lu: LUFactor                  # of X_RR
    Lmat: np.ndarray              # X_JR X_RR^{-1}
    Umat: np.ndarray              # X_RR^{-1} X_RJ

    @property
    def nbytes(self):
        shared = self.T_in is self.T_out
        return (self.T_out.nbytes + (0 if shared else self.T_in.nbytes)
                + self.lu.lu.nbytes
                + self.Lmat.nbytes + self.Umat.nbytes)


@dataclass
class FactorOptions:
    rho: float = 1.5
    p_min: int = 8
    compression: str = "proxy"        # or "dense"
    separate_t: bool = False
    proxy_weights: bool = True        # scale proxy rows by sqrt of the proxy weights
    audit: bool = False               # purity checks (dense n x n bookkeeping)
    min_level: int = 1


def _compression_matrix(oracle, upd, part, box, proxy, opts):
    """Outgoing and incoming rows stacked for the simultaneous ID."""
    B = part.B
    d = oracle.disc
    Q = part.Q
    out_rows, in_rows = [], []
    if opts.compression == "dense":
        F = part.F
        if len(F):
            out_rows.append(upd.block(F, B))
            in_rows.append(upd.block(B, F).T)
    else:
        if len(Q):
            out_rows.append(upd.block(Q, B))
            in_rows.append(upd.block(B, Q).T)
        if len(part.P_boxes):
            sw = oracle.sqrt_w[B]
            pw = np.sqrt(proxy.weights)[:, None] if opts.proxy_weights else 1.0
            # field of B's density on the proxy sphere (combined-field kernel)
            Kg = kernel_matrix(oracle.kind, oracle.k, proxy.points, d.nodes[B],
                               proxy.normals, d.normals[B])
            out_rows.append(pw * Kg * sw[None, :])
            # incoming fields on B spanned by single layers on the proxy sphere
            Sg = kernel_matrix(KernelKind.SINGLE_LAYER, oracle.k, d.nodes[B],
                               proxy.points)
            in_rows.append(pw * (Sg * sw[:, None]).T)
    return out_rows, in_rows


def _stack(rows, ncol):
    rows = [r for r in rows if r.shape[0]]
    if not rows:
        return np.zeros((0, ncol), dtype=complex)
    return np.vstack(rows)


def skeletonize_box(oracle, upd, store, tree, part, proxy, eps, opts):
    """Compress box ``part.box``, eliminate its redundant indices, emit updates.

    Returns the :class:`SkeletonFactor`, or ``None`` if nothing was eliminated.
    """
    b = part.box
    B = part.B
    nb = len(B)
    out_rows, in_rows = _compression_matrix(oracle, upd, part, b, proxy, opts)
    if opts.separate_t:
        Mo = _stack(out_rows, nb)
        Mi = _stack(in_rows, nb)
        if Mo.shape[0] == 0 and Mi.shape[0] == 0:
            return None
        so = id_fixed_tolerance(Mo, eps)[0] if Mo.shape[0] else np.zeros(0, np.int64)
        si = id_fixed_tolerance(Mi, eps)[0] if Mi.shape[0] else np.zeros(0, np.int64)
        sl = np.union1d(so, si)
        rl = np.setdiff1d(np.arange(nb), sl)
        T_out = _interp(Mo, sl, rl)
        T_in = _interp(Mi, sl, rl)
    else:
        M = _stack(out_rows + in_rows, nb)
        if M.shape[0] == 0:
            return None
        sl, rl, T = id_fixed_tolerance(M, eps)
        T_out = T_in = T
    if len(rl) == 0:
        return None
    S, R = B[sl], B[rl]
    N = part.N
    J = np.concatenate([S, N])
    nS = len(S)
    A_RR = upd.block(R, R)
    A_RJ = upd.block(R, J)
    A_JR = upd.block(J, R)
    A_SJ = upd.block(S, J)
    A_JS = upd.block(J, S)
    # E (rows R -= T_in^T rows S) then F (cols R -= cols S T_out)
    X_RJ = A_RJ - T_in.T @ A_SJ
    X_JR = A_JR - A_JS @ T_out
    X_RR = (A_RR - T_in.T @ A_JR[:nS] - A_RJ[:, :nS] @ T_out
            + T_in.T @ A_SJ[:, :nS] @ T_out)
    lu = LUFactor(X_RR, what=f"X_RR of box {b}")
    Umat = lu.solve(X_RJ)
    Lmat = lu.solve(X_JR.T, trans=1).T   # X_JR X_RR^{-1}
    fac = SkeletonFactor(b, tree.boxes[b].level, S, R, J, T_out, T_in, lu,
                         Lmat, Umat)
    # R leaves the active set; the Schur complement lands on (S + N)^2
    store.restrict(b, sl)
    boxes = ([b] if nS else []) + part.N_boxes
    if boxes:
        store.add_product(boxes, X_JR, Umat)
    return fac


def _interp(M, sl, rl):
    if len(rl) == 0 or M.shape[0] == 0:
        return np.zeros((len(sl), len(rl)), dtype=complex)
    T, *_ = np.linalg.lstsq(M[:, sl], M[:, rl], rcond=None)
    return T


# ----------------------------------------------------------------------------
# the factorization

@dataclass
class FmmLuFactorization:
    n: int
    eps: float
    factors: list
    root_idx: np.ndarray
    root_lu: LUFactor
    stats: dict = field(default_factory=dict)

    @property
    def n0(self) -> int:
        return len(self.root_idx)

    @property
    def nbytes(self) -> int:
        return sum(f.nbytes for f in self.factors) + self.root_lu.lu.nbytes

    def _check(self, x):
        x = np.asarray(x)
        if x.shape[0] != self.n:
            raise ValueError(f"expected leading dimension {self.n}, got {x.shape[0]}")
        return x.astype(complex, copy=True)

    def apply(self, x):
        """Product of the compressed operator with ``x`` (vector or columns)."""
        x = self._check(x)
        for f in self.factors:
            x[f.S] += f.T_out @ x[f.R]
            x[f.R] += f.Umat @ x[f.J]
        for f in self.factors:
            x[f.R] = f.lu.matvec(x[f.R])
        x[self.root_idx] = self.root_lu.matvec(x[self.root_idx])
        for f in reversed(self.factors):
            x[f.J] += f.Lmat @ x[f.R]
            x[f.R] += f.T_in.T @ x[f.S]
        return x

    def apply_adjoint(self, x):
        x = self._check(x)
        for f in self.factors:
            x[f.S] += f.T_in.conj() @ x[f.R]
            x[f.R] += f.Lmat.conj().T @ x[f.J]
        for f in self.factors:
            x[f.R] = f.lu.matvec(x[f.R], adjoint=True)
        x[self.root_idx] = self.root_lu.matvec(x[self.root_idx], adjoint=True)
        for f in reversed(self.factors):
            x[f.J] += f.Umat.conj().T @ x[f.R]
            x[f.R] += f.T_out.conj().T @ x[f.S]
        return x

    def solve(self, b):
        """Approximate ``A^{-1} b`` (vector or columns)."""
        x = self._check(b)
        for f in self.factors:
            x[f.R] -= f.T_in.T @ x[f.S]
            x[f.J] -= f.Lmat @ x[f.R]
        for f in self.factors:
            x[f.R] = f.lu.solve(x[f.R])
        x[self.root_idx] = self.root_lu.solve(x[self.root_idx])
        for f in reversed(self.factors):
            x[f.R] -= f.Umat @ x[f.J]
            x[f.S] -= f.T_out @ x[f.R]
        return x

    def stats_json(self, **kw):
        return json.dumps(self.stats, **kw)


class PurityViolation(AssertionError):
    pass


def _audit(oracle, upd, store, part, table_pattern):
    """Check that ``A[P, B]`` and ``A[B, P]`` are pure scaled kernel values."""
    P = part.P
    B = part.B
    if len(P) == 0 or len(B) == 0:
        return 0
    if store.touched is not None and (store.touched[np.ix_(P, B)].any()
                                      or store.touched[np.ix_(B, P)].any()):
        raise PurityViolation(f"Schur-updated entries in P of box {part.box}")
    if table_pattern is not None and (table_pattern[np.ix_(P, B)].any()
                                      or table_pattern[np.ix_(B, P)].any()):
        raise PurityViolation(f"near-corrected entries in P of box {part.box}")
    for rows, cols in ((P, B), (B, P)):
        got = upd.block(rows, cols)
        pure, _ = oracle.kernel_block(rows, cols)
        if not np.array_equal(got, pure):
            raise PurityViolation(f"impure A_PB entries for box {part.box}")
    return 2 * len(P) * len(B)


def factorize(oracle: EntryOracle, tree: Octree, eps: float,
              opts: FactorOptions | None = None) -> FmmLuFactorization:
    """Fine-to-coarse strong skeletonization followed by a dense root solve."""
    opts = opts or FactorOptions()
    t0 = time.perf_counter()
    n = oracle.n
    store = BlockUpdateStore(n, track_touched=opts.audit)
    upd = UpdatedOracle(oracle, store)
    for leaf in tree.leaves:
        store.set_owner(leaf, tree.boxes[leaf].points)
    pattern = None
    dense_pattern = None
    if oracle.table is not None:
        csr = (oracle.table.scaled != 0).astype(np.int8).tocsr()
        pattern = (csr, csr.tocsc())
        if opts.audit:
            dense_pattern = csr.toarray().astype(bool)
    factors = []
    per_level = []
    audited = 0
    for lvl in range(tree.depth, opts.min_level - 1, -1):
        boxes = [b for b in tree.levels[lvl] if b in store.owners]
        parts = [partition_far_field(tree, b, store.owners, store, pattern,
                                     store.owner_of) for b in boxes]
        if not any(p.P_boxes for p in parts) and opts.compression == "proxy":
            logger.info("level %d: no far field left, stopping", lvl)
            break
        ranks = []
        for b in boxes:
            part = partition_far_field(tree, b, store.owners, store, pattern,
                                       store.owner_of)
            if opts.audit:
                audited += _audit(oracle, upd, store, part, dense_pattern)
            box = tree.boxes[b]
            proxy = make_proxy(box.center, box.side, opts.rho, oracle.k, eps,
                               opts.p_min)
            nb = len(part.B)
            fac = skeletonize_box(oracle, upd, store, tree, part, proxy, eps, opts)
            if fac is not None:
                factors.append(fac)
            ranks.append((nb, nb if fac is None else len(fac.S)))
        per_level.append({
            "level": lvl, "boxes": len(boxes),
            "active_in": int(sum(r[0] for r in ranks)),
            "active_out": int(sum(r[1] for r in ranks)),
            "max_rank": int(max((r[1] for r in ranks), default=0)),
            "store_bytes": int(store.nbytes),
            "factor_bytes": int(sum(f.nbytes for f in factors)),
        })
        logger.info("level %d: %d boxes, %d -> %d active, store %.0f MB, "
                    "factors %.0f MB", lvl, len(boxes), per_level[-1]["active_in"],
                    per_level[-1]["active_out"], store.nbytes / 1e6,
                    per_level[-1]["factor_bytes"] / 1e6)
        # parents inherit the union of their children's skeletons
        if lvl - 1 >= 0:
            for p in tree.levels[lvl - 1]:
                ch = tree.boxes[p].children
                if ch:
                    store.merge(p, ch)
    owners = [b for lv in tree.levels for b in lv if b in store.owners]
    root_idx = (np.concatenate([store.owners[b] for b in owners])
                if owners else np.zeros(0, dtype=np.int64))
    root_lu = LUFactor(upd.block(root_idx, root_idx, order="F"), what="root block",
                       overwrite=True)
    t_f = time.perf_counter() - t0
    F = FmmLuFactorization(n, eps, factors, root_idx, root_lu)
    F.stats = {
        "n": n, "eps": eps, "n_0": F.n0, "m_f_bytes": int(F.nbytes),
        "t_f": t_f, "levels": per_level, "n_factors": len(factors),
        "compression": opts.compression, "rho": opts.rho,
        "separate_t": opts.separate_t, "audited_entries": audited,
        "update_store_peak_bytes": max((p["store_bytes"] for p in per_level),
                                       default=0),
    }
    return F
