"""Exterior Helmholtz Dirichlet solves, validation and benchmark sweeps."""

from __future__ import annotations

import csv
import json
import logging
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .factorization import FactorOptions, FmmLuFactorization, factorize
from .geometry import (SurfaceDiscretization, exterior_targets, interior_sources,
                       make_multiscale_plate, make_sphere, make_wiggly_torus,
                       torus_patch_split)
from .kernels import (FOUR_PI, KernelKind, incident_plane_wave,
                      incident_point_sources, kernel_matrix)
from .octree import Octree, build_tree, enforce_level_restriction
from .quadrature import EntryOracle, build_near_table

logger = logging.getLogger(__name__)

ALPHA = 0.5
TABLE_HEADER = ["p", "npatches", "n", "k", "t_f", "t_s", "t_q", "m_f_bytes",
                "n_0", "eps_a"]


class TargetTooClose(ValueError):
    """An evaluation target lies inside some patch's near region."""


@dataclass
class SolverOptions:
    s: int = 40
    rho: float = 1.5
    eta: float = 1.25
    eps_q: float | None = None       # default eps / 10
    p_min: int = 8
    compression: str = "proxy"
    separate_t: bool = False
    audit: bool = False


@dataclass
class BvpProblem:
    disc: SurfaceDiscretization
    k: float
    eps: float = 1e-6
    sources: np.ndarray | None = None       # interior point sources
    strengths: np.ndarray | None = None
    direction: np.ndarray | None = None     # plane-wave direction
    options: SolverOptions = field(default_factory=SolverOptions)

    def boundary_data(self) -> np.ndarray:
        """Dirichlet data ``f`` at the nodes."""
        nodes = self.disc.nodes
        if self.sources is not None:
            f = incident_point_sources(self.k, self.sources, self.strengths, nodes)
        elif self.direction is not None:
            f = -incident_plane_wave(self.k, self.direction, nodes)
        else:
            f = np.zeros(self.disc.n, dtype=complex)
        if not np.all(np.isfinite(f)):
            raise ValueError("boundary data not finite at every node")
        return f


class DirichletSolver:
    """Builds the combined-field system once and solves for any data.

    Attributes ``t_q``, ``t_f`` hold wall-clock times of the near-quadrature
    and factorization stages.
    """

    def __init__(self, disc: SurfaceDiscretization, k, eps,
                 options: SolverOptions | None = None):
        self.disc = disc
        self.k = k
        self.eps = eps
        self.options = opts = options or SolverOptions()
        eps_q = opts.eps_q if opts.eps_q is not None else eps / 10
        t0 = time.perf_counter()
        self.table = build_near_table(disc, KernelKind.COMBINED_FIELD, k,
                                      eps_q=eps_q, eta=opts.eta)
        self.t_q = time.perf_counter() - t0
        self.oracle = EntryOracle(disc, KernelKind.COMBINED_FIELD, k, ALPHA,
                                  self.table)
        t0 = time.perf_counter()
        self.tree: Octree = enforce_level_restriction(build_tree(disc.nodes, opts.s))
        self.factorization: FmmLuFactorization = factorize(
            self.oracle, self.tree, eps,
            FactorOptions(rho=opts.rho, p_min=opts.p_min,
                          compression=opts.compression,
                          separate_t=opts.separate_t, audit=opts.audit))
        self.t_f = time.perf_counter() - t0
        self.t_s = None

    def solve(self, f):
        """Scaled density ``sigma~`` for Dirichlet data ``f`` (vector or columns)."""
        f = np.asarray(f, dtype=complex)
        sw = np.sqrt(self.disc.weights)
        b = f * (sw if f.ndim == 1 else sw[:, None])
        t0 = time.perf_counter()
        sig = self.factorization.solve(b)
        self.t_s = time.perf_counter() - t0
        return sig


def solve_dirichlet(problem: BvpProblem):
    """Returns ``(sigma~, solver)``; ``sigma~_i = sigma_i sqrt(w_i)``."""
    solver = DirichletSolver(problem.disc, problem.k, problem.eps, problem.options)
    return solver.solve(problem.boundary_data()), solver


def _check_far(disc, targets, eta):
    c = disc.patch_centers
    rad = eta * disc.patch_diameters
    for a in range(0, len(targets), 256):
        t = targets[a:a + 256]
        d = np.linalg.norm(t[:, None, :] - c[None, :, :], axis=2)
        bad = np.argwhere(d <= rad[None, :])
        if len(bad):
            i, j = bad[0]
            raise TargetTooClose(f"target {a + i} lies within {eta} diameters "
                                 f"of patch {j}")


def eval_exterior(disc: SurfaceDiscretization, k, sigma_scaled, targets,
                  eta: float = 1.25):
    """Combined-field potential ``sum_j K(t, x_j) sigma~_j sqrt(w_j)`` at far targets."""
    targets = np.asarray(targets, dtype=float).reshape(-1, 3)
    _check_far(disc, targets, eta)
    coef = np.asarray(sigma_scaled) * (np.sqrt(disc.weights) if np.ndim(sigma_scaled) == 1
                                       else np.sqrt(disc.weights)[:, None])
    out = []
    for a in range(0, len(targets), 64):
        K = kernel_matrix(KernelKind.COMBINED_FIELD, k, targets[a:a + 64],
                          disc.nodes, None, disc.normals)
        out.append(K @ coef)
    return np.concatenate(out)


@dataclass
class ValidationReport:
    eps_a: float
    targets: np.ndarray
    errors: np.ndarray
    u_exact: np.ndarray
    u_comp: np.ndarray
    sigma_norm: float
    row: dict
    stats: dict

    def recompute_eps_a(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.u_comp - self.u_exact) ** 2))
                     / self.sigma_norm)


def validate_point_sources(disc: SurfaceDiscretization, k, eps, *, n_sources=50,
                           n_targets=50, seed=0, options=None, npatches=None,
                           solver=None):
    """Solve with data from interior point sources and measure ``eps_a``."""
    rng = np.random.default_rng(seed)
    src = interior_sources(disc, n_sources, rng)
    q = rng.standard_normal(n_sources) + 1j * rng.standard_normal(n_sources)
    tgt = exterior_targets(disc, n_targets, rng)
    prob = BvpProblem(disc, k, eps, sources=src, strengths=q,
                      options=options or SolverOptions())
    if solver is None:
        solver = DirichletSolver(disc, k, eps, prob.options)
    sig = solver.solve(prob.boundary_data())
    u = eval_exterior(disc, k, sig, tgt, solver.options.eta)
    ue = incident_point_sources(k, src, q, tgt)
    err = np.abs(u - ue)
    snorm = float(np.linalg.norm(sig))
    eps_a = float(np.sqrt(np.sum(err ** 2)) / snorm)
    F = solver.factorization
    row = {"p": disc.order, "npatches": npatches or disc.n_patches, "n": disc.n,
           "k": float(np.real(k)), "t_f": round(solver.t_f, 4),
           "t_s": round(solver.t_s, 4), "t_q": round(solver.t_q, 4),
           "m_f_bytes": int(F.nbytes), "n_0": F.n0, "eps_a": eps_a}
    stats = dict(F.stats, t_q=solver.t_q, t_s=solver.t_s,
                 tree=solver.tree.stats())
    return ValidationReport(eps_a, tgt, err, ue, u, snorm, row, stats)


def far_field_backscatter(disc, k, sigma_scaled, direction):
    """``(-ik / 4 pi) sum_j exp(ik x_j . d) (1 - n_j . d) sigma~_j sqrt(w_j)``."""
    d = np.asarray(direction, dtype=float)
    ph = np.exp(1j * k * (disc.nodes @ d)) * (1 - disc.normals @ d) * np.sqrt(disc.weights)
    return complex(-1j * k / FOUR_PI * (ph @ sigma_scaled))


def monostatic_rcs(disc: SurfaceDiscretization, k, angles, eps, options=None,
                   solver=None):
    """Backscattered far-field amplitude ``R(phi)`` for plane waves in the xy-plane.

    One factorization serves every angle.
    """
    angles = np.atleast_1d(np.asarray(angles, dtype=float))
    if len(angles) < 1:
        raise ValueError("need at least one angle")
    if solver is None:
        solver = DirichletSolver(disc, k, eps, options)
    dirs = np.stack([np.cos(angles), np.sin(angles), np.zeros_like(angles)], axis=1)
    f = -np.exp(1j * k * (disc.nodes @ dirs.T))
    sig = solver.solve(f)
    R = np.array([far_field_backscatter(disc, k, sig[:, a], dirs[a])
                  for a in range(len(angles))])
    return angles, R, solver


def write_rcs_csv(path, angles, R):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phi", "re_R", "im_R", "abs_R"])
        for a, r in zip(angles, R):
            r = complex(r)
            w.writerow([repr(float(a)), repr(r.real), repr(r.imag), repr(abs(r))])


def mie_backscatter(k, a, lmax=None):
    """Far-field backscatter amplitude of a sound-soft sphere of radius ``a``."""
    from scipy.special import spherical_jn, spherical_yn
    ka = k * a
    if lmax is None:
        lmax = int(ka + 10 * ka ** (1 / 3) + 20)
    l = np.arange(lmax + 1)
    j = spherical_jn(l, ka)
    h = j + 1j * spherical_yn(l, ka)
    return complex(1j / k * np.sum((2 * l + 1) * (-1.0) ** l * j / h))


# ----------------------------------------------------------------------------
# sweeps

def make_geometry(name, patches, p, refine_depth=4):
    """Geometry by name; ``patches`` is ``(n_u, n_v)`` or a per-face count."""
    if name == "torus":
        nu, nv = patches
        return make_wiggly_torus(nu, nv, p)
    if name == "sphere":
        return make_sphere(1.0, int(patches[0]), p)
    if name == "plate":
        return make_multiscale_plate(refine_depth, p, base=int(patches[0]))
    raise ValueError(f"unknown geometry {name!r}")


def fit_exponent(n, t):
    """Least-squares slope of ``log t`` against ``log n``."""
    n = np.asarray(n, dtype=float)
    t = np.asarray(t, dtype=float)
    ok = (t > 0) & np.isfinite(t)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(n[ok]), np.log(t[ok]), 1)[0])


def _sweep_row(nu, nv, p, k, eps, seed, options, npatch):
    disc = make_wiggly_torus(nu, nv, p)
    rep = validate_point_sources(disc, k, eps, seed=seed, options=options,
                                 npatches=npatch)
    return rep.row


def benchmark_sweep(rows, *, ppw_mode=False, k0=0.97, seed=0, options=None,
                    out=None, isolate=False):
    """Run ``rows`` of ``{"p", "patches": (nu, nv), "k", "eps"}`` on the torus.

    In ``ppw_mode`` the wavenumber of each row is ``k0 * sqrt(N / N_first)`` so
    the points per wavelength stay fixed. Failures are recorded and the sweep
    continues; with ``isolate`` each row runs in a child process so that a row
    killed for lack of memory is recorded too. Returns ``(table_rows, exponents)``.
    """
    table = []
    base = None
    for r in rows:
        nu, nv = r["patches"]
        npatch = nu * nv
        base = base or npatch
        k = k0 * np.sqrt(npatch / base) if ppw_mode else r.get("k", k0)
        args = (nu, nv, r["p"], k, r["eps"], seed, options, npatch)
        try:
            if isolate:
                ctx = multiprocessing.get_context("fork")
                with ProcessPoolExecutor(max_workers=1, mp_context=ctx) as ex:
                    row = ex.submit(_sweep_row, *args).result()
            else:
                row = _sweep_row(*args)
            logger.info("sweep row %s", row)
        except Exception as exc:  # noqa: BLE001 - keep sweeping
            logger.exception("row %s failed", r)
            row = {"p": r["p"], "npatches": npatch, "n": npatch * r["p"] ** 2,
                   "k": k, "error": repr(exc)}
        table.append(row)
        if out:
            write_table(out, table)
    good = [t for t in table if "error" not in t]
    ns = [t["n"] for t in good]
    exps = {key: fit_exponent(ns, [t[key] for t in good])
            for key in ("t_f", "t_s", "t_q", "m_f_bytes")}
    return table, exps


def write_table(path, table):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_HEADER, extrasaction="ignore")
        w.writeheader()
        for row in table:
            w.writerow({k: row.get(k, "") for k in TABLE_HEADER})


def default_sweep_rows(base=(10, 6), steps=4, p=4, eps=5e-7, k=0.97):
    return [{"p": p, "patches": (base[0] * 2 ** s, base[1] * 2 ** s), "k": k,
             "eps": eps} for s in range(steps)]


def convergence_rows(p=4, eps=5e-7, k=0.97):
    """Desk-scale rows of the torus convergence table (n ~ 980, 2000, 8000)."""
    return [{"p": p, "patches": torus_patch_split(n, p), "k": k, "eps": eps}
            for n in (980, 2000, 8000)]


def report_json(report: ValidationReport) -> str:
    return json.dumps({"row": report.row, "stats": report.stats}, default=float,
                      indent=2)


__all__ = ["BvpProblem", "DirichletSolver", "SolverOptions", "TargetTooClose",
           "ValidationReport", "benchmark_sweep", "eval_exterior",
           "monostatic_rcs", "solve_dirichlet", "validate_point_sources",
           "mie_backscatter", "fit_exponent", "far_field_backscatter"]
