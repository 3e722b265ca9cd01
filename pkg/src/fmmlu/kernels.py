"""Helmholtz Green's function, layer-potential kernels and incident fields.

Conventions: ``G(x, y) = exp(ik|x-y|) / (4 pi |x-y|)``; gradients are taken
analytically. ``k = 0`` gives the Laplace kernels.
"""

from __future__ import annotations

import enum

import numpy as np

FOUR_PI = 4.0 * np.pi


class SingularEvaluation(ValueError):
    """Raised when a kernel is evaluated at (numerically) coincident points."""


class KernelKind(enum.Enum):
    SINGLE_LAYER = "single"
    DOUBLE_LAYER = "double"
    COMBINED_FIELD = "combined"
    SINGLE_LAYER_NORMAL_DERIV = "single_normal_deriv"
    INCOMING_PROXY = "incoming_proxy"


def check_wavenumber(k) -> complex:
    k = complex(k)
    if not np.isfinite(k) or k.imag < 0:
        raise ValueError(f"wavenumber must be finite with Im(k) >= 0, got {k}")
    return k


def green(k, x, y):
    """Free-space Helmholtz Green's function, broadcasting over leading axes."""
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    r = np.sqrt(np.einsum("...i,...i->...", d, d))
    if np.any(r < 1e-300):
        raise SingularEvaluation("coincident points in green()")
    if k == 0:
        return (1.0 / (FOUR_PI * r)).astype(complex)
    return np.exp(1j * k * r) / (FOUR_PI * r)


def _pair_geometry(targets, sources):
    d = targets[:, None, :] - sources[None, :, :]
    r = np.sqrt(np.einsum("ijk,ijk->ij", d, d))
    return d, r


def kernel_matrix(kind: KernelKind, k, targets, sources, target_normals=None,
                  source_normals=None, *, zero_diagonal_mask=None):
    """Dense matrix ``K(x_i, y_j)`` for targets ``x_i`` and sources ``y_j``.

    ``zero_diagonal_mask`` (boolean, shape ``(m, n)``) marks coincident pairs
    whose value is set to zero instead of raising; it is used for the
    self-interaction entries of a Nystrom matrix, which are always replaced by
    quadrature corrections.
    """
    k = complex(k)
    targets = np.asarray(targets, dtype=float).reshape(-1, 3)
    sources = np.asarray(sources, dtype=float).reshape(-1, 3)
    d, r = _pair_geometry(targets, sources)
    if zero_diagonal_mask is not None:
        r = np.where(zero_diagonal_mask, 1.0, r)
    if np.any(r < 1e-300):
        raise SingularEvaluation("coincident target and source")
    rinv = 1.0 / r
    if k == 0:
        G = (rinv / FOUR_PI).astype(complex)
    else:
        G = np.exp(1j * k * r) * (rinv / FOUR_PI)
    if kind is KernelKind.SINGLE_LAYER:
        out = G
    else:
        # G'(r)/r
        g1 = G * (1j * k - rinv) * rinv
        if kind is KernelKind.DOUBLE_LAYER or kind is KernelKind.COMBINED_FIELD:
            dny = np.einsum("ijk,jk->ij", d, source_normals)
            # n_y . grad_y G = -(G'/r) (x - y) . n_y
            out = -g1 * dny
            if kind is KernelKind.COMBINED_FIELD:
                out = out - 1j * k * G
        elif kind is KernelKind.SINGLE_LAYER_NORMAL_DERIV:
            dnx = np.einsum("ijk,ik->ij", d, target_normals)
            out = g1 * dnx
        elif kind is KernelKind.INCOMING_PROXY:
            out = _incoming_proxy(k, G, g1, d, rinv, target_normals,
                                  source_normals)
        else:  # pragma: no cover
            raise ValueError(kind)
    if zero_diagonal_mask is not None:
        out = np.where(zero_diagonal_mask, 0.0, out)
    return out


def _incoming_proxy(k, G, g1, d, rinv, nx, ny):
    """``-ik K + n_x . grad_x K`` with ``K`` the combined-field kernel."""
    dnx = np.einsum("ijk,ik->ij", d, nx)
    dny = np.einsum("ijk,jk->ij", d, ny)
    nxny = nx @ ny.T
    ikr = 1j * k - rinv
    # G''(r) = G ((ik - 1/r)^2 + 1/r^2)
    G2 = G * (ikr * ikr + rinv * rinv)
    g2 = (G2 - g1) * rinv * rinv
    K = -g1 * dny - 1j * k * G
    # n_x . grad_x (n_y . grad_y G) = -g2 (n_x.d)(n_y.d) - g1 n_x.n_y
    dK = -g2 * dnx * dny - g1 * nxny - 1j * k * g1 * dnx
    return -1j * k * K + dK


def eval_kernel(kind: KernelKind, k, x, n_x, y, n_y) -> complex:
    """Scalar kernel evaluation; see :func:`kernel_matrix`."""
    needs_ny = kind in (KernelKind.DOUBLE_LAYER, KernelKind.COMBINED_FIELD,
                        KernelKind.INCOMING_PROXY)
    needs_nx = kind in (KernelKind.SINGLE_LAYER_NORMAL_DERIV,
                        KernelKind.INCOMING_PROXY)
    if needs_ny and n_y is None:
        raise ValueError(f"{kind} needs a source normal")
    if needs_nx and n_x is None:
        raise ValueError(f"{kind} needs a target normal")
    nx = None if n_x is None else np.asarray(n_x, dtype=float).reshape(1, 3)
    ny = None if n_y is None else np.asarray(n_y, dtype=float).reshape(1, 3)
    return complex(kernel_matrix(kind, k, x, y, nx, ny)[0, 0])


def incident_point_sources(k, sources, strengths, targets):
    """``f(x) = sum_j q_j exp(ik|x - x_j|) / |x - x_j|``.

    Note the missing ``1/(4 pi)``: this is the normalization of the
    validation field, not of :func:`green`.
    """
    targets = np.asarray(targets, dtype=float).reshape(-1, 3)
    sources = np.asarray(sources, dtype=float).reshape(-1, 3)
    _, r = _pair_geometry(targets, sources)
    if np.any(r < 1e-300):
        raise SingularEvaluation("target coincides with a point source")
    return (np.exp(1j * complex(k) * r) / r) @ np.asarray(strengths, dtype=complex)


def incident_plane_wave(k, direction, targets):
    """``exp(ik x . d)`` at each target."""
    d = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(d) - 1.0) > 1e-12:
        raise ValueError("plane-wave direction must be a unit vector")
    return np.exp(1j * k * (np.asarray(targets, dtype=float).reshape(-1, 3) @ d))


def kernel_pairs(kind: KernelKind, k, x, y, n_x=None, n_y=None):
    """Elementwise ``K(x_m, y_m)`` for matched rows of ``x`` and ``y``."""
    k = complex(k)
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    r = np.sqrt(np.einsum("mk,mk->m", d, d))
    if np.any(r < 1e-300):
        raise SingularEvaluation("coincident target and source")
    rinv = 1.0 / r
    G = np.exp(1j * k * r) * (rinv / FOUR_PI)
    if kind is KernelKind.SINGLE_LAYER:
        return G
    g1 = G * (1j * k - rinv) * rinv
    if kind in (KernelKind.DOUBLE_LAYER, KernelKind.COMBINED_FIELD):
        out = -g1 * np.einsum("mk,mk->m", d, n_y)
        if kind is KernelKind.COMBINED_FIELD:
            out = out - 1j * k * G
        return out
    if kind is KernelKind.SINGLE_LAYER_NORMAL_DERIV:
        return g1 * np.einsum("mk,mk->m", d, n_x)
    raise ValueError(f"kernel_pairs does not support {kind}")
