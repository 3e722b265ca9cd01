import json
import math

import numpy as np
import pytest

from fmmlu.driver import DirichletSolver, SolverOptions
from fmmlu.factorization import (BlockUpdateStore, FactorOptions, UpdatedOracle,
                                 factorize, make_proxy, proxy_order)
from fmmlu.geometry import make_multiscale_plate, make_sphere, make_wiggly_torus
from fmmlu.kernels import KernelKind, kernel_matrix
from fmmlu.octree import build_tree, enforce_level_restriction, partition_far_field
from fmmlu.quadrature import EntryOracle

EPS = 1e-6


@pytest.fixture(scope="module")
def torus_mid():
    return make_wiggly_torus(16, 8, 4)


@pytest.fixture(scope="module")
def torus_solver(torus_mid):
    return DirichletSolver(torus_mid, 0.97, EPS, SolverOptions(s=40))


@pytest.fixture(scope="module")
def torus_dense(torus_solver):
    return torus_solver.oracle.dense()


# proxy surfaces ----------------------------------------------------------------

def test_proxy_order_laplace_floor():
    assert proxy_order(0.0, 1e-6) == 8
    px = make_proxy(np.zeros(3), 1.0, 1.5, 0.0, 1e-6)
    assert px.order == 8 and px.n_points == 144


def test_proxy_geometry():
    c = np.array([1.0, -2.0, 0.5])
    px = make_proxy(c, 0.4, 1.5, 3.0, 1e-8)
    r = np.linalg.norm(px.points - c, axis=1)
    assert np.allclose(r, 0.6, rtol=1e-14)
    assert np.allclose(px.normals, (px.points - c) / 0.6, atol=1e-14)
    assert np.isclose(px.weights.sum(), 4 * np.pi * 0.36, rtol=1e-12)
    assert px.n_points == 2 * px.order * (px.order + 1)


def test_proxy_order_monotone_in_kappa():
    ords = [proxy_order(kap, 1e-6) for kap in np.linspace(0, 60, 61)]
    assert all(a <= b for a, b in zip(ords, ords[1:]))
    assert 25 <= ords[-1] - ords[30] <= 40      # slope one in kappa


@pytest.mark.parametrize("rho", [0.8, 2.5, 3.0])
def test_proxy_radius_bounds(rho):
    with pytest.raises(ValueError):
        make_proxy(np.zeros(3), 1.0, rho, 1.0, 1e-6)


# block updates ---------------------------------------------------------------

class _Dense:
    def __init__(self, A):
        self.A = A

    def block(self, rows, cols, order="C"):
        return np.array(self.A[np.ix_(rows, cols)], order=order)


def test_two_box_schur_update_by_hand():
    A = np.array([[4.0, 1.5], [-2.0, 3.0]], dtype=complex)
    store = BlockUpdateStore(2)
    store.set_owner(0, [0])
    store.set_owner(1, [1])
    # eliminate index 0 completely: S = {} and N = {box 1}
    X_JR = A[1:, :1]
    Umat = A[:1, 1:] / A[0, 0]
    store.restrict(0, np.zeros(0, dtype=int))
    store.add_product([1], X_JR, Umat)
    upd = UpdatedOracle(_Dense(A), store)
    assert upd.entry(1, 1) == A[1, 1] - A[1, 0] * A[0, 1] / A[0, 0]
    assert upd.entry(0, 1) == A[0, 1]


def test_store_merge_rekeys_blocks(rng):
    A = np.zeros((4, 4), dtype=complex)
    store = BlockUpdateStore(4)
    store.set_owner(1, [0, 1])
    store.set_owner(2, [2])
    store.set_owner(3, [3])
    X = rng.standard_normal((4, 2)) + 0j
    Y = rng.standard_normal((2, 4)) + 0j
    store.add_product([1, 2, 3], X, Y)
    before = UpdatedOracle(_Dense(A), store).block(np.arange(4), np.arange(4))
    assert np.allclose(before, -X @ Y)
    store.merge(9, [1, 2])
    assert set(store.owners) == {9, 3}
    assert (9, 9) in store.blocks and (9, 3) in store.blocks and (3, 9) in store.blocks
    after = UpdatedOracle(_Dense(A), store).block(np.arange(4), np.arange(4))
    assert np.array_equal(before, after)


# whole factorization -----------------------------------------------------------

def test_single_leaf_is_dense_lu():
    d = make_sphere(1.0, 1, 3)                    # 54 nodes, one leaf
    solver = DirichletSolver(d, 1.0, EPS, SolverOptions(s=100))
    F = solver.factorization
    assert F.n0 == d.n and not F.factors
    A = solver.oracle.dense()
    b = np.random.default_rng(0).standard_normal(d.n) + 0j
    x = F.solve(b)
    ref = np.linalg.solve(A, b)
    assert np.linalg.norm(x - ref) <= 1e-12 * np.linalg.norm(ref)


def test_factorization_compresses(torus_solver):
    F = torus_solver.factorization
    assert F.factors and F.n0 < F.n
    assert F.nbytes == F.stats["m_f_bytes"]
    assert F.nbytes == (sum(f.nbytes for f in F.factors) + F.root_lu.lu.nbytes)


def test_apply_matches_dense(torus_solver, torus_dense):
    F = torus_solver.factorization
    A = torus_dense
    E = A - F.apply(np.eye(F.n))
    assert np.linalg.norm(E, 2) <= 10 * EPS * np.linalg.norm(A, 2)
    Eh = A.conj().T - F.apply_adjoint(np.eye(F.n))
    assert np.linalg.norm(Eh, 2) <= 10 * EPS * np.linalg.norm(A, 2)


def test_solve_residual_and_round_trip(torus_solver, torus_dense, rng):
    F = torus_solver.factorization
    b = rng.standard_normal((F.n, 20)) + 1j * rng.standard_normal((F.n, 20))
    x = F.solve(b)
    res = np.linalg.norm(torus_dense @ x - b, axis=0) / np.linalg.norm(b, axis=0)
    assert res.max() <= 50 * EPS
    y = F.solve(F.apply(b))
    assert np.linalg.norm(y - b) <= 50 * EPS * np.linalg.norm(b)


def test_apply_linear_and_zero(torus_solver, rng):
    F = torus_solver.factorization
    x, y = rng.standard_normal((2, F.n)) + 1j * rng.standard_normal((2, F.n))
    a, b = 2 - 1j, 0.5j
    lhs = F.apply(a * x + b * y)
    rhs = a * F.apply(x) + b * F.apply(y)
    assert np.linalg.norm(lhs - rhs) <= 1e-13 * np.linalg.norm(rhs)
    assert not F.apply(np.zeros(F.n)).any()


def test_dimension_mismatch(torus_solver):
    F = torus_solver.factorization
    for op in (F.apply, F.apply_adjoint, F.solve):
        with pytest.raises(ValueError):
            op(np.ones(F.n + 1))


def test_separate_t_and_dense_compression(torus_mid, torus_solver, torus_dense, rng):
    b = rng.standard_normal(torus_mid.n) + 0j
    nb = np.linalg.norm(b)
    res = {}
    for mode, kw in {"sep": dict(separate_t=True), "dense": dict(compression="dense")}.items():
        F = factorize(torus_solver.oracle, torus_solver.tree, EPS, FactorOptions(**kw))
        res[mode] = np.linalg.norm(torus_dense @ F.solve(b) - b) / nb
        assert res[mode] <= 50 * EPS
    base = np.linalg.norm(torus_dense @ torus_solver.factorization.solve(b) - b) / nb
    assert res["dense"] <= 10 * max(base, 1e-3 * EPS)
    assert base <= 10 * max(res["dense"], 1e-3 * EPS)


def test_stats_json(torus_solver):
    s = json.loads(torus_solver.factorization.stats_json())
    for key in ("n", "n_0", "m_f_bytes", "t_f", "levels"):
        assert key in s
    lv = s["levels"]
    assert [x["level"] for x in lv] == sorted((x["level"] for x in lv), reverse=True)
    assert all(x["active_out"] <= x["active_in"] for x in lv)


def test_purity_audit_on_plate():
    d = make_multiscale_plate(3, 3, base=2)
    solver = DirichletSolver(d, 1.0, EPS, SolverOptions(s=12, audit=True))
    assert solver.tree.is_level_restricted()
    assert solver.factorization.stats["audited_entries"] > 0


# proxy completeness --------------------------------------------------------------

def _truncated_residual(M, basis, eps):
    """Rank of ``basis`` truncated at ``eps`` and the relative distance of the
    rows of ``M`` from that row space."""
    _, s, vh = np.linalg.svd(basis, full_matrices=False)
    V = vh[s > eps * s[0]]
    R = M - (M @ V.conj().T) @ V
    return len(V), np.linalg.norm(R, 2) / np.linalg.norm(M, 2)


@pytest.fixture(scope="module")
def big_leaf():
    d = make_wiggly_torus(32, 16, 4)
    tree = enforce_level_restriction(build_tree(d.nodes, 400))
    owners = {b: tree.boxes[b].points for b in tree.leaves}
    for b in tree.leaves:
        part = partition_far_field(tree, b, owners)
        if len(part.P) > 500 and len(part.B) > 200:
            return d, tree, part
    raise AssertionError("no leaf with a far field")


@pytest.mark.parametrize("resonant", [False, True])
def test_proxy_completeness(big_leaf, resonant):
    d, tree, part = big_leaf
    box = tree.boxes[part.box]
    rho = 1.5
    k = math.pi / (rho * box.side) if resonant else 0.97   # j_0(k r) = 0 on the proxy ball
    orc = EntryOracle(d, KernelKind.COMBINED_FIELD, k, 0.5, None)
    px = make_proxy(box.center, box.side, rho, k, EPS)
    B, P = part.B, part.P
    sw = np.sqrt(d.weights)[B]
    pw = np.sqrt(px.weights)
    Kg = kernel_matrix(KernelKind.COMBINED_FIELD, k, px.points, d.nodes[B],
                       px.normals, d.normals[B]) * sw[None, :] * pw[:, None]
    Sg = kernel_matrix(KernelKind.SINGLE_LAYER, k, d.nodes[B], px.points) \
        * sw[:, None] * pw[None, :]
    r_out, e_out = _truncated_residual(orc.kernel_block(P, B)[0], Kg, EPS)
    r_in, e_in = _truncated_residual(orc.kernel_block(B, P)[0].T, Sg.T, EPS)
    assert max(r_out, r_in) < len(B) / 2
    assert e_out <= EPS and e_in <= EPS
