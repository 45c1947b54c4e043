import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from voxfrac.fem import (ConstraintSet, ElementTopology, Newmark, SolverError, element_arrays,
                         condensed_solve, gauss_rule, lumped_mass, mass_block, newton_solve,
                         node_lattice,
                         reference_gradients, saddle_solve, shape_eval)
from voxfrac.material import CATALOG, GaussPointState, MaterialParams


def unit_cube(order=1, scale=(1.0, 1.0, 1.0)):
    return node_lattice(order) / order * np.array(scale)


def random_hex(rng, order=1):
    X = unit_cube(order) + rng.uniform(-0.1, 0.1, ((order + 1) ** 3, 3))
    return X


# --- shape functions and quadrature ------------------------------------------------------

def test_trilinear_center():
    N, _ = shape_eval(1, np.zeros(3))
    assert np.allclose(N, 1 / 8, atol=0, rtol=1e-15)


@given(st.sampled_from([1, 2]), st.lists(st.floats(-1, 1), min_size=3, max_size=3))
@settings(max_examples=100, deadline=None)
def test_partition_of_unity(order, xi):
    N, dN = shape_eval(order, np.array(xi))
    assert abs(N.sum() - 1) < 1e-14
    assert np.abs(dN.sum(axis=0)).max() < 1e-13


@pytest.mark.parametrize("order", [1, 2])
def test_kronecker(order):
    nodes = node_lattice(order) * (2.0 / order) - 1.0
    N, _ = shape_eval(order, nodes)
    assert np.allclose(N, np.eye(len(nodes)), atol=1e-14)


@pytest.mark.parametrize("order", [1, 2])
def test_gradient_fd(order):
    xi = np.array([0.3, -0.2, 0.7])
    _, dN = shape_eval(order, xi)
    h = 1e-6
    for d in range(3):
        e = np.zeros(3)
        e[d] = h
        fd = (shape_eval(order, xi + e)[0] - shape_eval(order, xi - e)[0]) / (2 * h)
        assert np.allclose(dN[:, d], fd, atol=1e-8)


def test_gauss_one_point():
    p, w = gauss_rule(1)
    assert np.allclose(p, 0) and np.allclose(w, 8)


def test_gauss_two_point():
    p, w = gauss_rule(2)
    assert np.allclose(np.abs(p), 1 / np.sqrt(3)) and np.allclose(w, 1)


def test_gauss_three_point_monomial():
    p, w = gauss_rule(3)
    val = np.sum(w * p[:, 0] ** 5 * p[:, 1] ** 4 * p[:, 2] ** 2)
    exact = 0.0 * (2 / 5) * (2 / 3)   # odd power in x integrates to zero
    assert abs(val - exact) < 1e-14
    val = np.sum(w * p[:, 0] ** 4 * p[:, 1] ** 4 * p[:, 2] ** 2)
    assert abs(val - (2 / 5) * (2 / 5) * (2 / 3)) < 1e-14


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_gauss_weights_sum(n):
    assert abs(gauss_rule(n)[1].sum() - 8) < 1e-13


def test_gauss_unsupported():
    with pytest.raises(ValueError):
        gauss_rule(5)


def test_topology_node_count():
    ElementTopology(tuple(range(27)), 2, 3)
    with pytest.raises(ValueError):
        ElementTopology(tuple(range(8)), 2, 3)


def test_negative_jacobian():
    X = unit_cube()
    X[[0, 1]] = X[[1, 0]]
    _, dN = shape_eval(1, gauss_rule(2)[0])
    with pytest.raises(SolverError, match="Jacobian"):
        reference_gradients(dN, X)


# --- element arrays -------------------------------------------------------------------------

def _elastic():
    return MaterialParams("el", 100.0, 50.0, 1e12, 1e12, G_c=1.0, rho0=1e12, brittle=True)


def test_zero_displacement_zero_residual():
    out = element_arrays(1, unit_cube(), np.zeros((8, 3)), CATALOG["nickel"], GaussPointState.virgin(8), 1.0)
    assert np.all(out["r"] == 0)


def test_stiffness_rigid_modes():
    out = element_arrays(1, unit_cube(), np.zeros((8, 3)), _elastic(), GaussPointState.virgin(8), 1.0)
    k = out["k"]
    assert np.allclose(k, k.T, atol=1e-9 * np.abs(k).max())
    ev = np.linalg.eigvalsh(k)
    zero = np.abs(ev) < 1e-9 * ev.max()
    assert zero.sum() == 6
    assert np.all(ev[~zero] > 0)


def test_consistent_mass_rows():
    p = _elastic()   # rho0 = 1e12 kg/m^3 -> 1 t/mm^3
    X = unit_cube(scale=(2.0, 1.0, 1.0))
    out = element_arrays(1, X, np.zeros((8, 3)), p, GaussPointState.virgin(8), 1.0)
    M = out["m"]
    for d in range(3):
        assert np.isclose(M[d::3, d::3].sum(), p.rho * 2.0, rtol=1e-14)


def test_tangent_fd_element():
    rng = np.random.default_rng(2)
    p = CATALOG["nickel"]
    X = random_hex(rng)
    st0 = GaussPointState.virgin(8)
    u = rng.normal(0, 0.01, (8, 3))
    out = element_arrays(1, X, u, p, st0, 1.0)
    h = 1e-7
    kfd = np.zeros((24, 24))
    for j in range(24):
        du = np.zeros(24)
        du[j] = h
        rp = element_arrays(1, X, u + du.reshape(8, 3), p, st0, 1.0)["r"]
        rm = element_arrays(1, X, u - du.reshape(8, 3), p, st0, 1.0)["r"]
        kfd[:, j] = -(rp - rm) / (2 * h)
    assert np.abs(out["k"] - kfd).max() < 1e-5 * np.abs(kfd).max()


def test_rigid_rotation_stress_free():
    R = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    X = unit_cube()
    u = X @ R.T - X
    out = element_arrays(1, X, u, _elastic(), GaussPointState.virgin(8), 1.0)
    assert np.abs(out["r"]).max() < 1e-9


def test_newmark_inertia_terms():
    p = _elastic()
    nm = Newmark()
    X = unit_cube()
    u = np.full((8, 3), 1e-3)
    out = element_arrays(1, X, u, p, GaussPointState.virgin(8), 0.1, newmark=nm,
                         v=np.zeros(24), a=np.zeros(24), u_n=np.zeros(24))
    acc = u.ravel() / (0.25 * 0.01)
    assert np.allclose(out["rm"], -out["m"] @ acc)
    assert np.allclose(out["k_eff"], out["k"] + out["m"] / (0.25 * 0.01))


# --- mass -----------------------------------------------------------------------------------

def test_lumped_unit_cube():
    m = lumped_mass(1, unit_cube(), 1.0)
    for d in range(3):
        assert np.isclose(m[d::3].sum(), 1.0, rtol=1e-14)


def test_lumped_stretched_box():
    m = lumped_mass(1, unit_cube(scale=(2, 1, 1)), 3.0)
    for d in range(3):
        assert np.isclose(m[d::3].sum(), 6.0, rtol=1e-14)


@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([1, 2]))
@settings(max_examples=40, deadline=None)
def test_lumped_equals_consistent_total(seed, order):
    rng = np.random.default_rng(seed)
    X = random_hex(rng, order)
    pts, w = gauss_rule(order + 1)
    N, dN = shape_eval(order, pts)
    _, detJ = reference_gradients(dN, X)
    M = mass_block(N, w * detJ, 2.5)
    m = lumped_mass(order, X, 2.5)
    assert abs(m.sum() - M.sum()) <= 1e-12 * M.sum()


# --- Newmark ----------------------------------------------------------------------------------

def test_newmark_parameter_range():
    with pytest.raises(ValueError):
        Newmark(beta=0.6)
    with pytest.raises(ValueError):
        Newmark(gamma=0.4)


def test_newmark_constant_acceleration_exact():
    nm = Newmark()
    a0, dt = 3.0, 0.1
    D, v, a = np.zeros(1), np.zeros(1), np.full(1, a0)
    for k in range(1, 6):
        D_new = np.array([0.5 * a0 * (k * dt) ** 2])
        a_new = nm.acceleration(D_new, D, v, a, dt)
        v = nm.velocity(a_new, v, a, dt)
        D, a = D_new, a_new
        assert np.isclose(a[0], a0) and np.isclose(v[0], a0 * k * dt)


# --- constraints and the saddle solve ------------------------------------------------------

def test_constraint_matrix_rows():
    cs = ConstraintSet.from_rows([(6, [(0, 0.5), (3, 0.5)])])
    C = cs.matrix(9).toarray()
    assert C[0, 6] == 1 and C[0, 0] == -0.5 and C[0, 3] == -0.5
    assert np.allclose(cs.weight_sums(), 1)
    assert len(cs.select([False])) == 0


def _spring_chain(n):
    main = np.full(n, 2.0)
    main[-1] = 1.0
    return sp.diags([main, -np.ones(n - 1), -np.ones(n - 1)], [0, -1, 1], format="csr")


def test_empty_constraints_reduce_to_linear_solve():
    K = _spring_chain(6) * 10.0
    f = np.arange(1.0, 7.0)
    fixed = np.zeros(6, dtype=bool)
    res = newton_solve(lambda D: (K, K @ D - f), np.zeros(6), ConstraintSet(), fixed)
    assert res.converged
    assert np.allclose(res.D, np.linalg.solve(K.toarray(), f), rtol=1e-12)


def test_linear_problem_one_step():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(9, 9))
    K = sp.csr_matrix(A @ A.T + 9 * np.eye(9))
    f = rng.normal(size=9)
    errs = []
    res = newton_solve(lambda D: (K, K @ D - f), np.zeros(9), ConstraintSet(), np.zeros(9, bool),
                       tol=1e-12, on_iteration=lambda it, e, n: errs.append(e))
    assert res.converged and res.iterations == 1
    assert res.errors[-1] < 1e-13 * res.errors[0]


def test_midpoint_hanging_node():
    # three collinear nodes x=0, x=1, x=0.5 (hanging); bar elements 0-2 and 2-1 plus a spring 0-1
    K = sp.csr_matrix(np.array([[2.0, -1, -1], [-1, 2, -1], [-1, -1, 2]]))
    f = np.array([0.0, 1.0, 0.0])
    cs = ConstraintSet.from_rows([(2, [(0, 0.5), (1, 0.5)])])
    fixed = np.array([True, False, False])
    res = newton_solve(lambda D: (K, K @ D - f), np.zeros(3), cs, fixed, tol=1e-14)
    assert res.converged
    assert abs(res.D[2] - 0.5 * (res.D[0] + res.D[1])) < 1e-12
    assert np.allclose(cs.weight_sums(), [1.0])


def test_singular_system_reported():
    K = sp.csr_matrix(np.zeros((3, 3)))
    with pytest.raises(SolverError):
        saddle_solve(K, sp.csr_matrix((0, 3)), np.ones(3), np.zeros(0), np.ones(3, bool))


def test_iteration_cap():
    # nonlinear scalar problem R = D^3 - 1 started far away with a cap of one step
    res = newton_solve(lambda D: (sp.csr_matrix([[3 * D[0] ** 2 + 1e-3]]), D ** 3 - 1),
                       np.array([10.0]), ConstraintSet(), np.zeros(1, bool), max_iter=1)
    assert not res.converged


def _random_constrained(rng, n=30, chained=True):
    A = rng.normal(size=(n, n))
    K = sp.csr_matrix(A @ A.T + n * np.eye(n))
    # dof 5 hangs on 6 and 7; dof 8 hangs on 5 (a hanging master) and 9
    rows = [(5, [(6, 0.5), (7, 0.5)]), (8, [(5 if chained else 4, 0.25), (9, 0.75)]),
            (12, [(13, 0.5), (14, 0.25), (0, 0.25)])]
    cs = ConstraintSet.from_rows(rows)
    fixed = np.zeros(n, bool)
    fixed[0] = True
    return K, cs, fixed


@pytest.mark.parametrize("chained", [False, True])
def test_condensed_matches_saddle(chained):
    rng = np.random.default_rng(5)
    K, cs, fixed = _random_constrained(rng, chained=chained)
    r_u, r_l = rng.normal(size=K.shape[0]), rng.normal(size=len(cs))
    ref = saddle_solve(K, cs.matrix(K.shape[0]), r_u, r_l, ~fixed)
    out = condensed_solve(K, cs, r_u, r_l, ~fixed)
    assert np.allclose(out[0], ref[0], rtol=0, atol=1e-11 * np.abs(ref[0]).max())
    assert np.allclose(out[1], ref[1], rtol=0, atol=1e-11 * np.abs(ref[1]).max())
    assert out[2] == ref[2]


def test_condensed_prescribed_hanging_falls_back():
    rng = np.random.default_rng(6)
    K, cs, fixed = _random_constrained(rng)
    fixed[5] = True
    r_u, r_l = rng.normal(size=K.shape[0]), rng.normal(size=len(cs))
    ref = saddle_solve(K, cs.matrix(K.shape[0]), r_u, r_l, ~fixed)
    out = condensed_solve(K, cs, r_u, r_l, ~fixed)
    assert np.allclose(out[0], ref[0]) and np.allclose(out[1], ref[1])


def test_newton_methods_agree():
    rng = np.random.default_rng(7)
    K, cs, fixed = _random_constrained(rng)
    f = rng.normal(size=K.shape[0])
    a = newton_solve(lambda D: (K, K @ D - f), np.zeros(K.shape[0]), cs, fixed, method="saddle")
    b = newton_solve(lambda D: (K, K @ D - f), np.zeros(K.shape[0]), cs, fixed)
    assert a.converged and b.converged
    assert np.allclose(a.D, b.D, atol=1e-12) and np.allclose(a.lam, b.lam, atol=1e-10)
    with pytest.raises(ValueError):
        newton_solve(lambda D: (K, K @ D - f), np.zeros(K.shape[0]), cs, fixed, method="lu")
