import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxfrac.decomposition import Subcell, SubcellLayout, octree_decompose
from voxfrac.fem import ConstraintSet, newton_solve
from voxfrac.material import CATALOG, MaterialParams
from voxfrac.mesh import FCMMesh, remove_constraints_for_eroded
from voxfrac.voxel import CellGrid

H = (1e-3, 1e-3, 1e-3)
ELASTIC = MaterialParams("el", 150.0, 80.0, 1e12, 1e12, G_c=0.1, rho0=7000.0, brittle=True)
ELASTIC_TWIN = MaterialParams("el2", 150.0, 80.0, 1e12, 1e12, G_c=0.5, rho0=7000.0, brittle=True)


def whole(n=2, phase=0):
    return [Subcell((0, 0, 0), (n, n, n), phase)]


def eight(n=2, phases=None):
    subs = octree_decompose(np.zeros((n, n, n), dtype=np.uint8), 1, min_level=1)
    if phases is not None:
        subs = [Subcell(s.lo, s.hi, p) for s, p in zip(subs, phases)]
    return subs


def single_cell_mesh(subs, n=2, materials=None, order=1):
    lay = SubcellLayout(CellGrid((1, 1, 1), (n, n, n)), [subs], "x")
    return FCMMesh(lay, H, materials or {0: ELASTIC, 1: ELASTIC_TWIN}, cell_order=order)


def block_mesh(center_subs, cells=3, n=2, mat=None, order=1, switch_order=1):
    cg = CellGrid((cells,) * 3, (n, n, n))
    mid = cg.cell_index((cells // 2,) * 3)
    layout = [center_subs if c == mid else whole(n) for c in range(cg.n_cells)]
    return FCMMesh(SubcellLayout(cg, layout, "x"), H, {0: mat or ELASTIC}, cell_order=order,
                   switch_order=switch_order), mid


# --- FCM summation ------------------------------------------------------------------------

@pytest.mark.parametrize("order", [1, 2])
def test_one_vs_eight_subcells(order):
    K1 = single_cell_mesh(whole(), order=order).assemble(np.zeros(3 * (order + 1) ** 3), 1.0).K.toarray()
    K8 = single_cell_mesh(eight(), order=order).assemble(np.zeros(3 * (order + 1) ** 3), 1.0).K.toarray()
    assert np.abs(K1 - K8).max() <= 1e-12 * np.abs(K1).max()


def test_equal_moduli_two_phases():
    K1 = single_cell_mesh(whole()).assemble(np.zeros(24), 1.0).K.toarray()
    Kp = single_cell_mesh(eight(phases=[0, 1] * 4)).assemble(np.zeros(24), 1.0).K.toarray()
    assert np.abs(K1 - Kp).max() <= 1e-12 * np.abs(K1).max()


def test_zero_displacement_zero_force():
    m = single_cell_mesh(eight(), materials={0: CATALOG["nickel"]})
    assert np.all(m.assemble(np.zeros(24), 1.0).f_int == 0)


def test_missing_material():
    with pytest.raises(KeyError):
        single_cell_mesh(whole(phase=3))


# --- switching ------------------------------------------------------------------------------

def test_switch_single_subcell_no_constraints():
    m, mid = block_mesh(whole())
    n0, neq0 = m.n_nodes, m.equation_count()
    r = m.switch_cell(mid)
    assert len(r.elements) == 1 and len(r.new_nodes) == 0
    assert len(m.constraints) == 0
    assert (m.n_nodes, m.equation_count()) == (n0, neq0)


def test_switch_interior_cell_counts():
    m, mid = block_mesh(eight())
    neq0 = m.equation_count()
    D = np.random.default_rng(0).normal(0, 1e-5, 3 * m.n_nodes)
    m.D = D.copy()
    r = m.switch_cell(mid)
    # 6 face centres + 12 edge midpoints + 1 centre; all but the centre hang
    assert len(r.new_nodes) == 19
    assert len(m.hanging_nodes) == 18
    assert len(m.constraints) == 54
    assert m.equation_count() == neq0 + 3 * 19 + 54
    assert np.allclose(m.constraints.weight_sums(), 1.0)
    assert np.abs(m.constraints.matrix(len(m.D)) @ m.D).max() < 1e-12 * np.abs(D).max()


def test_switch_twice_rejected():
    m, mid = block_mesh(eight())
    m.switch_cell(mid)
    with pytest.raises(ValueError, match="already switched"):
        m.switch_cell(mid)


def test_gauss_points_coincide_after_switch():
    m, mid = block_mesh(eight(), mat=CATALOG["nickel"])
    D = np.random.default_rng(1).normal(0, 1e-4, 3 * m.n_nodes)
    m.assemble(D, 1.0)
    e_before = m.subcell_energy().copy()
    m.D = D
    m.switch_cell(mid)
    m.assemble(m.D, 1.0)
    assert np.allclose(m.subcell_energy(), e_before, rtol=1e-10, atol=1e-30)


def test_residual_conserved_by_switching():
    m, mid = block_mesh(eight(), mat=CATALOG["nickel"])
    rng = np.random.default_rng(2)
    D = rng.normal(0, 2e-5, 3 * m.n_nodes)
    f_old = m.assemble(D, 1.0).f_int.copy()
    n_old = m.n_nodes
    uid = int(m.cell_unit[mid])
    m.D = D
    r = m.switch_cell(mid)
    f_new = m.assemble(m.D, 1.0).f_int
    # condense the new nodes onto the old ones with the old cell's shape functions
    N, _ = m.unit_shape_at(uid, 0.5 * m.node_q[r.new_nodes])
    old_nodes = m.units[uid].nodes
    cond = f_new[:3 * n_old].reshape(-1, 3).copy()
    cond[old_nodes] += N.T @ f_new.reshape(-1, 3)[r.new_nodes]
    assert np.abs(cond.ravel() - f_old).max() <= 1e-10 * np.abs(f_old).max()


@pytest.mark.parametrize("order,switch_order", [(1, 1), (2, 1), (2, 2)])
def test_patch_test_hanging_nodes(order, switch_order):
    m, mid = block_mesh(eight(), order=order, switch_order=switch_order)
    m.switch_cell(mid)
    G = np.array([[1e-4, 2e-5, 0], [0, -3e-5, 1e-5], [2e-5, 0, 5e-5]])
    q = m.node_q
    bnd = np.zeros(m.n_nodes, bool)
    for ax in range(3):
        bnd |= (q[:, ax] == 0) | (q[:, ax] == q[:, ax].max())
    fixed = np.repeat(bnd, 3)
    D0 = (m.X @ G.T).ravel() * fixed
    cs = m.constraints.select(~fixed[m.constraints.hanging])
    res = newton_solve(lambda D: m.dynamic_system(D, 1.0, inertia=False), D0, cs, fixed, tol=1e-12, atol=0.0)
    assert res.converged
    tau = m.state_trial.tau
    assert np.abs(tau - tau[0]).max() <= 1e-10 * np.abs(tau[0]).max()
    assert np.abs(cs.matrix(len(D0)) @ res.D).max() < 1e-12
    assert np.all(np.isfinite(res.lam))


# --- erosion and constraints ---------------------------------------------------------------

def two_cell_mesh():
    """Cell 0 split in 8 voxels, cell 1 whole; both switched."""
    lay = SubcellLayout(CellGrid((2, 1, 1), (2, 2, 2)), [eight(), whole()], "x")
    m = FCMMesh(lay, H, {0: ELASTIC})
    m.switch_cell(0)
    m.switch_cell(1)
    return m


def test_remove_constraints_topology():
    m = two_cell_mesh()
    # shared face x = 2: centre and four edge midpoints hang on the whole element
    assert len(m.hanging_nodes) == 5
    cs = m.constraints
    eid = int(m.sc_unit[8])
    out = remove_constraints_for_eroded(cs, m.unit_dofs(eid))
    assert len(cs) - len(out) == 15
    m.erode_subcell(8)
    assert len(m.constraints) == 0


def test_remove_constraints_no_masters():
    m = two_cell_mesh()
    cs = m.constraints
    eid = int(m.sc_unit[0])   # a voxel element of the split cell is master to nothing
    out = remove_constraints_for_eroded(cs, m.unit_dofs(eid))
    assert out.rows() == cs.rows()


def test_remove_constraints_empty():
    out = remove_constraints_for_eroded(ConstraintSet(), np.arange(24))
    assert len(out) == 0


def test_erode_switches_cell():
    m, mid = block_mesh(eight())
    s = int(np.flatnonzero(m.sc_cell == mid)[0])
    eid, switched = m.erode_subcell(s)
    assert switched and m.units[eid].eroded and m.is_eroded(s)
    with pytest.raises(ValueError):
        m.erode_subcell(s)


# --- mass ------------------------------------------------------------------------------------

@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=5, deadline=None)
def test_mass_conserved(seed):
    rng = np.random.default_rng(seed)
    cg = CellGrid((3, 3, 3), (2, 2, 2))
    cells = [eight(phases=rng.integers(0, 2, 8)) if rng.random() < 0.5 else whole(phase=int(rng.integers(2)))
             for _ in range(cg.n_cells)]
    m = FCMMesh(SubcellLayout(cg, cells, "x"), H, {0: ELASTIC, 1: CATALOG["tungsten_carbide"]})
    ref = m.total_mass()
    exact = sum(m.materials[int(p)].rho * np.prod((b - a) * np.array(H))
                for a, b, p in zip(m.sc_lo, m.sc_hi, m.sc_phase))
    assert np.allclose(ref, exact, rtol=1e-12)
    for c in rng.permutation(cg.n_cells)[:5]:
        m.switch_cell(int(c))
    assert np.allclose(m.total_mass(), ref, rtol=1e-12, atol=0)
    n_sc = len(m.sc_lo)
    for s in rng.permutation(n_sc)[:n_sc // 5]:
        m.erode_subcell(int(s))
    assert np.allclose(m.total_mass(), ref, rtol=1e-12, atol=0)


def test_dof_accounting_matches_matrix():
    m, mid = block_mesh(eight())
    m.set_dirichlet([(0, 0, 0, 0.0), (0, 1, 0, 1e-4)])
    m.switch_cell(mid)
    K, _ = m.dynamic_system(m.apply_dirichlet(m.D), 1.0)
    free = ~m.fixed_mask()
    assert m.equation_count() == int(free.sum()) + len(m.constraints)
    assert K.shape[0] == 3 * m.n_nodes


def test_vtk_output(tmp_path):
    m, mid = block_mesh(eight())
    m.switch_cell(mid)
    p = tmp_path / "m.vtk"
    m.write_vtk(p)
    text = p.read_text()
    n = len(m.snapshot_boxes())
    assert f"CELLS {n} {9 * n}" in text and "SCALARS eroded int 1" in text
