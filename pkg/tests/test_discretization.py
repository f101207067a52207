import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse.linalg as spla
from hypothesis import given
from hypothesis import strategies as st

from rigidflow.assembly import Discretization, consistent_normals, divergence_residual, evaluate_field
from rigidflow.mesh import build_annular_mesh
from rigidflow.solver import project_initial

P = np.array([[0.0, -1.0], [1.0, 0.0]])


def test_counts():
    m = build_annular_mesh(1.0, 0.2, 8, 32)
    assert m.n_pnodes == 9 * 32 and m.n_cells == 8 * 32
    assert m.n_vnodes == 17 * 64


@pytest.mark.parametrize("args", [(1.0, 0.0, 4, 16), (1.0, 1.2, 4, 16), (1.0, 0.2, 3, 16), (1.0, 0.2, 4, 3)])
def test_invalid_mesh_arguments(args):
    with pytest.raises(ValueError):
        build_annular_mesh(*args)


def test_body_too_close_rejected():
    with pytest.raises(ValueError):
        build_annular_mesh(1.0, 0.2, 4, 16, body_offset=(0.5, 0.0), delta_safe=0.2)


def test_area_converges_to_annulus():
    exact = np.pi * (1.0 - 0.04)
    errs = []
    for nr, nt in ((4, 16), (8, 32), (16, 64)):
        m = build_annular_mesh(1.0, 0.2, nr, nt)
        assert np.all(m.cell_areas > 0)
        errs.append(abs(m.area - exact))
    # isoparametric arcs: the 1e-6 level is reached at 16x64
    assert errs[-1] <= 1e-6
    assert errs[0] > errs[1] > errs[2]


def test_offset_mesh_area():
    m = build_annular_mesh(1.0, 0.2, 16, 64, body_offset=(0.1, -0.05))
    assert m.area == pytest.approx(np.pi * 0.96, abs=1e-6)


def test_boundary_nodes_on_circles():
    m = build_annular_mesh(1.0, 0.2, 4, 16, body_offset=(0.1, 0.05))
    assert np.max(np.abs(np.linalg.norm(m.vnodes[m.inner_nodes], axis=1) - 0.2)) <= 1e-12
    assert np.max(np.abs(np.linalg.norm(m.vnodes[m.outer_nodes] - m.center, axis=1) - 1.0)) <= 1e-12


@pytest.mark.parametrize("tag", ["INNER", "OUTER"])
def test_edge_frames(mesh4, tag):
    e = mesh4.edges(tag)
    assert np.allclose(np.linalg.norm(e.normals, axis=-1), 1.0, atol=1e-14)
    assert np.allclose(np.linalg.norm(e.tangents, axis=-1), 1.0, atol=1e-14)
    assert np.max(np.abs((e.normals * e.tangents).sum(-1))) <= 1e-14
    # closed curve
    assert np.max(np.abs(np.einsum("eq,eqi->i", e.weights, e.normals))) <= 1e-12
    # normals point out of the fluid: away from the origin on OUTER, toward it on INNER
    sign = (e.normals * e.points).sum(-1)
    assert np.all(sign > 0) if tag == "OUTER" else np.all(sign < 0)


def test_identity_map_gives_cartesian_viscous_form(disc4, mesh4):
    A = disc4.velocity_block().toarray()
    # oracle: 2 int D(N_a e_c) : D(N_b e_d) from the shape gradients
    nd = disc4.layout.n_u
    ref = np.zeros((nd, nd))
    w, dN = mesh4.qp_weights, mesh4.dN
    for c, cell in enumerate(mesh4.cells_v):
        G = np.zeros((9, 18, 2, 2))
        for a in range(9):
            for comp in range(2):
                G[:, 2 * a + comp, comp, :] = dN[c, :, a, :]
        D = 0.5 * (G + np.swapaxes(G, -1, -2))
        loc = 2 * np.einsum("q,qaij,qbij->ab", w[c], D, D)
        dofs = np.stack([2 * cell, 2 * cell + 1], -1).ravel()
        ref[np.ix_(dofs, dofs)] += loc
    assert np.max(np.abs(A - ref)) <= 1e-12 * np.max(np.abs(ref))


def test_rigid_field_has_no_viscous_energy(disc4):
    v = disc4.rigid_dofs((0.0, 0.0), 1.7)
    A = disc4.velocity_block()
    assert abs(v @ (A @ v)) <= 1e-12


def test_constant_pressure_pairs_with_boundary_flux(disc4, mesh4):
    bt = disc4.B.T @ np.ones(disc4.layout.n_p)
    bnd = np.concatenate([mesh4.inner_nodes, mesh4.outer_nodes])
    interior = np.setdiff1d(np.arange(mesh4.n_vnodes), bnd)
    assert np.max(np.abs(bt.reshape(-1, 2)[interior])) <= 1e-12
    for tag, nodes in (("INNER", mesh4.inner_nodes), ("OUTER", mesh4.outer_nodes)):
        n, wgt = consistent_normals(mesh4, tag)
        assert np.allclose(bt.reshape(-1, 2)[nodes], -n * wgt[:, None], atol=1e-13)


def test_velocity_block_symmetric_with_slip(disc4):
    L = disc4.layout
    K = disc4.assemble(disc4.velocity_block(), alpha=0.7)
    top = K[: L.body0 + 3, : L.body0 + 3]
    assert abs(top - top.T).max() <= 1e-12 * abs(top).max()


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-3, 3), st.floats(0, 2))
def test_coupled_rigid_motion_energies(l1, l2, r, alpha):
    mesh = build_annular_mesh(1.0, 0.2, 4, 16)
    disc = _disc_cache(mesh)
    L = disc.layout
    x = np.zeros(L.body0 + 3)
    x[: L.n_u] = disc.rigid_dofs((l1, l2), r)
    x[L.body0 : L.body0 + 3] = (l1, l2, r)
    A = disc.velocity_block()
    assert abs(x[: L.n_u] @ (A @ x[: L.n_u])) <= 1e-11 * (1 + l1 * l1 + l2 * l2 + r * r)
    assert abs(x @ (disc.slip_in_unit @ x)) <= 1e-12 * (1 + l1 * l1 + l2 * l2 + r * r)
    e = mesh.outer
    us = np.array([l1, l2]) + r * (e.points @ P.T)
    oracle = 2 * alpha * float((e.weights * (us * us).sum(-1)).sum())
    assert 2 * alpha * (x @ (disc.slip_out_unit @ x)) == pytest.approx(oracle, rel=1e-10, abs=1e-12)


_CACHE = {}


def _disc_cache(mesh):
    key = (mesh.nr, mesh.ntheta)
    if key not in _CACHE:
        _CACHE[key] = Discretization(mesh)
    return _CACHE[key]


def test_evaluate_field_indicator_and_linears(mesh4):
    v = np.zeros((mesh4.n_vnodes, 2))
    k = 2 * 32 + 5
    v[k, 0] = 1.0
    assert evaluate_field(mesh4, v.ravel(), mesh4.vnodes[k])[0, 0] == pytest.approx(1.0, abs=1e-12)
    rng = np.random.default_rng(4)
    ang = rng.uniform(0, 2 * np.pi, 50)
    rad = rng.uniform(0.25, 0.95, 50)
    pts = rad[:, None] * np.stack([np.cos(ang), np.sin(ang)], -1)
    lin = np.column_stack([mesh4.vnodes[:, 0], 2 * mesh4.vnodes[:, 1] - 0.3])
    out = evaluate_field(mesh4, lin.ravel(), pts)
    assert np.max(np.abs(out - np.column_stack([pts[:, 0], 2 * pts[:, 1] - 0.3]))) <= 1e-12
    # Q1 pressure lives on the curved cells: it reproduces constants and its nodal values
    p = evaluate_field(mesh4, np.full(mesh4.n_pnodes, 2.5), pts, space="pressure")
    assert np.max(np.abs(p - 2.5)) <= 1e-12
    q = rng.standard_normal(mesh4.n_pnodes)
    assert np.allclose(evaluate_field(mesh4, q, mesh4.nodes[::7], space="pressure"), q[::7], atol=1e-12)


def test_evaluate_field_outside_mesh(mesh4):
    with pytest.raises(ValueError):
        evaluate_field(mesh4, np.zeros(2 * mesh4.n_vnodes), [[0.05, 0.0]])
    with pytest.raises(ValueError):
        evaluate_field(mesh4, np.zeros(2 * mesh4.n_vnodes), [[1.2, 0.0]])


def test_interpolation_error_is_third_order():
    f = lambda x: np.stack([np.sin(2 * x[..., 0]) * np.cos(x[..., 1]), np.exp(0.5 * x[..., 1])], -1)
    errs, hs = [], []
    for nr, nt in ((4, 16), (8, 32), (16, 64)):
        m = build_annular_mesh(1.0, 0.2, nr, nt)
        d = Discretization(m)
        vq, _ = d.velocity_at_qp(d.interpolate(f))
        errs.append(np.sqrt((m.qp_weights * ((vq - f(m.qp_points)) ** 2).sum(-1)).sum()))
        hs.append(m.h())
    orders = np.log(np.array(errs[:-1]) / errs[1:]) / np.log(np.array(hs[:-1]) / hs[1:])
    assert np.all(orders >= 2.8)


def test_divergence_residual(disc4, mesh4):
    assert divergence_residual(disc4, np.zeros(disc4.layout.n_u)) == 0.0
    v = np.column_stack([mesh4.vnodes[:, 0], np.zeros(mesh4.n_vnodes)]).ravel()
    # B v = -int q_i, so the dual norm is |1|_L2 = sqrt(area)
    assert divergence_residual(disc4, v) == pytest.approx(np.sqrt(mesh4.area), rel=1e-12)
    # curl of psi = sin(x) cos(2y), interpolated then projected
    curl = disc4.interpolate(lambda x: np.stack([2 * np.sin(x[..., 0]) * np.sin(2 * x[..., 1]),
                                                 np.cos(x[..., 0]) * np.cos(2 * x[..., 1])], -1))
    assert divergence_residual(disc4, curl) > 1e-6
    vp, _ = project_initial(disc4, curl, (0.0, 0.0), 0.0)
    assert divergence_residual(disc4, vp) <= 1e-10


def test_inf_sup_proxy_uniform():
    sig = []
    for nr, nt in ((4, 16), (8, 32), (16, 64)):
        d = Discretization(build_annular_mesh(1.0, 0.2, nr, nt))
        lu = spla.splu(d.velocity_block(mass_coef=1.0, visc_coef=1.0).tocsc())
        S = d.B @ lu.solve(d.B.T.toarray())
        lam = sla.eigh(0.5 * (S + S.T), d.Mp.toarray(), eigvals_only=True, subset_by_index=[0, 0])
        sig.append(np.sqrt(lam[0]))
    ratios = np.array(sig[:-1]) / sig[1:]
    assert np.all((ratios >= 0.8) & (ratios <= 1.25))
    assert min(sig) > 0.1
