"""Mixed Q2/Q1 discretization on the reference annulus and monolithic assembly.

Unknown layout::

    [ velocity (2 per Q2 node, interleaved) | pressure (Q1 vertices) |
      body velocity l~ (2) | r | inner normal multipliers | outer normal
      multipliers | pressure-mean multiplier ]

Velocity unknowns are the pulled-back field ``v~ = F^-1 u o X``; the
physical velocity at the image of a reference point is ``F v~``. Since
``det F = 1`` the divergence and pressure terms keep their Cartesian form in
reference coordinates. ``l~ = Q^T l`` is the body velocity seen from the body.

Normal matching ``u . n = u_S . n`` is imposed node by node with consistent
nodal normals (the boundary integral of each shape function times the
normal), so the nodal constraints imply zero net flux exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import kernels
from .mesh import ReferenceMesh, q1_basis, q2_basis

_P = np.array([[0.0, -1.0], [1.0, 0.0]])


@dataclass(frozen=True)
class Layout:
    n_u: int
    n_p: int
    n_in: int
    n_out: int

    @property
    def p0(self):
        return self.n_u

    @property
    def body0(self):
        return self.n_u + self.n_p

    @property
    def mu_in0(self):
        return self.body0 + 3

    @property
    def mu_out0(self):
        return self.mu_in0 + self.n_in

    @property
    def kappa(self):
        return self.mu_out0 + self.n_out

    @property
    def size(self):
        return self.kappa + 1

    def split(self, x):
        """``(v, p, l~, r)`` views of a solution vector."""
        return (
            x[: self.n_u],
            x[self.p0 : self.body0],
            x[self.body0 : self.body0 + 2],
            float(x[self.body0 + 2]),
        )


class FixedPattern:
    """CSR sparsity of the cell-wise velocity block with a precomputed scatter map."""

    def __init__(self, cell_dofs: np.ndarray, n: int):
        nc, k = cell_dofs.shape
        rows = np.repeat(cell_dofs, k, axis=1).ravel()
        cols = np.tile(cell_dofs, (1, k)).ravel()
        key = rows.astype(np.int64) * n + cols
        uniq, inv = np.unique(key, return_inverse=True)
        self.n = n
        self.indices = (uniq % n).astype(np.int32)
        r = (uniq // n).astype(np.int64)
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(r, minlength=n))]).astype(np.int32)
        self.scatter = inv.ravel()
        self.nnz = len(uniq)

    def build(self, local: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self.scatter, weights=local.ravel(), minlength=self.nnz)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))


def consistent_normals(mesh: ReferenceMesh, tag: str):
    """Unit normals ``m_a / |m_a|`` and weights ``|m_a|`` with ``m_a = int N_a nu ds`` over one boundary."""
    e = mesh.edges(tag)
    nodes = mesh.inner_nodes if tag == "INNER" else mesh.outer_nodes
    pos = {int(g): k for k, g in enumerate(nodes)}
    m = np.zeros((len(nodes), 2))
    contrib = np.einsum("qa,eq,eqi->eai", e.basis, e.weights, e.normals)
    for ed in range(len(e.cells)):
        for a in range(3):
            m[pos[int(e.nodes[ed, a])]] += contrib[ed, a]
    w = np.linalg.norm(m, axis=1)
    return m / w[:, None], w


class Discretization:
    """Constant operators of the mixed discretization on a reference mesh."""

    def __init__(self, mesh: ReferenceMesh):
        self.mesh = mesh
        nv, npn = mesh.n_vnodes, mesh.n_pnodes
        self.layout = Layout(n_u=2 * nv, n_p=npn, n_in=len(mesh.inner_nodes), n_out=len(mesh.outer_nodes))
        cv = mesh.cells_v
        self.cell_dofs = np.stack([2 * cv, 2 * cv + 1], axis=-1).reshape(len(cv), 18)
        self.pattern = FixedPattern(self.cell_dofs, 2 * nv)
        self.n_in, self.w_in = consistent_normals(mesh, "INNER")
        self.n_out, self.w_out = consistent_normals(mesh, "OUTER")
        self.y_in = mesh.vnodes[mesh.inner_nodes]
        self._build_constant_blocks()

    # constant blocks ------------------------------------------------------------
    def _build_constant_blocks(self):
        mesh, L = self.mesh, self.layout
        w = mesh.qp_weights
        # B[i, 2a+c] = -int q_i d_c N_a
        vals = -np.einsum("cq,qi,cqak->ciak", w, mesh.Np, mesh.dN)
        rows = np.broadcast_to(mesh.cells_p[:, :, None, None], vals.shape)
        cols = np.broadcast_to(2 * mesh.cells_v[:, None, :, None] + np.arange(2), vals.shape)
        self.B = sp.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(L.n_p, L.n_u))
        mp = np.einsum("cq,qi,qj->cij", w, mesh.Np, mesh.Np)
        r = np.broadcast_to(mesh.cells_p[:, :, None], mp.shape)
        c = np.broadcast_to(mesh.cells_p[:, None, :], mp.shape)
        self.Mp = sp.csr_matrix((mp.ravel(), (r.ravel(), c.ravel())), shape=(L.n_p, L.n_p))
        self.p_mean = np.bincount(
            mesh.cells_p.ravel(), weights=np.einsum("cq,qi->ci", w, mesh.Np).ravel(), minlength=L.n_p
        )
        # nodal normal constraints, rows over [u | p | l r]
        ni, no = self.n_in, self.n_out
        gi, go = self.mesh.inner_nodes, self.mesh.outer_nodes
        k_in = np.arange(L.n_in)
        rows = np.concatenate([k_in, k_in, k_in, k_in, k_in])
        cols = np.concatenate([2 * gi, 2 * gi + 1, np.full(L.n_in, L.body0), np.full(L.n_in, L.body0 + 1),
                               np.full(L.n_in, L.body0 + 2)])
        yperp = self.y_in @ _P.T
        vals = np.concatenate([ni[:, 0], ni[:, 1], -ni[:, 0], -ni[:, 1], -(ni * yperp).sum(1)])
        self.C_in = sp.csr_matrix((vals, (rows, cols)), shape=(L.n_in, L.body0 + 3))
        k_out = np.arange(L.n_out)
        self.C_out = sp.csr_matrix(
            (np.concatenate([no[:, 0], no[:, 1]]), (np.concatenate([k_out, k_out]), np.concatenate([2 * go, 2 * go + 1]))),
            shape=(L.n_out, L.body0 + 3),
        )
        self.slip_out_unit = self._slip_matrix("OUTER")
        self.slip_in_unit = self._slip_matrix("INNER")

    def _slip_matrix(self, tag):
        """``int_edge (v~ - v~_S).(phi~ - phi~_S) ds`` on the [u | l~ r] unknowns (v~_S = 0 on OUTER)."""
        mesh, L = self.mesh, self.layout
        e = mesh.edges(tag)
        ne, nq = e.weights.shape
        n_body = 3 if tag == "INNER" else 0
        k = 6 + n_body
        T = np.zeros((ne, nq, 2, k))
        for a in range(3):
            for comp in range(2):
                T[:, :, comp, 2 * a + comp] = e.basis[None, :, a]
        dofs = np.empty((ne, k), dtype=np.int64)
        dofs[:, 0:6:2] = 2 * e.nodes
        dofs[:, 1:6:2] = 2 * e.nodes + 1
        if n_body:
            T[:, :, 0, 6] = -1.0
            T[:, :, 1, 7] = -1.0
            T[:, :, :, 8] = -(e.points @ _P.T)
            dofs[:, 6:] = L.body0 + np.arange(3)
        loc = np.einsum("eq,eqia,eqib->eab", e.weights, T, T)
        rows = np.broadcast_to(dofs[:, :, None], loc.shape)
        cols = np.broadcast_to(dofs[:, None, :], loc.shape)
        n = L.body0 + 3
        return sp.csr_matrix((loc.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n))

    # fields -------------------------------------------------------------------
    def velocity_at_qp(self, v):
        """``v~`` (nc, nq, 2) and ``grad v~`` (nc, nq, 2, 2) at the cell quadrature points."""
        vn = v.reshape(-1, 2)[self.mesh.cells_v]
        return np.einsum("qa,cai->cqi", self.mesh.N, vn), np.einsum("cqaj,cai->cqij", self.mesh.dN, vn)

    def pressure_at_qp(self, p):
        return np.einsum("qi,ci->cq", self.mesh.Np, p[self.mesh.cells_p])

    def rigid_dofs(self, l_body, r):
        """Nodal values of ``l~ + r y^perp``."""
        y = self.mesh.vnodes
        return (np.asarray(l_body, float) + r * (y @ _P.T)).ravel()

    def interpolate(self, fn):
        """Nodal interpolant of a vector function of reference position."""
        return np.asarray(fn(self.mesh.vnodes), dtype=float).ravel()

    def interpolate_pressure(self, fn):
        return np.asarray(fn(self.mesh.nodes), dtype=float)

    # variable blocks ------------------------------------------------------------
    def velocity_block(self, F=None, H=None, adv=None, mass_coef=0.0, visc_coef=1.0):
        """Cell-assembled velocity operator.

        ``mass_coef * int F v~ . F phi~ + visc_coef * 2 int D(u):D(phi)``
        plus the skew convection ``1/2 int (L(v) a).F phi~ - (L(phi) a).F v~``
        for a physical advecting velocity ``a`` at the quadrature points.
        ``F`` and ``H`` are the flow gradient and Hessian at the
        quadrature points, (nc, nq, 2, 2) and (nc, nq, 2, 2, 2); ``None``
        means the identity map.
        """
        mesh = self.mesh
        nc, nq = mesh.qp_weights.shape
        if F is None:
            F = np.broadcast_to(np.eye(2), (nc, nq, 2, 2))
        if H is None:
            H = np.zeros((nc, nq, 2, 2, 2))
        local = kernels.velocity_element_matrices(
            np.ascontiguousarray(mesh.N), np.ascontiguousarray(mesh.dN), np.ascontiguousarray(mesh.qp_weights),
            np.ascontiguousarray(F, dtype=float), np.ascontiguousarray(H, dtype=float),
            None if adv is None else np.ascontiguousarray(adv, dtype=float),
            float(mass_coef), float(visc_coef),
        )
        return self.pattern.build(local)

    def assemble(self, A_u, alpha, body_mass=(0.0, 0.0, 0.0)):
        """Full saddle-point matrix from a velocity block.

        ``body_mass`` is added on the diagonal of the ``(l~, r)`` rows.
        """
        L = self.layout
        nb = L.body0 + 3
        top = sp.block_diag([A_u, sp.csr_matrix((L.n_p, L.n_p)), sp.diags(np.asarray(body_mass, float))], format="csr")
        top = top + 2.0 * alpha * (self.slip_in_unit + self.slip_out_unit)
        Bu = sp.bmat([[sp.csr_matrix((L.n_u, L.n_u)), self.B.T, None],
                      [self.B, sp.csr_matrix((L.n_p, L.n_p)), None],
                      [None, None, sp.csr_matrix((3, 3))]], format="csr")
        top = (top + Bu).tocsr()
        Cm = sp.vstack([self.C_in, self.C_out], format="csr")
        km = sp.csr_matrix(np.concatenate([np.zeros(L.n_u), self.p_mean, np.zeros(3)])[None, :])
        Cfull = sp.vstack([Cm, km], format="csr")
        K = sp.bmat([[top, Cfull.T], [Cfull, None]], format="csc")
        return K


class SystemTemplate:
    """Monolithic matrix with fixed CSC structure; only the velocity block changes between builds."""

    def __init__(self, disc: Discretization, alpha: float, body_mass):
        self.disc = disc
        n_u = disc.layout.n_u
        pat = disc.pattern
        const = disc.assemble(sp.csr_matrix((n_u, n_u)), alpha, body_mass).tocoo()
        prow = np.repeat(np.arange(n_u), np.diff(pat.indptr))
        pcol = pat.indices.astype(np.int64)
        n = const.shape[0]
        rows = np.concatenate([const.row, prow])
        cols = np.concatenate([const.col, pcol])
        key = cols.astype(np.int64) * n + rows
        uniq, inv = np.unique(key, return_inverse=True)
        self.n = n
        self.indices = (uniq % n).astype(np.int32)
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(uniq // n, minlength=n))]).astype(np.int32)
        self.pos_const = inv[: len(const.row)]
        self.pos_vel = inv[len(const.row) :]
        self.const_data = np.bincount(self.pos_const, weights=const.data, minlength=len(uniq))
        # CSR data of the velocity block, in pattern order, lands at pos_vel
        self.nnz = len(uniq)

    def build(self, A_u: sp.csr_matrix) -> sp.csc_matrix:
        data = self.const_data.copy()
        data[self.pos_vel] += A_u.data
        return sp.csc_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))


class Factorization:
    """Sparse LU preferring diagonal pivots, with a partial-pivoting fallback when the residual is poor."""

    def __init__(self, K, rtol: float = 1e-9):
        import scipy.sparse.linalg as spla

        self.K = K.tocsc()
        self.lu = spla.splu(self.K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0)
        probe = np.linspace(1.0, 2.0, self.K.shape[0])
        x = self.lu.solve(probe)
        if not np.all(np.isfinite(x)) or np.linalg.norm(self.K @ x - probe) > rtol * np.linalg.norm(probe):
            self.lu = spla.splu(self.K)

    def solve(self, rhs):
        return self.lu.solve(rhs)


def sparse_solve(K, rhs):
    return Factorization(K).solve(rhs)


def assemble_monolithic(disc: Discretization, F, H, adv, alpha: float, m: float, J: float, dt: float):
    """Backward-Euler system matrix ``(1/dt) mass + viscous + convection + slip`` with body inertia."""
    A = disc.velocity_block(F, H, adv, mass_coef=1.0 / dt)
    return disc.assemble(A, alpha, body_mass=(m / dt, m / dt, J / dt))


def evaluate_field(mesh: ReferenceMesh, dofs, points, space: str = "velocity"):
    """Shape-function interpolation of a velocity (``(n, 2)``) or pressure (``(n,)``) field."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    cells, ref = mesh.locate(points)
    dofs = np.asarray(dofs, dtype=float)
    if space == "velocity":
        N, _, _ = q2_basis(ref[:, 0], ref[:, 1])
        vals = dofs.reshape(-1, 2)[mesh.cells_v[cells]]
        return np.einsum("na,nai->ni", N, vals)
    N, _ = q1_basis(ref[:, 0], ref[:, 1])
    return np.einsum("na,na->n", N, dofs[mesh.cells_p[cells]])


def divergence_residual(disc: Discretization, v) -> float:
    """Norm of the divergence residual ``B v`` in the dual of the pressure space."""
    import scipy.sparse.linalg as spla

    r = disc.B @ np.asarray(v, dtype=float)
    z = spla.spsolve(disc.Mp.tocsc(), r)
    return float(np.sqrt(max(r @ z, 0.0)))
