"""Steady Stokes problems with Navier slip, Kirchhoff potentials, lifting and added mass.

All solves use the fixed reference annulus with the identity map. On both
circles the normal velocity is prescribed node by node and the tangential
stress satisfies ``(D(v) n).tau = -alpha (v - v_S).tau + h.tau``, which in
weak form reads

    2 int D(v):D(phi) + 2 alpha sum_edges int ((v - v_S).tau)(phi.tau) - int p div phi
        = int f.phi + 2 sum_edges int (h.tau)(phi.tau)

for test fields with vanishing nodal normal components.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import Discretization
from .kinematics import MaterialParams

_P = np.array([[0.0, -1.0], [1.0, 0.0]])


class SolverError(RuntimeError):
    pass


class IncompatibleDataError(ValueError):
    pass


# boundary helpers ---------------------------------------------------------------

def _edge_dofs(e):
    dofs = np.empty((len(e.cells), 6), dtype=np.int64)
    dofs[:, 0::2] = 2 * e.nodes
    dofs[:, 1::2] = 2 * e.nodes + 1
    return dofs


def tangential_matrix(disc: Discretization, tag: str) -> sp.csr_matrix:
    """``sum_edges int (v.tau)(phi.tau) ds`` on velocity dofs."""
    e = disc.mesh.edges(tag)
    T = np.einsum("qa,eqc->eqac", e.basis, e.tangents).reshape(len(e.cells), -1, 6)
    loc = np.einsum("eq,eqa,eqb->eab", e.weights, T, T)
    d = _edge_dofs(e)
    n = disc.layout.n_u
    return sp.csr_matrix(
        (loc.ravel(), (np.broadcast_to(d[:, :, None], loc.shape).ravel(), np.broadcast_to(d[:, None, :], loc.shape).ravel())),
        shape=(n, n),
    )


def edge_load(disc: Discretization, tag: str, vec):
    """``sum_edges int g.phi ds`` for a vector field ``g`` given at the edge quadrature points."""
    e = disc.mesh.edges(tag)
    loc = np.einsum("eq,qa,eqc->eac", e.weights, e.basis, vec).reshape(len(e.cells), 6)
    return np.bincount(_edge_dofs(e).ravel(), weights=loc.ravel(), minlength=disc.layout.n_u)


def cell_load(disc: Discretization, f):
    """``int f.phi`` for ``f`` at the cell quadrature points (nc, nq, 2)."""
    m = disc.mesh
    loc = np.einsum("cq,qa,cqi->cai", m.qp_weights, m.N, f).reshape(m.n_cells, 18)
    return np.bincount(disc.cell_dofs.ravel(), weights=loc.ravel(), minlength=disc.layout.n_u)


# steady Stokes-Robin ----------------------------------------------------------------

@dataclass
class SteadyResult:
    velocity: np.ndarray
    pressure: np.ndarray
    multipliers: np.ndarray
    matrix: sp.spmatrix
    rhs: np.ndarray
    normal_data: np.ndarray


class SteadyStokesRobin:
    """Factorized steady Stokes operator with Robin slip on both circles."""

    def __init__(self, disc: Discretization, alpha: float):
        if alpha < 0:
            raise ValueError("alpha must be nonnegative")
        self.disc = disc
        self.alpha = float(alpha)
        L = disc.layout
        A = disc.velocity_block()
        self.tan_in = tangential_matrix(disc, "INNER")
        self.tan_out = tangential_matrix(disc, "OUTER")
        self.A = (A + 2.0 * alpha * (self.tan_in + self.tan_out)).tocsr()
        C = sp.vstack([disc.C_in[:, : L.n_u], disc.C_out[:, : L.n_u]], format="csr")
        self.C = C
        nc = C.shape[0]
        pm = sp.csr_matrix(disc.p_mean[None, :])
        self.K = sp.bmat(
            [
                [self.A, disc.B.T, C.T, None],
                [disc.B, None, None, pm.T],
                [C, None, None, None],
                [None, pm, None, None],
            ],
            format="csc",
        )
        self.n_c = nc
        try:
            self.lu = spla.splu(self.K)
        except RuntimeError as exc:  # singular factorization
            raise SolverError(f"singular steady system: {exc}") from exc

    def normal_rows(self, g_in, g_out):
        """Check net flux of nodal normal data and remove its round-off part."""
        d = self.disc
        flux = d.w_in @ g_in + d.w_out @ g_out
        scale = d.w_in @ np.abs(g_in) + d.w_out @ np.abs(g_out)
        # absolute floor: data that is pure round-off has no meaningful relative flux
        if abs(flux) > 1e-6 * scale + 1e-13 * (d.w_in.sum() + d.w_out.sum()):
            raise IncompatibleDataError(f"normal data has net flux {flux:.3e}")
        # remove the residual flux proportionally to the weights
        wsum = d.w_in @ d.w_in + d.w_out @ d.w_out
        return g_in - flux * d.w_in / wsum, g_out - flux * d.w_out / wsum

    def solve(self, load, g_in, g_out) -> SteadyResult:
        """Solve with velocity load vector and nodal normal data on both circles."""
        d, L = self.disc, self.disc.layout
        g_in, g_out = self.normal_rows(np.asarray(g_in, float), np.asarray(g_out, float))
        rhs = np.concatenate([load, np.zeros(L.n_p), g_in, g_out, [0.0]])
        x = self.lu.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise SolverError("non-finite steady solution")
        v = x[: L.n_u]
        p = x[L.n_u : L.n_u + L.n_p]
        mu = x[L.n_u + L.n_p : L.n_u + L.n_p + self.n_c]
        return SteadyResult(v, p, mu, self.K, rhs, np.concatenate([g_in, g_out]))


def solve_steady_robin(disc: Discretization, alpha: float, force=None, normal_in=None, normal_out=None,
                       slip_in=None, slip_out=None, body_velocity=None, solver: SteadyStokesRobin | None = None):
    """Steady Stokes with Navier slip data.

    ``force(x)`` is the body force; ``normal_in/out(x)`` the prescribed
    ``v.n``; ``slip_in/out(x)`` the vector ``h`` of the tangential stress
    data; ``body_velocity(x)`` the field ``v_S`` entering the INNER friction
    term. Omitted data are zero.
    """
    solver = solver or SteadyStokesRobin(disc, alpha)
    mesh = disc.mesh
    load = np.zeros(disc.layout.n_u)
    if force is not None:
        load += cell_load(disc, force(mesh.qp_points))
    for tag, h in (("INNER", slip_in), ("OUTER", slip_out)):
        if h is not None:
            e = mesh.edges(tag)
            ht = (h(e.points) * e.tangents).sum(-1)
            load += 2.0 * edge_load(disc, tag, ht[..., None] * e.tangents)
    if body_velocity is not None and alpha > 0:
        e = mesh.inner
        st = (body_velocity(e.points) * e.tangents).sum(-1)
        load += 2.0 * alpha * edge_load(disc, "INNER", st[..., None] * e.tangents)
    y_in = mesh.vnodes[mesh.inner_nodes]
    y_out = mesh.vnodes[mesh.outer_nodes]
    g_in = (normal_in(y_in) * disc.n_in).sum(-1) if normal_in is not None else np.zeros(len(y_in))
    g_out = (normal_out(y_out) * disc.n_out).sum(-1) if normal_out is not None else np.zeros(len(y_out))
    res = solver.solve(load, g_in, g_out)
    return res


def slip_residual(disc: Discretization, v, alpha, tag, data=None):
    """``sum_edges int |(D(v)n).tau + alpha v.tau - h.tau| ds`` with ``D(v)`` evaluated from the owning cells."""
    mesh = disc.mesh
    e = mesh.edges(tag)
    from .mesh import q2_basis

    xi = -1.0 if tag == "INNER" else 1.0
    from .mesh import GAUSS_POINTS

    N, dNr, _ = q2_basis(np.full(3, xi), GAUSS_POINTS)
    xc = mesh.vnodes[mesh.cells_v[e.cells]]
    J = np.einsum("cai,qak->cqik", xc, dNr)
    dN = np.einsum("qak,cqki->cqai", dNr, np.linalg.inv(J))
    vn = v.reshape(-1, 2)[mesh.cells_v[e.cells]]
    G = np.einsum("cqaj,cai->cqij", dN, vn)
    vq = np.einsum("qa,cai->cqi", N, vn)
    D = 0.5 * (G + np.swapaxes(G, -1, -2))
    tr = np.einsum("cqi,cqij,cqj->cq", e.tangents, D, e.normals) + alpha * (vq * e.tangents).sum(-1)
    if data is not None:
        tr -= (data(e.points) * e.tangents).sum(-1)
    return float((np.abs(tr) * e.weights).sum())


# Kirchhoff potentials and added mass ----------------------------------------------------

def scalar_laplacian(disc: Discretization):
    m = disc.mesh
    loc = np.einsum("cq,cqai,cqbi->cab", m.qp_weights, m.dN, m.dN)
    cv = m.cells_v
    n = m.n_vnodes
    K = sp.csr_matrix(
        (loc.ravel(), (np.broadcast_to(cv[:, :, None], loc.shape).ravel(), np.broadcast_to(cv[:, None, :], loc.shape).ravel())),
        shape=(n, n),
    )
    mean = np.bincount(cv.ravel(), weights=np.einsum("cq,qa->ca", m.qp_weights, m.N).ravel(), minlength=n)
    return K, mean


def kirchhoff_data(disc: Discretization):
    """Neumann data ``K_i`` on INNER at the edge quadrature points (exact circle normals)."""
    e = disc.mesh.inner
    n = -np.stack([np.cos(e.angles), np.sin(e.angles)], axis=-1)
    y = disc.mesh.inner_radius * np.stack([np.cos(e.angles), np.sin(e.angles)], axis=-1)
    k3 = (y @ _P.T * n).sum(-1)
    return [n[..., 0], n[..., 1], k3]


def kirchhoff_potentials(disc: Discretization, tol: float = 1e-12):
    """Zero-mean discrete potentials with Neumann data ``e1.n``, ``e2.n``, ``x^perp.n`` on INNER and 0 on OUTER.

    Returns an array (3, n_nodes) of nodal values.
    """
    m = disc.mesh
    K, mean = scalar_laplacian(disc)
    M = sp.bmat([[K, sp.csr_matrix(mean[:, None])], [sp.csr_matrix(mean[None, :]), None]], format="csc")
    lu = spla.splu(M)
    e = m.inner
    out = np.zeros((3, m.n_vnodes))
    for i, k in enumerate(kirchhoff_data(disc)):
        total = float((k * e.weights).sum())
        scale = float((np.abs(k) * e.weights).sum())
        if abs(total) > tol * max(scale, 1.0) + 1e-12:
            raise IncompatibleDataError(f"Neumann data {i + 1} has nonzero integral {total:.3e}")
        rhs = np.bincount(e.nodes.ravel(), weights=np.einsum("eq,qa,eq->ea", e.weights, e.basis, k).ravel(),
                          minlength=m.n_vnodes)
        rhs = rhs - total * mean / mean.sum()
        x = lu.solve(np.concatenate([rhs, [0.0]]))
        out[i] = x[:-1]
    return out


def added_mass(disc: Discretization, potentials, params: MaterialParams | None = None):
    """Added-mass matrix ``A_ij = int grad phi_i . grad phi_j`` and ``diag(m, m, J) + A``."""
    K, _ = scalar_laplacian(disc)
    A = potentials @ (K @ potentials.T)
    A = 0.5 * (A + A.T)
    if params is None:
        return A, None
    return A, np.diag([params.m, params.m, params.J]) + A


def kirchhoff_oracle(a: float, b: float, y):
    """Analytic first potential of a disk centered in a disk container."""
    rho = np.linalg.norm(y, axis=-1)
    cos = y[..., 0] / rho
    A = -a * a / (b * b - a * a)
    B = -a * a * b * b / (b * b - a * a)
    return (A * rho + B / rho) * cos


def added_mass_oracle(a: float, b: float) -> float:
    return np.pi * a * a * (b * b + a * a) / (b * b - a * a)


# lifting -----------------------------------------------------------------------

class Lifting:
    """Steady Stokes-Robin fields driven by a rigid body velocity ``l + r x^perp``."""

    def __init__(self, disc: Discretization, alpha: float):
        self.disc = disc
        self.alpha = float(alpha)
        self.solver = SteadyStokesRobin(disc, alpha)

    def __call__(self, l, r):
        l = np.asarray(l, dtype=float)
        r = float(r)

        def vs(x):
            return l + r * (x @ _P.T)

        res = solve_steady_robin(self.disc, self.alpha, normal_in=vs, body_velocity=vs, solver=self.solver)
        return res


def lifting(disc: Discretization, l, r, alpha: float):
    """``(S(l, r), S_pr(l, r))`` as velocity and zero-mean pressure dof vectors."""
    res = Lifting(disc, alpha)(l, r)
    return res.velocity, res.pressure


# manufactured solution ---------------------------------------------------------------

@dataclass(frozen=True)
class ManufacturedSolution:
    """Divergence-free ``v = (-B sin(Ax) cos(By), A cos(Ax) sin(By))`` with ``p = cos x sin y``.

    ``force`` makes it a steady Stokes solution; ``slip_data(tag)`` returns
    the tangential stress data ``D(v)n + alpha v`` for the circle ``tag``
    (normal pointing out of the fluid). The inner circle is centered at the
    origin and the outer one at ``center``.
    """

    alpha: float = 0.5
    A: float = 1.3
    B: float = 1.7
    center: tuple = (0.0, 0.0)

    def velocity(self, x):
        A, B = self.A, self.B
        return np.stack([-B * np.sin(A * x[..., 0]) * np.cos(B * x[..., 1]),
                         A * np.cos(A * x[..., 0]) * np.sin(B * x[..., 1])], -1)

    def gradient(self, x):
        A, B = self.A, self.B
        s1, c1 = np.sin(A * x[..., 0]), np.cos(A * x[..., 0])
        s2, c2 = np.sin(B * x[..., 1]), np.cos(B * x[..., 1])
        G = np.empty(x.shape[:-1] + (2, 2))
        G[..., 0, 0] = -A * B * c1 * c2
        G[..., 0, 1] = B * B * s1 * s2
        G[..., 1, 0] = -A * A * s1 * s2
        G[..., 1, 1] = A * B * c1 * c2
        return G

    def pressure(self, x):
        return np.cos(x[..., 0]) * np.sin(x[..., 1])

    def force(self, x):
        # -div(2 D(v)) = -lap v for divergence-free v; plus grad p
        gp = np.stack([-np.sin(x[..., 0]) * np.sin(x[..., 1]), np.cos(x[..., 0]) * np.cos(x[..., 1])], -1)
        return (self.A**2 + self.B**2) * self.velocity(x) + gp

    def slip_data(self, tag):
        sign = -1.0 if tag == "INNER" else 1.0

        def h(x):
            G = self.gradient(x)
            D = 0.5 * (G + np.swapaxes(G, -1, -2))
            z = x - (0.0 if tag == "INNER" else np.asarray(self.center, float))
            n = sign * z / np.linalg.norm(z, axis=-1)[..., None]
            return np.einsum("...ij,...j->...i", D, n) + self.alpha * self.velocity(x)

        return h


def manufactured_errors(disc: Discretization, sol: ManufacturedSolution):
    """L2 velocity error and zero-mean L2 pressure error of the steady solve against ``sol``."""
    m = disc.mesh
    res = solve_steady_robin(disc, sol.alpha, force=sol.force, normal_in=sol.velocity, normal_out=sol.velocity,
                             slip_in=sol.slip_data("INNER"), slip_out=sol.slip_data("OUTER"))
    vq, _ = disc.velocity_at_qp(res.velocity)
    ev = np.sqrt((m.qp_weights * ((vq - sol.velocity(m.qp_points)) ** 2).sum(-1)).sum())
    pq = disc.pressure_at_qp(res.pressure)
    pe = sol.pressure(m.qp_points)
    pe = pe - (m.qp_weights * pe).sum() / m.area
    pq = pq - (m.qp_weights * pq).sum() / m.area
    ep = np.sqrt((m.qp_weights * (pq - pe) ** 2).sum())
    return float(ev), float(ep)


def manufactured_study(outer_radius=1.0, inner_radius=0.2, levels=((4, 16), (8, 32), (16, 64)), alpha=0.5,
                       body_offset=(0.0, 0.0)):
    """Velocity/pressure errors and observed velocity orders over mesh refinements.

    Returns ``(h, velocity_errors, pressure_errors, orders)``.
    """
    from .mesh import build_annular_mesh

    hs, ev, ep = [], [], []
    for nr, nt in levels:
        mesh = build_annular_mesh(outer_radius, inner_radius, nr, nt, body_offset)
        sol = ManufacturedSolution(alpha=alpha, center=tuple(mesh.center))
        a, b = manufactured_errors(Discretization(mesh), sol)
        hs.append(mesh.h())
        ev.append(a)
        ep.append(b)
    hs, ev, ep = np.array(hs), np.array(ev), np.array(ep)
    orders = np.log(ev[:-1] / ev[1:]) / np.log(hs[:-1] / hs[1:])
    return hs, ev, ep, orders
