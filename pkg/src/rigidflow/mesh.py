"""Structured annular Q2/Q1 mesh of the initial fluid domain.

The body (a disk of radius ``a``) is centered at the origin and the
container (a disk of radius ``b``) at ``center``. Nodes of the
biquadratic velocity lattice are blended radially between the two circles
(transfinite interpolation), so every boundary node, edge midpoint
included, sits on the exact circle. Cells are isoparametric.

Local ordering inside a cell: node ``3*p + q`` with ``p`` the radial and
``q`` the angular offset in ``{0, 1, 2}``; reference coordinates
``(xi, eta)`` follow the same two directions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

GAUSS_POINTS = np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)])
GAUSS_WEIGHTS = np.array([5.0, 8.0, 5.0]) / 9.0

INNER = "INNER"
OUTER = "OUTER"


def lagrange2(t):
    """Quadratic Lagrange basis on nodes -1, 0, 1 and its first two derivatives."""
    t = np.asarray(t, dtype=float)
    L = np.stack([0.5 * t * (t - 1.0), 1.0 - t * t, 0.5 * t * (t + 1.0)], axis=-1)
    dL = np.stack([t - 0.5, -2.0 * t, t + 0.5], axis=-1)
    d2L = np.broadcast_to(np.array([1.0, -2.0, 1.0]), L.shape).copy()
    return L, dL, d2L


def lagrange1(t):
    t = np.asarray(t, dtype=float)
    L = np.stack([0.5 * (1.0 - t), 0.5 * (1.0 + t)], axis=-1)
    dL = np.broadcast_to(np.array([-0.5, 0.5]), L.shape).copy()
    return L, dL


def q2_basis(xi, eta):
    """Biquadratic basis at reference points: values (..., 9), gradients (..., 9, 2), Hessians (..., 9, 2, 2)."""
    Lx, dLx, d2Lx = lagrange2(xi)
    Ly, dLy, d2Ly = lagrange2(eta)
    N = (Lx[..., :, None] * Ly[..., None, :]).reshape(*Lx.shape[:-1], 9)
    dN = np.stack(
        [
            (dLx[..., :, None] * Ly[..., None, :]).reshape(*Lx.shape[:-1], 9),
            (Lx[..., :, None] * dLy[..., None, :]).reshape(*Lx.shape[:-1], 9),
        ],
        axis=-1,
    )
    hxx = (d2Lx[..., :, None] * Ly[..., None, :]).reshape(*Lx.shape[:-1], 9)
    hxy = (dLx[..., :, None] * dLy[..., None, :]).reshape(*Lx.shape[:-1], 9)
    hyy = (Lx[..., :, None] * d2Ly[..., None, :]).reshape(*Lx.shape[:-1], 9)
    H = np.stack([np.stack([hxx, hxy], -1), np.stack([hxy, hyy], -1)], -2)
    return N, dN, H


def q1_basis(xi, eta):
    """Bilinear basis on the four cell corners, ordered (0,0), (0,1), (1,0), (1,1)."""
    Lx, dLx = lagrange1(xi)
    Ly, dLy = lagrange1(eta)
    N = (Lx[..., :, None] * Ly[..., None, :]).reshape(*Lx.shape[:-1], 4)
    dN = np.stack(
        [
            (dLx[..., :, None] * Ly[..., None, :]).reshape(*Lx.shape[:-1], 4),
            (Lx[..., :, None] * dLy[..., None, :]).reshape(*Lx.shape[:-1], 4),
        ],
        axis=-1,
    )
    return N, dN


def _unit(theta):
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


@dataclass
class BoundaryEdges:
    """Edges of one boundary circle with their quadrature data."""

    tag: str
    cells: np.ndarray          # (ne,) owning cell
    nodes: np.ndarray          # (ne, 3) global Q2 node ids along the edge
    local: np.ndarray          # (3,) local ids of those nodes inside the cell
    points: np.ndarray         # (ne, nq, 2) quadrature points
    weights: np.ndarray        # (ne, nq) ds weights
    basis: np.ndarray          # (nq, 3) edge shape functions at the quadrature points
    normals: np.ndarray        # (ne, nq, 2) unit normal, outward from the fluid
    tangents: np.ndarray       # (ne, nq, 2) counterclockwise unit tangent
    angles: np.ndarray         # (ne, nq) polar angle parameter of the quadrature points


@dataclass
class ReferenceMesh:
    nr: int
    ntheta: int
    inner_radius: float
    outer_radius: float
    center: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(2)
        nr, nt = self.nr, self.ntheta
        self.n_vnodes = (2 * nr + 1) * (2 * nt)
        self.n_pnodes = (nr + 1) * nt
        self.n_cells = nr * nt

        s = np.arange(2 * nr + 1) / (2 * nr)
        th = 2.0 * np.pi * np.arange(2 * nt) / (2 * nt)
        self.node_s = np.repeat(s, 2 * nt)
        self.node_angle = np.tile(th, 2 * nr + 1)
        self.vnodes = self.blend(self.node_s, self.node_angle)

        k = np.arange(nr)
        l = np.arange(nt)
        kk, ll = np.meshgrid(k, l, indexing="ij")
        kk, ll = kk.ravel(), ll.ravel()
        p = np.arange(3)
        ii = 2 * kk[:, None, None] + p[None, :, None]
        jj = (2 * ll[:, None, None] + p[None, None, :]) % (2 * nt)
        self.cells_v = (ii * (2 * nt) + jj).reshape(-1, 9)
        pi_ = kk[:, None, None] + np.arange(2)[None, :, None]
        pj_ = (ll[:, None, None] + np.arange(2)[None, None, :]) % nt
        self.cells_p = (pi_ * nt + pj_).reshape(-1, 4)
        # pressure vertex -> Q2 node
        vi = np.repeat(np.arange(nr + 1), nt)
        vj = np.tile(np.arange(nt), nr + 1)
        self.pnode_to_vnode = (2 * vi) * (2 * nt) + 2 * vj
        self.nodes = self.vnodes[self.pnode_to_vnode]

        self.inner_nodes = np.arange(2 * nt)
        self.outer_nodes = 2 * nr * (2 * nt) + np.arange(2 * nt)
        self.inner_node_normals = -_unit(th)
        self.outer_node_normals = _unit(th)

        self._build_quadrature()
        self.inner = self._build_edges(INNER)
        self.outer = self._build_edges(OUTER)

    # geometry ---------------------------------------------------------
    def blend(self, s, angle):
        """Transfinite blend between the body circle (s=0) and the container circle (s=1)."""
        s = np.asarray(s, dtype=float)[..., None]
        e = _unit(np.asarray(angle, dtype=float))
        return (1.0 - s) * self.inner_radius * e + s * (self.center + self.outer_radius * e)

    def _build_quadrature(self):
        gx, gy = np.meshgrid(GAUSS_POINTS, GAUSS_POINTS, indexing="ij")
        gw = np.outer(GAUSS_WEIGHTS, GAUSS_WEIGHTS).ravel()
        self.ref_qp = np.stack([gx.ravel(), gy.ravel()], axis=-1)
        self.N, dNref, self.d2N_ref = q2_basis(gx.ravel(), gy.ravel())
        self.dN_ref = dNref
        self.Np, self.dNp_ref = q1_basis(gx.ravel(), gy.ravel())
        xc = self.vnodes[self.cells_v]                        # (nc, 9, 2)
        J = np.einsum("cai,qak->cqik", xc, dNref)             # dx_i / dxi_k
        detJ = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
        if np.any(detJ <= 0):
            raise ValueError("mesh has inverted cells")
        Jinv = np.empty_like(J)
        Jinv[..., 0, 0] = J[..., 1, 1] / detJ
        Jinv[..., 1, 1] = J[..., 0, 0] / detJ
        Jinv[..., 0, 1] = -J[..., 0, 1] / detJ
        Jinv[..., 1, 0] = -J[..., 1, 0] / detJ
        self.jac = J
        self.jac_inv = Jinv
        self.qp_points = np.einsum("qa,cai->cqi", self.N, xc)
        self.qp_weights = gw[None, :] * detJ
        self.dN = np.einsum("qak,cqki->cqai", dNref, Jinv)    # (nc, 9qp, 9, 2)
        self.dNp = np.einsum("qak,cqki->cqai", self.dNp_ref, Jinv)

    @cached_property
    def d2N(self):
        """Physical Hessians of the Q2 basis at the cell quadrature points, (nc, 9qp, 9, 2, 2)."""
        xc = self.vnodes[self.cells_v]
        # second derivatives of the geometry map, d2x_c / dxi_k dxi_l
        d2x = np.einsum("cai,qakl->cqikl", xc, self.d2N_ref)
        t = self.d2N_ref - np.einsum("cqai,cqikl->cqakl", self.dN, d2x)
        return np.einsum("cqki,cqakl,cqlj->cqaij", self.jac_inv, t, self.jac_inv)

    def _build_edges(self, tag):
        nr, nt = self.nr, self.ntheta
        if tag == INNER:
            cells = np.arange(nt)  # k = 0
            p, xi = 0, -1.0
        else:
            cells = (nr - 1) * nt + np.arange(nt)
            p, xi = 2, 1.0
        local = np.array([3 * p, 3 * p + 1, 3 * p + 2])
        nodes = self.cells_v[cells][:, local]
        L, dL, _ = lagrange2(GAUSS_POINTS)
        xe = self.vnodes[nodes]                                # (ne, 3, 2)
        pts = np.einsum("qa,eai->eqi", L, xe)
        dx = np.einsum("qa,eai->eqi", dL, xe)                  # d/deta, counterclockwise
        ds = np.linalg.norm(dx, axis=-1)
        tang = dx / ds[..., None]
        outward = np.stack([tang[..., 1], -tang[..., 0]], axis=-1)  # right of ccw = away from the circle's center
        normals = -outward if tag == INNER else outward
        l = cells % nt
        dth = 2.0 * np.pi / nt
        angles = (l[:, None] + 0.5 * (GAUSS_POINTS[None, :] + 1.0)) * dth
        return BoundaryEdges(
            tag=tag,
            cells=cells,
            nodes=nodes,
            local=local,
            points=pts,
            weights=ds * GAUSS_WEIGHTS[None, :],
            basis=L,
            normals=normals,
            tangents=tang,
            angles=angles,
        )

    def edges(self, tag):
        return self.inner if tag == INNER else self.outer

    # measures -----------------------------------------------------------
    @property
    def cell_areas(self):
        return self.qp_weights.sum(axis=1)

    @property
    def area(self):
        return float(self.qp_weights.sum())

    def h(self):
        """Largest cell diameter, used as the mesh size."""
        xc = self.nodes[self.cells_p]
        d1 = np.linalg.norm(xc[:, 0] - xc[:, 3], axis=-1)
        d2 = np.linalg.norm(xc[:, 1] - xc[:, 2], axis=-1)
        return float(max(d1.max(), d2.max()))

    def exact_inner_normal(self, angle):
        return -_unit(angle)

    def boundary_data_points(self, tag):
        """Exact points on the boundary circle at the edge quadrature angles."""
        e = self.edges(tag)
        u = _unit(e.angles)
        if tag == INNER:
            return self.inner_radius * u, -u
        return self.center + self.outer_radius * u, u

    # point location -------------------------------------------------------
    def _blend_coords(self, x):
        """Invert the transfinite blend: (s, angle) with blend(s, angle) = x."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        ang = np.arctan2(x[:, 1] - self.center[1] * 0.0, x[:, 0])
        rho = np.linalg.norm(x, axis=-1)
        s = (rho - self.inner_radius) / (self.outer_radius - self.inner_radius)
        for _ in range(30):
            e = _unit(ang)
            ep = np.stack([-e[:, 1], e[:, 0]], axis=-1)
            f = self.blend(s, ang) - x
            ds_ = (self.center + self.outer_radius * e) - self.inner_radius * e
            dang = ((1.0 - s) * self.inner_radius + s * self.outer_radius)[:, None] * ep
            det = ds_[:, 0] * dang[:, 1] - ds_[:, 1] * dang[:, 0]
            step_s = (f[:, 0] * dang[:, 1] - f[:, 1] * dang[:, 0]) / det
            step_a = (ds_[:, 0] * f[:, 1] - ds_[:, 1] * f[:, 0]) / det
            s = s - step_s
            ang = ang - step_a
            if np.max(np.abs(f)) < 1e-15:
                break
        return s, np.mod(ang, 2.0 * np.pi)

    def locate(self, x, tol=1e-10):
        """Cell index and reference coordinates ``(xi, eta)`` of points ``x``.

        Raises ``ValueError`` for points outside the mesh.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        s, ang = self._blend_coords(x)
        if np.any(s < -tol) or np.any(s > 1 + tol):
            raise ValueError("point outside mesh")
        nt = self.ntheta
        k = np.clip(np.floor(s * self.nr).astype(int), 0, self.nr - 1)
        l = np.floor(ang / (2 * np.pi / nt)).astype(int) % nt
        cells = np.empty(len(x), dtype=int)
        ref = np.empty((len(x), 2))
        for n in range(len(x)):
            found = False
            for dk in (0, -1, 1):
                for dl in (0, -1, 1):
                    kk = k[n] + dk
                    if kk < 0 or kk >= self.nr:
                        continue
                    c = kk * nt + (l[n] + dl) % nt
                    xi_eta, ok = self._invert_cell(c, x[n])
                    if ok and np.all(np.abs(xi_eta) <= 1.0 + 1e-9):
                        cells[n], ref[n] = c, xi_eta
                        found = True
                        break
                if found:
                    break
            if not found:
                raise ValueError(f"point {x[n]} outside mesh")
        return cells, ref

    def _invert_cell(self, c, x):
        xc = self.vnodes[self.cells_v[c]]
        r = np.zeros(2)
        for _ in range(40):
            N, dN, _ = q2_basis(r[0], r[1])
            f = N @ xc - x
            J = xc.T @ dN
            step = np.linalg.solve(J, f)
            r = r - step
            if np.max(np.abs(step)) < 1e-15:
                break
            if np.max(np.abs(r)) > 3.0:
                return r, False
        N, _, _ = q2_basis(r[0], r[1])
        return r, bool(np.linalg.norm(N @ xc - x) < 1e-11)


def build_annular_mesh(
    outer_radius: float,
    inner_radius: float,
    nr: int,
    ntheta: int,
    body_offset=(0.0, 0.0),
    delta_safe: float | None = None,
) -> ReferenceMesh:
    """Mesh of the annulus between the body and the container.

    ``body_offset`` is the initial body center relative to the container
    center; internally the body sits at the origin and the container is
    shifted by ``-body_offset``.
    """
    a, b = float(inner_radius), float(outer_radius)
    if not (0 < a < b):
        raise ValueError(f"invalid radii: need 0 < inner_radius < outer_radius, got {a}, {b}")
    if nr < 4 or ntheta < 4:
        raise ValueError("resolution too low: nr and ntheta must be at least 4")
    off = np.asarray(body_offset, dtype=float).reshape(2)
    gap = b - (np.linalg.norm(off) + a)
    if gap <= 0:
        raise ValueError("body does not fit inside the container")
    if delta_safe is not None and gap < 2 * delta_safe:
        raise ValueError(
            f"body too close to the wall: distance {gap:.6g} < 2*delta_safe = {2 * delta_safe:.6g}"
        )
    return ReferenceMesh(nr=nr, ntheta=ntheta, inner_radius=a, outer_radius=b, center=-off)
