"""Read-only diagnostics over computed trajectories.

* ``energy_audit``: kinetic energy against cumulative viscous and friction
  dissipation.
* ``weak_residual``: the integrated weak momentum balance against smooth
  admissible test fields (divergence free, rigid on the body, vanishing
  near the final time).
* ``time_smooth``: time mollification in body-following coordinates,
  which keeps the body part exactly rigid.
* ``transform_between`` / ``compare_runs``: distance between two runs
  measured on the geometry of the first one, together with the growth
  coefficient that controls it.

All functions take the trajectory returned by ``solver.run`` and do not
modify it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geomap import lambda_field, smoothstep5, stream_function
from .kinematics import perp
from .solver import FluidField, Trajectory
from .stokes_robin import cell_load


class InadmissibleTestError(ValueError):
    """The test field is not divergence free, not rigid on the body, or not vanishing at the final time."""


class IncompatibleRunsError(ValueError):
    """Two trajectories do not share the reference mesh or a common time grid."""


def _sym(G):
    return 0.5 * (G + np.swapaxes(G, -1, -2))


def _edge_values(e, v):
    """Velocity dofs evaluated at the edge quadrature points, (ne, nq, 2)."""
    return np.einsum("qa,eai->eqi", e.basis, np.asarray(v).reshape(-1, 2)[e.nodes])


def _trapezoid_cumulative(t, f):
    t = np.asarray(t, dtype=float)
    f = np.asarray(f, dtype=float)
    out = np.zeros_like(f)
    if len(t) > 1:
        out[1:] = np.cumsum(0.5 * np.diff(t) * (f[1:] + f[:-1]))
    return out


# energy ---------------------------------------------------------------------

@dataclass
class EnergyLedger:
    """Energy balance time series; the dissipation columns are cumulative from ``t[0]``."""

    t: np.ndarray
    E_fluid: np.ndarray
    E_solid: np.ndarray
    D_int: np.ndarray
    D_outer: np.ndarray
    D_body: np.ndarray
    residual: np.ndarray

    COLUMNS = ("t", "E_fluid", "E_solid", "D_int", "D_outer", "D_body", "residual")

    @property
    def energy(self):
        return self.E_fluid + self.E_solid

    def relative_residual(self) -> float:
        """``max |residual| / E(0)`` (absolute residual when the initial energy vanishes)."""
        e0 = float(self.energy[0])
        r = float(np.max(np.abs(self.residual))) if len(self.residual) else 0.0
        return r / e0 if e0 > 0 else r

    def rows(self):
        return np.column_stack([getattr(self, c) for c in self.COLUMNS])


def dissipation_rates(traj: Trajectory, n: int) -> tuple[float, float, float]:
    """Instantaneous interior, wall and body-slip dissipation at sample ``n``."""
    solver = traj.solver
    mesh = traj.disc.mesh
    alpha = traj.params.alpha
    fld, st, smp = traj.fields[n], traj.states[n], traj.flowmap.samples[n]
    D = _sym(solver.physical_gradient_qp(smp, fld.v))
    d_int = 2.0 * float((mesh.qp_weights * (D * D).sum((-1, -2))).sum())
    # the map is the identity on the wall and a rotation on the body, so
    # reference values give the physical norms directly
    e = mesh.outer
    vo = _edge_values(e, fld.v)
    d_out = 2.0 * alpha * float((e.weights * (vo * vo).sum(-1)).sum())
    e = mesh.inner
    vi = _edge_values(e, fld.v)
    rel = vi - (st.Q.T @ fld.l) - fld.r * perp(e.points)
    d_body = 2.0 * alpha * float((e.weights * (rel * rel).sum(-1)).sum())
    return d_int, d_out, d_body


def kinetic_energies(traj: Trajectory, n: int) -> tuple[float, float]:
    solver = traj.solver
    U = solver.physical_velocity_qp(traj.flowmap.samples[n], traj.fields[n].v)
    ef = 0.5 * float((traj.disc.mesh.qp_weights * (U * U).sum(-1)).sum())
    f = traj.fields[n]
    es = 0.5 * traj.params.m * float(f.l @ f.l) + 0.5 * traj.params.J * f.r**2
    return ef, es


def energy_audit(traj: Trajectory) -> EnergyLedger:
    """Energy balance with trapezoidal time quadrature of the dissipation."""
    n = len(traj)
    t = traj.times
    E = np.array([kinetic_energies(traj, k) for k in range(n)]).reshape(n, 2)
    rates = np.array([dissipation_rates(traj, k) for k in range(n)]).reshape(n, 3)
    cum = np.column_stack([_trapezoid_cumulative(t, rates[:, j]) for j in range(3)])
    total = E.sum(1) + cum.sum(1)
    return EnergyLedger(t=t, E_fluid=E[:, 0], E_solid=E[:, 1], D_int=cum[:, 0], D_outer=cum[:, 1],
                        D_body=cum[:, 2], residual=total - total[0])


# weak form ------------------------------------------------------------------

class ZeroTest:
    """The zero test field."""

    def evaluate(self, t, x, state):
        x = np.asarray(x, dtype=float)
        z = np.zeros(x.shape)
        return z, z.copy(), np.zeros(x.shape + (2,))

    def rigid(self, t):
        return np.zeros(2), 0.0, np.zeros(2), 0.0


def time_cutoff(t, t_final, start=0.2, stop=0.8):
    """Smooth factor equal to 1 before ``start*T`` and 0 after ``stop*T``; returns value and derivative."""
    width = (stop - start) * t_final
    v, d1, _, _ = smoothstep5((np.asarray(t, float) - start * t_final) / width)
    return 1.0 - v, -d1 / width


@dataclass(frozen=True)
class RadialRamp:
    """Radial weight equal to 1 inside ``inner`` and 0 outside ``outer``, about ``center``.

    ``profile`` is ``"quintic"`` (``1 - smoothstep5(s)``, C2 at both ends)
    or ``"cubic"`` (``1 - s^3``, C2 at ``inner`` only; use with ``outer`` on
    the wall), with ``s = (rho - inner)/(outer - inner)``.
    """

    center: np.ndarray
    inner: float
    outer: float
    profile: str = "quintic"

    def derivatives(self, x):
        """Value, gradient and Hessian at points ``x`` (n, 2)."""
        z = np.asarray(x, dtype=float) - self.center
        rho = np.sqrt((z * z).sum(-1))
        w = self.outer - self.inner
        s = np.clip((rho - self.inner) / w, 0.0, 1.0)
        if self.profile == "cubic":
            live = s < 1.0
            f, f1, f2 = 1.0 - s**3, -3.0 * s * s / w * live, -6.0 * s / w**2 * live
        else:
            v, d1, d2, _ = smoothstep5(s)
            f, f1, f2 = 1.0 - v, -d1 / w, -d2 / w**2
        safe = np.where(rho > 0, rho, 1.0)
        n = z / safe[..., None]
        nn = n[..., :, None] * n[..., None, :]
        g = f1[..., None] * n
        H = f2[..., None, None] * nn + (f1 / safe)[..., None, None] * (np.eye(2) - nn)
        return f, g, H


def test_ramp(traj: Trajectory, margin: float = 1e-3, profile: str = "quintic") -> RadialRamp:
    """Ramp that is 1 on the body along the whole trajectory.

    The quintic ramp vanishes before the wall band in which the flow map
    turns from rigid to the identity; there the map is rigid and smooth
    fields are approximated as well as on a fixed mesh. The cubic ramp
    reaches the wall.
    """
    m = traj.disc.mesh
    c = np.asarray(m.center, dtype=float)
    reach = max(float(np.linalg.norm(s.h - c)) for s in traj.states) + m.inner_radius + margin
    if profile == "cubic":
        return RadialRamp(center=c, inner=reach, outer=m.outer_radius, profile="cubic")
    outer = m.outer_radius - 0.5 * traj.solver.cutoff.delta
    if outer <= reach:
        raise InadmissibleTestError("body comes too close to the wall for a ramp inside the rigid region")
    return RadialRamp(center=c, inner=reach, outer=outer)


_PERP = np.array([[0.0, -1.0], [1.0, 0.0]])


def _curl_field(psi, gpsi, Hpsi, w, gw, Hw):
    """``perp-grad(psi w)`` and its gradient from the derivatives of both factors."""
    g = psi[..., None] * gw + w[..., None] * gpsi
    Hs = (psi[..., None, None] * Hw + gpsi[..., :, None] * gw[..., None, :] + gw[..., :, None] * gpsi[..., None, :]
          + w[..., None, None] * Hpsi)
    return perp(g), np.einsum("ik,...kj->...ij", _PERP, Hs)


@dataclass
class RigidExtensionTest:
    """Extension of a time-dependent rigid motion, plus an optional fluid vortex.

    The body part moves with ``l(t) = chi(t)(a0 + a1 t)`` and ``omega(t) =
    chi(t)(b0 + b1 t)`` about the body center of the trajectory being
    tested, and is extended by ``perp-grad(psi w)`` with a radial ramp
    ``psi`` (``w`` the stream function of the rigid motion). The vortex
    ``c(t) perp-grad K``, ``K = (1 - |x-x0|^2/rho^2)^4``, is supported in a
    disk that must stay off the body.
    """

    ramp: RadialRamp
    t_final: float
    a0: np.ndarray
    a1: np.ndarray
    b0: float
    b1: float
    vortex_center: np.ndarray | None = None
    vortex_radius: float = 0.0
    c0: float = 0.0
    c1: float = 0.0

    @classmethod
    def random(cls, rng, ramp, t_final, scale=1.0, vortex=None):
        """Random coefficients; ``vortex = (center, radius)`` adds a fluid vortex."""
        a0, a1 = rng.normal(size=2) * scale, rng.normal(size=2) * scale / t_final
        b0, b1 = rng.normal() * scale, rng.normal() * scale / t_final
        kw = {}
        if vortex is not None:
            kw = dict(vortex_center=np.asarray(vortex[0], float), vortex_radius=float(vortex[1]),
                      c0=float(rng.normal() * scale), c1=float(rng.normal() * scale / t_final))
        return cls(ramp, float(t_final), a0, a1, float(b0), float(b1), **kw)

    def rigid(self, t):
        chi, dchi = time_cutoff(t, self.t_final)
        l = chi * (self.a0 + self.a1 * t)
        w = chi * (self.b0 + self.b1 * t)
        dl = dchi * (self.a0 + self.a1 * t) + chi * self.a1
        dw = dchi * (self.b0 + self.b1 * t) + chi * self.b1
        return np.asarray(l, float), float(w), np.asarray(dl, float), float(dw)

    def _vortex(self, t, x):
        chi, dchi = time_cutoff(t, self.t_final)
        c, dc = chi * (self.c0 + self.c1 * t), dchi * (self.c0 + self.c1 * t) + chi * self.c1
        z = x - self.vortex_center
        rho2 = self.vortex_radius**2
        q = (z * z).sum(-1) / rho2
        inside = (q < 1.0).astype(float)
        s = np.clip(1.0 - q, 0.0, None)
        gK = (-8.0 / rho2 * s**3 * inside)[..., None] * z
        hK = (-8.0 / rho2 * inside)[..., None, None] * (
            (s**3)[..., None, None] * np.eye(2) - (6.0 / rho2 * s**2)[..., None, None] * z[..., :, None] * z[..., None, :]
        )
        u = perp(gK)
        G = np.einsum("ik,...kj->...ij", _PERP, hK)
        return c * u, dc * u, c * G

    def evaluate(self, t, x, state):
        """Test field, its time derivative at fixed ``x`` and its gradient ``[..., i, j] = d_j phi_i``."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 2:
            phi, phi_t, grad = self.evaluate(t, x.reshape(-1, 2), state)
            return phi.reshape(x.shape), phi_t.reshape(x.shape), grad.reshape(x.shape + (2,))
        l, om, dl, dom = self.rigid(t)
        psi, gpsi, Hpsi = self.ramp.derivatives(x)
        w, gw, Hw = stream_function(state.h, l, om, x)
        phi, grad = _curl_field(psi, gpsi, Hpsi, w, gw, Hw)
        # d/dt of w at fixed x: the rates of (l, omega) plus the motion h' = l_body of the center
        wr, gwr, _ = stream_function(state.h, dl, dom, x)
        z = x - state.h
        wt = wr - (perp(state.l) @ l) - om * (z @ state.l)
        gwt = gwr - om * state.l
        phi_t = perp(psi[..., None] * gwt + wt[..., None] * gpsi)
        if self.vortex_center is not None:
            u, ut, G = self._vortex(t, x)
            phi, phi_t, grad = phi + u, phi_t + ut, grad + G
        return phi, phi_t, grad


def _body_points(traj, n):
    e = traj.disc.mesh.inner
    st = traj.states[n]
    return st.h + e.points @ st.Q.T


def check_admissible(traj: Trajectory, test, tol: float = 1e-9):
    """Raise ``InadmissibleTestError`` unless the test is admissible along the trajectory."""
    mesh = traj.disc.mesh
    solver = traj.solver
    for n in range(len(traj)):
        st, t = traj.states[n], traj.times[n]
        X = solver.qp_part(traj.flowmap.samples[n].X).reshape(-1, 2)
        phi, _, G = test.evaluate(t, X, st)
        scale = max(1.0, float(np.abs(phi).max()), float(np.abs(G).max()))
        div = np.abs(G[..., 0, 0] + G[..., 1, 1]).max()
        if div > tol * scale:
            raise InadmissibleTestError(f"test field not divergence free at t={t:.6g} ({div:.2e})")
        xb = _body_points(traj, n)
        pb, _, _ = test.evaluate(t, xb, st)
        l, w, _, _ = test.rigid(t)
        rig = np.abs(pb - (l + w * perp(xb - st.h))).max()
        if rig > tol * scale:
            raise InadmissibleTestError(f"test field not rigid on the body at t={t:.6g} ({rig:.2e})")
        # wall nodes lie on the exact circle, where the discrete normal constraint is imposed
        y = mesh.vnodes[mesh.outer_nodes]
        po, _, _ = test.evaluate(t, y, st)
        nrm = (y - mesh.center) / np.linalg.norm(y - mesh.center, axis=-1)[:, None]
        flux = np.abs((po * nrm).sum(-1)).max()
        if flux > tol * scale:
            raise InadmissibleTestError(f"test field crosses the wall at t={t:.6g} ({flux:.2e})")
    t_end = traj.times[-1]
    phi, _, _ = test.evaluate(t_end, traj.solver.qp_part(traj.flowmap.samples[-1].X).reshape(-1, 2), traj.states[-1])
    l, w, _, _ = test.rigid(t_end)
    if np.abs(phi).max() > 0 or np.abs(l).max() > 0 or w != 0:
        raise InadmissibleTestError("test field does not vanish at the final time")


def weak_residual_terms(traj: Trajectory, test, check: bool = True) -> dict:
    """Time-integrated terms of the weak momentum balance, with ``residual = lhs - rhs``."""
    if check:
        check_admissible(traj, test)
    solver, mesh, par = traj.solver, traj.disc.mesh, traj.params
    w = mesh.qp_weights.ravel()
    t = traj.times
    names = ("time", "solid", "convection", "viscous", "wall", "body")
    series = {k: np.zeros(len(t)) for k in names}
    for n in range(len(t)):
        st, fld, smp = traj.states[n], traj.fields[n], traj.flowmap.samples[n]
        X = solver.qp_part(smp.X).reshape(-1, 2)
        U = solver.physical_velocity_qp(smp, fld.v).reshape(-1, 2)
        G = solver.physical_gradient_qp(smp, fld.v).reshape(-1, 2, 2)
        phi, phi_t, gphi = test.evaluate(t[n], X, st)
        l, om, dl, dom = test.rigid(t[n])
        series["time"][n] = -float(w @ (U * phi_t).sum(-1))
        # the moment of the density about the center of mass vanishes, so
        # only the rates of the rigid coefficients survive
        series["solid"][n] = -(par.m * float(fld.l @ dl) + par.J * fld.r * dom)
        series["convection"][n] = -float(w @ np.einsum("ni,nj,nij->n", U, U, gphi))
        series["viscous"][n] = 2.0 * float(w @ (_sym(G) * _sym(gphi)).sum((-1, -2)))
        e = mesh.outer
        uo = _edge_values(e, fld.v)
        po, _, _ = test.evaluate(t[n], e.points, st)
        series["wall"][n] = 2.0 * par.alpha * float((e.weights * (uo * po).sum(-1)).sum())
        e = mesh.inner
        xb = st.h + e.points @ st.Q.T
        ub = _edge_values(e, fld.v) @ st.Q.T
        pb, _, _ = test.evaluate(t[n], xb, st)
        rel_u = ub - (fld.l + fld.r * perp(xb - st.h))
        rel_p = pb - (l + om * perp(xb - st.h))
        series["body"][n] = 2.0 * par.alpha * float((e.weights * (rel_u * rel_p).sum(-1)).sum())
    out = {k: float(_trapezoid_cumulative(t, v)[-1]) for k, v in series.items()}
    # initial data
    st, fld, smp = traj.states[0], traj.fields[0], traj.flowmap.samples[0]
    X = solver.qp_part(smp.X).reshape(-1, 2)
    U = solver.physical_velocity_qp(smp, fld.v).reshape(-1, 2)
    phi, _, _ = test.evaluate(t[0], X, st)
    l, om, _, _ = test.rigid(t[0])
    rhs = float(w @ (U * phi).sum(-1)) + par.m * float(fld.l @ l) + par.J * fld.r * om
    lhs = sum(out[k] for k in names)
    out.update(lhs=lhs, rhs=rhs, residual=lhs - rhs,
               scale=sum(abs(out[k]) for k in names) + abs(rhs))
    return out


def weak_residual(traj: Trajectory, test, check: bool = True) -> float:
    """``lhs - rhs`` of the weak momentum balance against an admissible test field."""
    return weak_residual_terms(traj, test, check)["residual"]


def discrete_test_space(disc, k: int, rng) -> np.ndarray:
    """``k`` random vectors ``[v~ | l~ r]`` in the discrete test space of the scheme.

    They are discretely divergence free and satisfy the nodal normal
    constraints on both boundaries.
    """
    L = disc.layout
    nb = L.body0 + 3
    keep = np.r_[np.arange(L.n_u), np.arange(L.body0, nb)]
    C = sp.vstack([disc.C_in, disc.C_out], format="csr")[:, keep]
    Bf = sp.hstack([disc.B, sp.csr_matrix((L.n_p, 3))], format="csr")
    con = sp.vstack([Bf, C], format="csr")
    m = con.shape[0]
    # L2 projection onto the constraint kernel, regularized in the pressure block by the mean
    M = sp.block_diag([disc.velocity_block(mass_coef=1.0, visc_coef=0.0), sp.eye(3)], format="csr")
    pm = np.concatenate([disc.p_mean, np.zeros(m - L.n_p)])
    K = sp.bmat([[M, con.T, None], [con, None, sp.csr_matrix(pm[:, None])],
                 [None, sp.csr_matrix(pm[None, :]), None]], format="csc")
    lu = spla.splu(K)
    out = np.empty((k, len(keep)))
    for i in range(k):
        z = rng.normal(size=len(keep))
        rhs = np.concatenate([M @ z, np.zeros(m + 1)])
        out[i] = lu.solve(rhs)[: len(keep)]
    return out


def scheme_residual(traj: Trajectory, n: int, tests) -> np.ndarray:
    """Residual of step ``n`` (1-based end index) of the scheme against discrete test vectors.

    ``tests`` rows are ``[v~ | l~ r]`` vectors from ``discrete_test_space``;
    pressure and multipliers drop out against them.
    """
    solver, disc, par = traj.solver, traj.disc, traj.params
    L = disc.layout
    st0, st1 = traj.states[n - 1], traj.states[n]
    f0, f1 = traj.fields[n - 1], traj.fields[n]
    s0, s1 = traj.flowmap.samples[n - 1], traj.flowmap.samples[n]
    dt = traj.times[n] - traj.times[n - 1]
    F, H, X = solver.qp_part(s1.F), solver.qp_part(s1.H), solver.qp_part(s1.X)
    lam = lambda_field(st1.h, st1.l, st1.r, solver.cutoff, X.reshape(-1, 2)).reshape(X.shape)
    adv = solver.physical_velocity_qp(s1, f1.v) - lam
    A = disc.velocity_block(F, H, adv, mass_coef=1.0 / dt)
    nb = L.body0 + 3
    keep = np.r_[np.arange(L.n_u), np.arange(L.body0, nb)]
    slip = (2.0 * par.alpha * (disc.slip_in_unit + disc.slip_out_unit)).tocsr()[keep][:, keep]
    K = sp.block_diag([A, sp.diags([par.m / dt, par.m / dt, par.J / dt])], format="csr") + slip
    x = np.concatenate([f1.v, st1.Q.T @ f1.l, [f1.r]])
    U0 = solver.physical_velocity_qp(s0, f0.v)
    b = np.zeros(len(keep))
    b[: L.n_u] = cell_load(disc, np.einsum("cqji,cqj->cqi", F, U0) / dt)
    b[L.n_u : L.n_u + 2] = par.m / dt * (st1.Q.T @ f0.l)
    b[L.n_u + 2] = par.J / dt * f0.r
    return np.atleast_2d(tests) @ (K @ x - b)


# time mollification ---------------------------------------------------------

def mollifier(s):
    """Even unit-mass kernel ``35/32 (1 - s^2)^3`` on [-1, 1]."""
    s = np.asarray(s, dtype=float)
    return np.where(np.abs(s) < 1.0, 35.0 / 32.0 * (1.0 - s * s) ** 3, 0.0)


_GL_X, _GL_W = np.polynomial.legendre.leggauss(5)


def _integrate(f, a, b):
    if b <= a:
        return 0.0
    s = 0.5 * (b - a) * _GL_X + 0.5 * (a + b)
    return 0.5 * (b - a) * float(_GL_W @ f(s))


def mollifier_weights(times, eps: float, at=None) -> np.ndarray:
    """Matrix ``W`` with ``(eta_eps * f)(at_k) = sum_j W[k, j] f_j``.

    ``f`` is the piecewise linear interpolant of samples on ``times``,
    extended by constants outside the sampled interval. The kernel is a
    polynomial on its support, so Gauss quadrature on each overlap is exact.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    t = np.asarray(times, dtype=float)
    at = t if at is None else np.atleast_1d(np.asarray(at, dtype=float))
    W = np.zeros((len(at), len(t)))
    for k, tk in enumerate(at):
        lo, hi = tk - eps, tk + eps

        def kern(s, tk=tk):
            return mollifier((tk - s) / eps) / eps

        W[k, 0] += _integrate(kern, lo, min(hi, t[0]))
        W[k, -1] += _integrate(kern, max(lo, t[-1]), hi)
        j0 = max(int(np.searchsorted(t, lo, side="right")) - 1, 0)
        j1 = min(int(np.searchsorted(t, hi, side="left")), len(t) - 1)
        for j in range(j0, j1):
            a, b = max(t[j], lo), min(t[j + 1], hi)
            if b <= a:
                continue
            dtj = t[j + 1] - t[j]
            W[k, j] += _integrate(lambda s: kern(s) * (t[j + 1] - s) / dtj, a, b)
            W[k, j + 1] += _integrate(lambda s: kern(s) * (s - t[j]) / dtj, a, b)
    return W


def time_smooth(traj: Trajectory, eps: float) -> Trajectory:
    """Mollify a trajectory in time along the flow map.

    The pulled-back velocity ``v~``, pressure, body-frame velocity
    ``Q^T l`` and angular velocity are convolved in time; the result is
    pushed forward with the unchanged geometry of ``traj``. Body velocities
    become ``Q(t) (eta * Q^T l)(t)`` and ``(eta * r)(t)``, so the body part
    stays rigid, and discrete divergence and normal constraints, being
    linear and time independent in reference variables, are preserved.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    t = traj.times
    W = mollifier_weights(t, eps)
    V = np.array([f.v for f in traj.fields])
    P = np.array([f.p for f in traj.fields])
    LB = np.array([s.Q.T @ f.l for s, f in zip(traj.states, traj.fields)])
    R = np.array([f.r for f in traj.fields])
    Vs, Ps, LBs, Rs = W @ V, W @ P, W @ LB, W @ R
    fields = [FluidField(t=float(t[k]), v=Vs[k], p=Ps[k], l=traj.states[k].Q @ LBs[k], r=float(Rs[k]))
              for k in range(len(t))]
    meta = dict(traj.meta, smoothing_eps=float(eps))
    return replace(traj, fields=fields, meta=meta, info=list(traj.info))


def rigid_part_formula(traj: Trajectory, eps: float, n: int, x, quad=None):
    """Body velocity ``Q(t)(eta * Q^T l)(t) + (x - h)^perp (eta * r)(t)`` at sample ``n``.

    ``quad(f, a, b)`` integrates a scalar function; by default adaptive
    quadrature of the piecewise linear interpolant with constant extension.
    """
    from scipy.integrate import quad as _quad

    quad = quad or (lambda f, a, b: _quad(f, a, b, limit=400, epsabs=1e-15, epsrel=1e-13,
                                          points=[s for s in traj.times if a < s < b][:350])[0])
    t = traj.times
    LB = np.array([s.Q.T @ f.l for s, f in zip(traj.states, traj.fields)])
    R = np.array([f.r for f in traj.fields])
    tn = t[n]

    def conv(vals):
        f = lambda s: mollifier((tn - s) / eps) / eps * np.interp(s, t, vals)
        return quad(f, tn - eps, tn + eps)

    lb = np.array([conv(LB[:, 0]), conv(LB[:, 1])])
    r = conv(R)
    st = traj.states[n]
    x = np.asarray(x, dtype=float)
    return st.Q @ lb + r * perp(x - st.h)


def body_velocity(traj: Trajectory, n: int, x):
    """Rigid body velocity ``l + r (x - h)^perp`` of sample ``n`` at physical points."""
    st, f = traj.states[n], traj.fields[n]
    return f.l + f.r * perp(np.asarray(x, float) - st.h)


def body_interior_points(traj: Trajectory, n: int, k: int = 7) -> np.ndarray:
    """Deterministic polar sample of the body interior at sample ``n``."""
    a = traj.disc.mesh.inner_radius
    rho = a * (np.arange(1, k + 1) - 0.5) / k
    ang = 2.0 * np.pi * np.arange(2 * k) / (2 * k)
    y = (rho[:, None, None] * np.stack([np.cos(ang), np.sin(ang)], -1)[None]).reshape(-1, 2)
    st = traj.states[n]
    return st.h + y @ st.Q.T


def rigidity_defect(traj: Trajectory, n: int) -> float:
    """Largest deformation rate of the body field, from an exact affine fit at interior samples.

    Returns ``max(|D|, fit residual)``; zero up to rounding for rigid fields.
    """
    x = body_interior_points(traj, n)
    u = body_velocity(traj, n, x)
    xc = x - x.mean(0)
    A = np.column_stack([np.ones(len(x)), xc])
    coef, *_ = np.linalg.lstsq(A, u, rcond=None)
    G = coef[1:].T
    fit = np.abs(A @ coef - u).max()
    return float(max(np.abs(_sym(G)).max(), fit))


def energy_space_distance(traj_a: Trajectory, traj_b: Trajectory) -> float:
    """Discrete energy-space norm of the difference of two trajectories on the same geometry.

    ``sqrt(max_t (|u|_L2^2 + m|l|^2 + J r^2) + int |grad u|_L2^2 dt)``.
    """
    if len(traj_a) != len(traj_b) or not np.array_equal(traj_a.times, traj_b.times):
        raise IncompatibleRunsError("trajectories have different time grids")
    solver, mesh, par = traj_a.solver, traj_a.disc.mesh, traj_a.params
    w = mesh.qp_weights
    peak = np.zeros(len(traj_a))
    grad = np.zeros(len(traj_a))
    for n in range(len(traj_a)):
        fa, fb, smp = traj_a.fields[n], traj_b.fields[n], traj_a.flowmap.samples[n]
        dv = fa.v - fb.v
        U = solver.physical_velocity_qp(smp, dv)
        G = solver.physical_gradient_qp(smp, dv)
        dl = fa.l - fb.l
        peak[n] = float((w * (U * U).sum(-1)).sum()) + par.m * float(dl @ dl) + par.J * (fa.r - fb.r) ** 2
        grad[n] = float((w * (G * G).sum((-1, -2))).sum())
    return math.sqrt(float(peak.max()) + float(_trapezoid_cumulative(traj_a.times, grad)[-1]))


# two-run comparison ---------------------------------------------------------

def _same_mesh(t1: Trajectory, t2: Trajectory) -> bool:
    m1, m2 = t1.disc.mesh, t2.disc.mesh
    return m1.vnodes.shape == m2.vnodes.shape and np.array_equal(m1.vnodes, m2.vnodes)


def common_time_indices(t1, t2, tol: float = 1e-9):
    """Index pairs ``(i, j)`` with ``t1[i] == t2[j]`` within ``tol``, on the coarser of the two grids."""
    t1 = np.asarray(t1, float)
    t2 = np.asarray(t2, float)
    scale = tol * max(1.0, float(np.abs(t1).max(initial=0.0)), float(np.abs(t2).max(initial=0.0)))
    coarse, fine, swap = (t1, t2, False) if len(t1) <= len(t2) else (t2, t1, True)
    j = np.clip(np.searchsorted(fine, coarse), 0, len(fine) - 1)
    jm = np.clip(j - 1, 0, len(fine) - 1)
    pick = np.where(np.abs(fine[jm] - coarse) < np.abs(fine[j] - coarse), jm, j)
    ok = np.abs(fine[pick] - coarse) <= scale
    ic = np.flatnonzero(ok)
    pairs = np.column_stack([ic, pick[ok]])
    return pairs[:, ::-1] if swap else pairs


@dataclass
class TransformedRun:
    """Fields of run 2 carried onto the geometry of run 1 at the common times.

    ``v`` are pulled-back velocity dofs (unchanged by the transform since
    both maps share the reference domain), pushed forward with run 1's map;
    ``l``, ``r`` are the transformed rigid data.
    """

    idx1: np.ndarray
    idx2: np.ndarray
    t: np.ndarray
    v: list
    p: list
    l: np.ndarray
    r: np.ndarray


def transform_between(traj2: Trajectory, traj1: Trajectory) -> TransformedRun:
    """Express run 2 on the moving domain of run 1.

    With ``phi = X2 o Y1`` sending the fluid domain of run 1 onto that of
    run 2, ``u~2(x) = (grad phi(x))^-1 u2(phi(x))``. Since both flow maps
    are sampled at the same reference points this becomes
    ``u~2(X1(y)) = F1(y) v~2(y)``, which preserves solenoidality because
    ``det F1 = 1``. Rigid data: ``l~2 = Q1 Q2^T l2``, ``r~2 = r2``.
    """
    if not _same_mesh(traj1, traj2):
        raise IncompatibleRunsError("runs do not share the reference mesh")
    pairs = common_time_indices(traj1.times, traj2.times)
    if len(pairs) < 2:
        raise IncompatibleRunsError("runs do not share a common time grid")
    i1, i2 = pairs[:, 0], pairs[:, 1]
    l = np.array([traj1.states[a].Q @ traj2.states[b].Q.T @ traj2.fields[b].l for a, b in zip(i1, i2)])
    r = np.array([traj2.fields[b].r for b in i2])
    return TransformedRun(idx1=i1, idx2=i2, t=traj1.times[i1], v=[traj2.fields[b].v for b in i2],
                          p=[traj2.fields[b].p for b in i2], l=l, r=r)


def transform_at_points(traj1: Trajectory, traj2: Trajectory, n1: int, n2: int, x):
    """Transformed velocity of run 2 at physical points of run 1's domain from the map composition.

    ``n1`` and ``n2`` index the same time in the two runs. Independent of
    ``transform_between``'s reference-grid shortcut: it inverts run 1's
    map, re-integrates both maps and interpolates ``v~2``.
    """
    from .assembly import evaluate_field

    fm1, fm2 = traj1.flowmap, traj2.flowmap
    y = fm1.invert(n1, x)[0]
    s1 = fm1.forward(y, n1)
    s2 = fm2.forward(y, n2)
    grad_phi = s2.F @ np.linalg.inv(s1.F)
    v2 = evaluate_field(traj2.disc.mesh, traj2.fields[n2].v, y)
    u2 = np.einsum("nij,nj->ni", s2.F, v2)
    return np.linalg.solve(grad_phi, u2[..., None])[..., 0]


def physical_divergence(solver, sample, v) -> float:
    """L2 norm of the pointwise divergence of the pushed-forward field at the quadrature points."""
    G = solver.physical_gradient_qp(sample, v)
    d = G[..., 0, 0] + G[..., 1, 1]
    return math.sqrt(float((solver.mesh.qp_weights * d * d).sum()))


def physical_hessian_qp(solver, sample, v):
    """Broken second derivatives ``d_l d_m u_i`` of the pushed-forward field, (nc, nq, 2, 2, 2).

    The third derivative of the map is approximated by differentiating the
    cellwise Q2 interpolant of the nodal Hessians ``H``.
    """
    mesh = solver.mesh
    vn = np.asarray(v).reshape(-1, 2)[mesh.cells_v]
    vq = np.einsum("qa,cai->cqi", mesh.N, vn)
    gv = np.einsum("cqaj,cai->cqij", mesh.dN, vn)
    hv = np.einsum("cqajk,cai->cqijk", mesh.d2N, vn)
    F = solver.qp_part(sample.F)
    H = solver.qp_part(sample.H)
    Hn = solver.node_part(sample.H)[mesh.cells_v]                 # (nc, 9, 2, 2, 2)
    T = np.einsum("cqak,caimj->cqimjk", mesh.dN, Hn)
    dM = (np.einsum("cqimjk,cqm->cqijk", T, vq) + np.einsum("cqimj,cqmk->cqijk", H, gv)
          + np.einsum("cqimk,cqmj->cqijk", H, gv) + np.einsum("cqim,cqmjk->cqijk", F, hv))
    Finv = np.linalg.inv(F)
    G = np.einsum("cqim,cqmj->cqij", np.einsum("cqim,cqmj->cqij", F, gv) + np.einsum("cqimj,cqm->cqij", H, vq), Finv)
    S = dM - np.einsum("cqil,cqljk->cqijk", G, H)
    return np.einsum("cqijk,cqjl,cqkm->cqilm", S, Finv, Finv)


def _lq(w, f, q):
    """Broken ``L^q`` norm of a field sampled at quadrature points (Frobenius in the value axes)."""
    a = np.sqrt((f * f).reshape(f.shape[: w.ndim] + (-1,)).sum(-1))
    return float((w * a**q).sum()) ** (1.0 / q)


@dataclass
class ComparatorReport:
    """Distance between two runs and the growth coefficient, on the common time grid."""

    t: np.ndarray
    E_hat: np.ndarray
    B: np.ndarray
    B_integral: np.ndarray
    l_tilde2: np.ndarray
    r_tilde2: np.ndarray
    h_hat: np.ndarray
    theta_hat: np.ndarray
    parts: dict = field(default_factory=dict)

    COLUMNS = ("t", "E_hat", "B", "B_integral")

    def rows(self):
        return np.column_stack([self.t, self.E_hat, self.B, self.B_integral])


def compare_runs(traj1: Trajectory, traj2: Trajectory) -> ComparatorReport:
    """Distance ``|u^|^2 + m|l^|^2 + J r^2`` between run 1 and transformed run 2, and ``B(t)``.

    ``B(t)`` is evaluated with broken discrete norms: ``A(1 + G) +
    A^1/2 G^1/2 |t grad u~2|_L4 + (|t d_t u~2|_L4/3 + |t u~2|_W2,4/3 +
    |t grad p~2|_L4/3)^4/3`` with ``A = max_t |u~2|_L2`` and ``G =
    |grad u~2|_L2``. The time derivative at fixed ``x`` is the backward
    difference along run 1's map minus ``Lambda1 . grad u~2``.
    """
    tr = transform_between(traj2, traj1)
    solver, mesh, par = traj1.solver, traj1.disc.mesh, traj1.params
    w = mesh.qp_weights
    k = len(tr.t)
    E = np.zeros(k)
    L2 = np.zeros(k)
    G2 = np.zeros(k)
    L4 = np.zeros(k)
    W2 = np.zeros(k)
    Pg = np.zeros(k)
    Tt = np.zeros(k)
    U_prev = None
    for j in range(k):
        a = tr.idx1[j]
        smp, st1, f1 = traj1.flowmap.samples[a], traj1.states[a], traj1.fields[a]
        dv = f1.v - tr.v[j]
        dU = solver.physical_velocity_qp(smp, dv)
        dl = f1.l - tr.l[j]
        E[j] = float((w * (dU * dU).sum(-1)).sum()) + par.m * float(dl @ dl) + par.J * (f1.r - tr.r[j]) ** 2
        U = solver.physical_velocity_qp(smp, tr.v[j])
        G = solver.physical_gradient_qp(smp, tr.v[j])
        L2[j] = _lq(w, U, 2)
        G2[j] = _lq(w, G, 2)
        L4[j] = _lq(w, G, 4)
        Hs = physical_hessian_qp(solver, smp, tr.v[j])
        W2[j] = _lq(w, U, 4 / 3) + _lq(w, G, 4 / 3) + _lq(w, Hs, 4 / 3)
        Finv = np.linalg.inv(solver.qp_part(smp.F))
        pn = tr.p[j][mesh.cells_p]
        gy = np.einsum("cqak,ca->cqk", mesh.dNp, pn)
        gp = np.einsum("cqkj,cqk->cqj", Finv, gy)
        Pg[j] = _lq(w, gp, 4 / 3)
        X = solver.qp_part(smp.X)
        lam = lambda_field(st1.h, st1.l, st1.r, solver.cutoff, X.reshape(-1, 2)).reshape(X.shape)
        if j > 0:
            ale = (U - U_prev) / (tr.t[j] - tr.t[j - 1])
            Tt[j] = _lq(w, ale - np.einsum("cqij,cqj->cqi", G, lam), 4 / 3)
        U_prev = U
    if k > 1:
        Tt[0] = Tt[1]
    A = float(L2.max())
    t = tr.t
    B = A * (1.0 + G2) + math.sqrt(A) * np.sqrt(G2) * t * L4 + (t * Tt + t * W2 + t * Pg) ** (4.0 / 3.0)
    parts = dict(L2=L2, grad_L2=G2, grad_L4=L4, dt_L43=Tt, W2_43=W2, gradp_L43=Pg)
    h_hat = np.array([traj1.states[a].h - traj2.states[b].h for a, b in zip(tr.idx1, tr.idx2)])
    th_hat = np.array([traj1.states[a].theta - traj2.states[b].theta for a, b in zip(tr.idx1, tr.idx2)])
    return ComparatorReport(t=t, E_hat=E, B=B, B_integral=_trapezoid_cumulative(t, B), l_tilde2=tr.l,
                            r_tilde2=tr.r, h_hat=h_hat, theta_hat=th_hat, parts=parts)
