"""Time stepping of the coupled fluid-body system on the fixed reference annulus.

Each step is a backward-Euler step in ALE form on the reference domain,

    (1/dt) int (F v~ - U^n) . F phi~ + convection + 2 int D(u):D(phi) + slip
        + (m/dt)(l~ - R l~^n) . l~_phi + (J/dt)(r - r^n) r_phi = 0,

with ``U^n = F^n v~^n`` taken at the same reference point and
``R = Q(theta^{n+1})^T Q(theta^n)``. The geometry (flow map and body
position) depends on the unknown body velocity, which is resolved by a
fixed-point (Picard) loop; the convection is linearized at the previous
iterate and uses the relative velocity ``u - Lambda``.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import Discretization, Factorization, SystemTemplate
from .geomap import FlowMap, FlowMapError, FlowSample, build_cutoff, lambda_field
from .kinematics import MaterialParams, RigidState, advance_rigid, perp, rotation_matrix
from .mesh import build_annular_mesh
from .stokes_robin import cell_load

log = logging.getLogger(__name__)

COMPLETED = "COMPLETED"
COLLISION = "COLLISION"


class NumericalError(RuntimeError):
    """Picard non-convergence, linear-solver failure or non-finite values."""


@dataclass
class FluidField:
    t: float
    v: np.ndarray   # pulled-back velocity dofs
    p: np.ndarray   # pressure dofs
    l: np.ndarray   # body velocity (lab frame)
    r: float


@dataclass
class StepInfo:
    iterations: int
    increment: float
    substeps: int
    dt: float


@dataclass
class Trajectory:
    states: list
    fields: list
    flowmap: FlowMap
    disc: Discretization
    params: MaterialParams
    info: list = field(default_factory=list)
    status: str = COMPLETED
    meta: dict = field(default_factory=dict)
    solver: object = None

    @property
    def times(self):
        return np.array([f.t for f in self.fields])

    def __len__(self):
        return len(self.fields)


def collision_distance(state: RigidState, body_radius: float, outer_radius: float, container_center=(0.0, 0.0)) -> float:
    """Distance between a disk body and the wall of a disk container."""
    c = np.asarray(container_center, dtype=float)
    return float(outer_radius - (np.linalg.norm(state.h - c) + body_radius))


@dataclass
class Settings:
    dt: float
    t_final: float
    picard_tol: float = 1e-10
    picard_max: int = 50
    ode_substeps: int = 4
    max_halvings: int = 3


class FSISolver:
    """Owns the discretization, the flow map and the rigid trajectory of one run."""

    def __init__(self, disc: Discretization, params: MaterialParams, cutoff, settings: Settings,
                 collision_threshold: float | None = None):
        self.disc = disc
        self.mesh = disc.mesh
        self.params = params
        self.cutoff = cutoff
        self.settings = settings
        self.threshold = 0.5 * cutoff.delta if collision_threshold is None else collision_threshold
        mesh = self.mesh
        self.nc, self.nq = mesh.qp_weights.shape
        self.n_nodes = mesh.n_vnodes
        self.points = np.vstack([mesh.vnodes, mesh.qp_points.reshape(-1, 2)])
        self._templates = {}

    # geometry helpers -------------------------------------------------------------
    def qp_part(self, arr):
        return arr[self.n_nodes :].reshape(self.nc, self.nq, *arr.shape[1:])

    def node_part(self, arr):
        return arr[: self.n_nodes]

    def physical_velocity_qp(self, sample: FlowSample, v):
        vq, _ = self.disc.velocity_at_qp(v)
        return np.einsum("cqij,cqj->cqi", self.qp_part(sample.F), vq)

    def physical_gradient_qp(self, sample: FlowSample, v):
        """``grad_x u`` at the images of the quadrature points."""
        vq, gq = self.disc.velocity_at_qp(v)
        F = self.qp_part(sample.F)
        H = self.qp_part(sample.H)
        Finv = np.linalg.inv(F)
        M = np.einsum("cqim,cqmj->cqij", F, gq) + np.einsum("cqimj,cqm->cqij", H, vq)
        return np.einsum("cqij,cqjk->cqik", M, Finv)

    def distance(self, state: RigidState) -> float:
        return collision_distance(state, self.mesh.inner_radius, self.mesh.outer_radius, self.cutoff.center)

    def check_boundary_map(self, sample: FlowSample, state: RigidState, tol: float = 1e-8):
        """The map must be rigid on the body and the identity at the wall."""
        F = self.node_part(sample.F)
        Q = state.Q
        e_in = np.abs(F[self.mesh.inner_nodes] - Q).max()
        e_out = np.abs(F[self.mesh.outer_nodes] - np.eye(2)).max()
        if e_in > tol or e_out > tol:
            raise NumericalError(f"flow map not rigid/identity at the boundaries ({e_in:.2e}, {e_out:.2e})")

    def template(self, dt):
        t = self._templates.get(dt)
        if t is None:
            par = self.params
            t = SystemTemplate(self.disc, par.alpha, (par.m / dt, par.m / dt, par.J / dt))
            self._templates[dt] = t
        return t

    # one step -----------------------------------------------------------------
    def _factor(self, K):
        try:
            return Factorization(K)
        except RuntimeError as exc:
            raise NumericalError(f"linear solver failure: {exc}") from exc

    def step(self, fm: FlowMap, state: RigidState, fluid: FluidField, dt: float, prev: RigidState | None = None):
        """One backward-Euler step with Picard iteration; returns the new state, field, sample and info."""
        s = self.settings
        disc, L, par = self.disc, self.disc.layout, self.params
        sample0 = fm.samples[-1]
        U0 = self.physical_velocity_qp(sample0, fluid.v)
        # explicit prediction of the body velocity
        if prev is not None and prev is not state:
            l_k, r_k = 2.0 * state.l - prev.l, 2.0 * state.r - prev.r
        else:
            l_k, r_k = state.l.copy(), state.r
        v_k = fluid.v.copy()
        lu = x = None
        lt_n = state.Q.T @ state.l
        inc = np.inf
        for it in range(1, s.picard_max + 1):
            s1 = advance_rigid(state, l_k, r_k, dt)
            sample, nsub = fm.propose(s1, dt)
            if not np.all(np.isfinite(sample.F)):
                raise NumericalError("non-finite flow map")
            F = self.qp_part(sample.F)
            H = self.qp_part(sample.H)
            X = self.qp_part(sample.X)
            lam = lambda_field(s1.h, s1.l, s1.r, self.cutoff, X.reshape(-1, 2)).reshape(X.shape)
            adv = self.physical_velocity_qp(sample, v_k) - lam
            A = disc.velocity_block(F, H, adv, mass_coef=1.0 / dt)
            K = self.template(dt).build(A)
            rhs = np.zeros(L.size)
            rhs[: L.n_u] = cell_load(disc, np.einsum("cqji,cqj->cqi", F, U0) / dt)
            R = s1.Q.T @ state.Q
            rhs[L.body0 : L.body0 + 2] = par.m / dt * (R @ lt_n)
            rhs[L.body0 + 2] = par.J / dt * state.r
            # the step's first factorization serves later sweeps as a defect correction
            if lu is None or it % 10 == 0:
                lu = self._factor(K)
                x = lu.solve(rhs) if x is None else x + lu.solve(rhs - K @ x)
            else:
                x = x + lu.solve(rhs - K @ x)
            if not np.all(np.isfinite(x)):
                raise NumericalError("non-finite solution")
            v_new, p_new, lt_new, r_new = L.split(x)
            l_new = s1.Q @ lt_new
            dv = np.einsum("cqij,cqj->cqi", F, disc.velocity_at_qp(v_new - v_k)[0])
            inc = math.sqrt(float((self.mesh.qp_weights * (dv * dv).sum(-1)).sum()))
            inc += float(np.linalg.norm(l_new - l_k)) + abs(r_new - r_k)
            v_k, l_k, r_k = v_new, l_new, r_new
            if inc <= s.picard_tol:
                break
        else:
            raise NumericalError(f"Picard iteration did not converge in {s.picard_max} iterations (increment {inc:.3e}); reduce dt")
        # geometry consistent with the converged body velocity
        s1 = advance_rigid(state, l_k, r_k, dt)
        sample, nsub = fm.propose(s1, dt)
        # past the collision threshold the body enters the cutoff band; the run stops after this step
        if self.distance(s1) > self.threshold:
            self.check_boundary_map(sample, s1)
        new = FluidField(t=fluid.t + dt, v=v_k, p=p_new, l=s1.l.copy(), r=s1.r)
        return s1, new, sample, StepInfo(it, inc, nsub, dt)

    def advance(self, fm, state, fluid, dt, prev=None, depth=0):
        """Step with dt halving on failure; returns the list of accepted (state, field, sample, info)."""
        try:
            out = self.step(fm, state, fluid, dt, prev)
            return [out]
        except (NumericalError, FlowMapError) as exc:
            if depth >= self.settings.max_halvings:
                raise
            log.warning("step failed at t=%.6g with dt=%.3g (%s); halving", fluid.t, dt, exc)
        first = self.advance(fm, state, fluid, 0.5 * dt, prev, depth + 1)
        s1, f1, smp1, i1 = first[-1]
        fm.commit(s1, i1.dt, smp1, i1.substeps)
        try:
            second = self.advance(fm, s1, f1, 0.5 * dt, state, depth + 1)
        finally:
            fm.samples.pop()
            fm.states.pop()
            fm.times.pop()
            fm.substeps.pop()
        return first + second

    def run(self, state0: RigidState, fluid0: FluidField, on_step=None) -> Trajectory:
        s = self.settings
        fm = FlowMap.start(self.points, self.cutoff, state0, fluid0.t, s.ode_substeps)
        traj = Trajectory(states=[state0], fields=[fluid0], flowmap=fm, disc=self.disc, params=self.params, solver=self)
        if self.distance(state0) <= self.threshold:
            traj.status = COLLISION
            return traj
        nsteps = int(round(s.t_final / s.dt))
        if nsteps * s.dt < s.t_final - 1e-12 * max(1.0, s.t_final):
            nsteps += 1
        prev = None
        state, fluid = state0, fluid0
        for n in range(nsteps):
            dt = min(s.dt, s.t_final - fluid.t) if n == nsteps - 1 else s.dt
            if dt <= 1e-14 * max(1.0, s.t_final):
                break
            for s1, f1, smp, info in self.advance(fm, state, fluid, dt, prev):
                fm.commit(s1, info.dt, smp, info.substeps)
                traj.states.append(s1)
                traj.fields.append(f1)
                traj.info.append(info)
                prev, state, fluid = state, s1, f1
                if on_step is not None:
                    on_step(traj)
            if self.distance(state) <= self.threshold:
                traj.status = COLLISION
                log.info("collision at t=%.6g, distance %.6g", fluid.t, self.distance(state))
                break
        return traj


# initial data -----------------------------------------------------------------

def velocity_mass(disc: Discretization):
    return disc.velocity_block(mass_coef=1.0, visc_coef=0.0)


def project_initial(disc: Discretization, target, l0, r0):
    """Discrete Leray projection of a target velocity (nodal dofs) for a body moving with ``(l0, r0)``.

    Minimizes the L2 distance to the target over discretely divergence-free
    fields whose nodal normal components match the rigid motion on the body
    and vanish on the wall. Returns ``(v, p)``, ``p`` being the multiplier.
    """
    L = disc.layout
    M = velocity_mass(disc)
    C = sp.vstack([disc.C_in[:, : L.n_u], disc.C_out[:, : L.n_u]], format="csr")
    pm = sp.csr_matrix(disc.p_mean[None, :])
    K = sp.bmat([[M, disc.B.T, C.T, None], [disc.B, None, None, pm.T], [C, None, None, None], [None, pm, None, None]],
                format="csc")
    yperp = perp(disc.y_in)
    g_in = (disc.n_in * (np.asarray(l0, float) + r0 * yperp)).sum(-1)
    rhs = np.concatenate([M @ target, np.zeros(L.n_p), g_in, np.zeros(L.n_out), [0.0]])
    x = spla.splu(K).solve(rhs)
    return x[: L.n_u], x[L.n_u : L.n_u + L.n_p]


def wall_blend(disc: Discretization, y, width=None):
    """Smooth weight equal to 1 on the body and 0 on the wall, flat at both ends."""
    m = disc.mesh
    d_wall = m.outer_radius - np.linalg.norm(y - m.center, axis=-1)
    gap = m.outer_radius - (np.linalg.norm(m.center) + m.inner_radius)
    s = np.clip(d_wall / (width or gap), 0.0, 1.0)
    return s**3 * (10.0 - 15.0 * s + 6.0 * s * s)


def initial_target(disc: Discretization, kind: str, l0, r0, stream=None):
    """Nodal target velocity for the fluid initial condition."""
    y = disc.mesh.vnodes
    if kind == "zero":
        return np.zeros(disc.layout.n_u)
    if kind == "rigid-extension":
        us = np.asarray(l0, float) + r0 * perp(y)
        return (wall_blend(disc, y)[:, None] * us).ravel()
    if kind == "stream":
        return np.asarray(stream(y), dtype=float).ravel()
    raise ValueError(f"unknown fluid initial condition {kind!r}")


# driver --------------------------------------------------------------------

def setup_from_config(cfg):
    """Build discretization, material, cutoff and solver settings from a run configuration."""
    mesh = build_annular_mesh(cfg.outer_radius, cfg.body_radius, cfg.nr, cfg.ntheta, cfg.body_center,
                              delta_safe=cfg.delta_safe_value)
    disc = Discretization(mesh)
    params = MaterialParams.for_disk(cfg.body_radius, cfg.rho_s, cfg.alpha)
    cutoff = build_cutoff(mesh.center, cfg.outer_radius, cfg.body_radius, cfg.delta_safe_value)
    settings = Settings(dt=cfg.dt, t_final=cfg.t_final, picard_tol=cfg.picard_tol, picard_max=cfg.picard_max,
                        ode_substeps=cfg.ode_substeps)
    return disc, params, cutoff, settings


def initial_fields(disc: Discretization, cfg):
    l0 = np.asarray(cfg.l0, dtype=float)
    target = initial_target(disc, cfg.fluid_ic_kind, l0, cfg.r0, cfg.stream_callable())
    v0, p0 = project_initial(disc, target, l0, cfg.r0)
    state0 = RigidState(h=np.zeros(2), theta=0.0, l=l0, r=cfg.r0)
    return state0, FluidField(t=0.0, v=v0, p=p0, l=l0.copy(), r=float(cfg.r0))


def run(cfg, on_step=None) -> Trajectory:
    """Integrate a configured run until ``t_final`` or until the collision threshold."""
    disc, params, cutoff, settings = setup_from_config(cfg)
    solver = FSISolver(disc, params, cutoff, settings)
    state0, fluid0 = initial_fields(disc, cfg)
    traj = solver.run(state0, fluid0, on_step=on_step)
    traj.meta.update(
        config_hash=hashlib.sha256(cfg.serialize().encode()).hexdigest(),
        picard_tol=settings.picard_tol,
        collision_threshold=solver.threshold,
    )
    return traj


def kinetic_energy(solver: FSISolver, sample: FlowSample, fluid: FluidField) -> tuple[float, float]:
    """Fluid and solid kinetic energies."""
    U = solver.physical_velocity_qp(sample, fluid.v)
    ef = 0.5 * float((solver.mesh.qp_weights * (U * U).sum(-1)).sum())
    es = 0.5 * solver.params.m * float(fluid.l @ fluid.l) + 0.5 * solver.params.J * fluid.r**2
    return ef, es


