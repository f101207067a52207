"""Area-preserving change of variables that follows the body and fixes the wall.

The flow ``X`` of the divergence-free field ``Lambda = perp-grad(psi * w)`` is
integrated with classical RK4 together with its first and second
variational equations, so ``F = grad X`` and ``H = grad grad X`` come out of
the same integrator as ``X`` itself.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .kinematics import RigidState, interpolate_rigid, perp, rotation_matrix

log = logging.getLogger(__name__)


class FlowMapError(RuntimeError):
    pass


def smoothstep5(s):
    """Quintic smoothstep ``6s^5 - 15s^4 + 10s^3`` clamped to [0, 1] with its first three derivatives."""
    s = np.clip(np.asarray(s, dtype=float), 0.0, 1.0)
    v = s**3 * (10.0 - 15.0 * s + 6.0 * s * s)
    d1 = 30.0 * s * s * (1.0 - s) ** 2
    d2 = 60.0 * s * (1.0 - s) * (1.0 - 2.0 * s)
    d3 = 60.0 * (1.0 - 6.0 * s + 6.0 * s * s)
    inside = (s > 0.0) & (s < 1.0)
    return v, d1 * inside, d2 * inside, d3 * inside


@dataclass(frozen=True)
class Cutoff:
    """Smooth cutoff of the wall distance of a disk container.

    ``psi = 1`` at distance ``>= delta/2`` from the wall and ``psi = 0`` at
    distance ``<= delta/4``.
    """

    center: np.ndarray
    radius: float
    delta: float

    def distance(self, x):
        x = np.asarray(x, dtype=float)
        return self.radius - np.linalg.norm(x - self.center, axis=-1)

    def radial(self, x):
        """Profile ``f(rho)`` of the cutoff and its three radial derivatives, with ``rho = |x - c|``."""
        q = 0.25 * self.delta
        d = self.distance(x)
        v, d1, d2, d3 = smoothstep5((d - q) / q)
        # d(dist)/d(rho) = -1
        return v, -d1 / q, d2 / q**2, -d3 / q**3

    def __call__(self, x):
        return self.radial(x)[0]

    def derivatives(self, x):
        """``psi``, gradient (..., 2), Hessian (..., 2, 2), third derivative (..., 2, 2, 2)."""
        x = np.asarray(x, dtype=float)
        return kernels.cutoff_derivatives(x, self.center, self.radius, self.delta)


def build_cutoff(container_center, outer_radius: float, body_radius: float, delta_safe: float | None = None,
                 body_center=(0.0, 0.0)) -> Cutoff:
    """Cutoff for a disk body inside a disk container.

    ``delta_safe`` defaults to half the initial body-wall distance.
    """
    c = np.asarray(container_center, dtype=float).reshape(2)
    gap = outer_radius - (np.linalg.norm(np.asarray(body_center, float) - c) + body_radius)
    if delta_safe is None:
        delta_safe = 0.5 * gap
    if not delta_safe > 0:
        raise ValueError("delta_safe must be positive")
    if gap < 2.0 * delta_safe * (1 - 1e-12):
        raise ValueError(
            f"body too close to wall: distance {gap:.6g} < 2*delta_safe = {2 * delta_safe:.6g}"
        )
    return Cutoff(center=c, radius=float(outer_radius), delta=float(delta_safe))


# extension field -------------------------------------------------------------

def stream_function(h, l, r, x):
    """``w = (x-h)^perp . l + |x-h|^2 r / 2`` with gradient and (constant) Hessian."""
    z = np.asarray(x, dtype=float) - h
    w = perp(z) @ l + 0.5 * r * np.sum(z * z, axis=-1)
    gw = np.stack([l[1] + r * z[..., 0], -l[0] + r * z[..., 1]], axis=-1)
    return w, gw, r * np.eye(2)


def lambda_componentwise(h, l, r, cutoff: Cutoff, x):
    """Extension field in the form ``(-psi_2 w + psi u_S1, psi_1 w + psi u_S2)``."""
    x = np.asarray(x, dtype=float)
    psi, g, _, _ = cutoff.derivatives(x)
    w, _, _ = stream_function(h, l, r, x)
    us = l + r * perp(x - h)
    return np.stack([-g[..., 1] * w + psi * us[..., 0], g[..., 0] * w + psi * us[..., 1]], axis=-1)


def lambda_field(h, l, r, cutoff: Cutoff, x, order: int = 0):
    """Extension field ``Lambda = (-d2 Phi, d1 Phi)``, ``Phi = psi * w``.

    Returns ``Lambda`` and, for ``order >= 1``, ``grad Lambda`` (``[..., i, j] =
    d_j Lambda_i``), for ``order >= 2`` also the second derivatives
    ``[..., i, j, k]``.
    """
    x = np.ascontiguousarray(x, dtype=float)
    h = np.asarray(h, dtype=float)
    l = np.asarray(l, dtype=float)
    return kernels.lambda_derivs(x, cutoff.center, cutoff.radius, cutoff.delta, h, l, float(r), order)


def lambda_state(state: RigidState, cutoff: Cutoff, x, order: int = 0):
    return lambda_field(state.h, state.l, state.r, cutoff, x, order)


# flow map ----------------------------------------------------------------

def _rhs(h, l, r, cutoff, X, F, H):
    return kernels.flow_rhs(
        np.ascontiguousarray(X), np.ascontiguousarray(F), np.ascontiguousarray(H),
        cutoff.center, cutoff.radius, cutoff.delta, np.asarray(h, float), np.asarray(l, float), float(r),
    )


def rk4_step(s0: RigidState, s1: RigidState, cutoff: Cutoff, dt: float, X, F, H, substeps: int):
    """Advance ``(X, F, H)`` over one time step with velocities linear in time."""
    tau = 1.0 / substeps
    for k in range(substeps):
        f0 = k * tau
        stages = []
        for fr in (f0, f0 + 0.5 * tau, f0 + tau):
            hh, _, ll, rr = interpolate_rigid(s0, s1, fr, dt)
            stages.append((hh, ll, rr))
        a = dt * tau
        k1 = _rhs(*stages[0], cutoff, X, F, H)
        k2 = _rhs(*stages[1], cutoff, X + 0.5 * a * k1[0], F + 0.5 * a * k1[1], H + 0.5 * a * k1[2])
        k3 = _rhs(*stages[1], cutoff, X + 0.5 * a * k2[0], F + 0.5 * a * k2[1], H + 0.5 * a * k2[2])
        k4 = _rhs(*stages[2], cutoff, X + a * k3[0], F + a * k3[1], H + a * k3[2])
        X = X + a / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        F = F + a / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        H = H + a / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    return X, F, H


def lipschitz_bound(state: RigidState, cutoff: Cutoff, points) -> float:
    _, dlam = lambda_state(state, cutoff, points, order=1)
    return float(np.max(np.abs(dlam))) if len(points) else 0.0


def substep_count(s0: RigidState, s1: RigidState, cutoff: Cutoff, points, dt: float, minimum: int) -> int:
    lip = max(lipschitz_bound(s0, cutoff, points), lipschitz_bound(s1, cutoff, points))
    return max(int(minimum), int(math.ceil(dt * lip / 0.05)))


@dataclass
class FlowSample:
    """``X``, ``F = grad X`` and ``H = grad grad X`` at a set of reference points."""

    X: np.ndarray
    F: np.ndarray
    H: np.ndarray

    @classmethod
    def identity(cls, points):
        points = np.asarray(points, dtype=float)
        n = len(points)
        return cls(points.copy(), np.broadcast_to(np.eye(2), (n, 2, 2)).copy(), np.zeros((n, 2, 2, 2)))

    def advance(self, s0, s1, cutoff, dt, substeps):
        X, F, H = rk4_step(s0, s1, cutoff, dt, self.X, self.F, self.H, substeps)
        return FlowSample(X, F, H)

    @property
    def det(self):
        F = self.F
        return F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]


@dataclass
class FlowMap:
    """Flow map sampled at fixed reference points on a time grid.

    ``states[n]`` is the rigid state at ``times[n]``; velocities are linear
    within each step. ``samples[n]`` holds ``X, F, H`` at the reference
    points at ``times[n]``.
    """

    points: np.ndarray
    cutoff: Cutoff
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    samples: list = field(default_factory=list)
    substeps: list = field(default_factory=list)
    min_substeps: int = 4

    @classmethod
    def start(cls, points, cutoff, state0: RigidState, t0: float = 0.0, min_substeps: int = 4):
        fm = cls(points=np.asarray(points, dtype=float), cutoff=cutoff, min_substeps=min_substeps)
        fm.times.append(float(t0))
        fm.states.append(state0)
        fm.samples.append(FlowSample.identity(fm.points))
        return fm

    def propose(self, s1: RigidState, dt: float):
        """Sample at ``t_n + dt`` for a candidate end state, without committing it."""
        s0 = self.states[-1]
        n = substep_count(s0, s1, self.cutoff, self.samples[-1].X, dt, self.min_substeps)
        return self.samples[-1].advance(s0, s1, self.cutoff, dt, n), n

    def commit(self, s1: RigidState, dt: float, sample: FlowSample, n_sub: int):
        self.check_inside(sample, self.times[-1] + dt)
        self.times.append(self.times[-1] + dt)
        self.states.append(s1)
        self.samples.append(sample)
        self.substeps.append(n_sub)

    def extend(self, s1: RigidState, dt: float) -> FlowSample:
        sample, n = self.propose(s1, dt)
        self.commit(s1, dt, sample, n)
        return sample

    def check_inside(self, sample: FlowSample, t: float):
        d = self.cutoff.distance(sample.X)
        bad = np.flatnonzero(d < -1e-12)
        if len(bad):
            raise FlowMapError(f"node {int(bad[0])} left the domain at t={t:.6g}")

    def forward(self, y, n: int):
        """Push arbitrary reference points to ``times[n]`` by re-integration."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        s = FlowSample.identity(y)
        for k in range(n):
            dt = self.times[k + 1] - self.times[k]
            s = s.advance(self.states[k], self.states[k + 1], self.cutoff, dt, self.substeps[k])
        return s

    def backward(self, x, n: int):
        """Integrate ``x`` from ``times[n]`` back to the initial time; approximates ``Y(t_n, x)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        X = x.copy()
        F = np.broadcast_to(np.eye(2), (len(x), 2, 2)).copy()
        H = np.zeros((len(x), 2, 2, 2))
        for k in range(n - 1, -1, -1):
            dt = self.times[k + 1] - self.times[k]
            # swapping the end states and negating dt runs the linear velocities backwards
            X, F, H = rk4_step(self.states[k + 1], self.states[k], self.cutoff, -dt, X, F, H, self.substeps[k])
        return X

    def max_det_error(self) -> float:
        return max(float(np.max(np.abs(s.det - 1.0))) for s in self.samples)

    def invert(self, n: int, x, tol: float = 1e-12, maxit: int = 30):
        """Solve ``X(t_n, y) = x`` by damped Newton.

        The seed is the backward integration of ``x``, which is already
        accurate to integrator order; a nearest-node seed is not reliable
        where the map shears strongly near the cutoff band. Iteration also stops
        when the residual stalls within ``1e3 * tol`` (rounding floor). Returns ``(y, iterations)``.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = self.backward(x, n)
        cur = self.forward(y, n)
        res = cur.X - x
        it = 0
        last = np.inf
        while (worst := float(np.max(np.linalg.norm(res, axis=-1)))) > tol:
            # no progress within 1e3*tol: tol is below the rounding floor of the forward map
            if worst >= 0.5 * last and worst <= 1e3 * tol:
                break
            if it >= maxit:
                raise FlowMapError(f"inversion did not converge after {maxit} iterations")
            last = worst
            step = np.linalg.solve(cur.F, res[..., None])[..., 0]
            lam = np.ones(len(y))
            rn = np.linalg.norm(res, axis=-1)
            for _ in range(20):
                trial = self.forward(y - lam[:, None] * step, n)
                tn = np.linalg.norm(trial.X - x, axis=-1)
                worse = tn > rn * (1 - 1e-4 * lam) + tol
                if not worse.any():
                    break
                lam = np.where(worse, 0.5 * lam, lam)
            y = y - lam[:, None] * step
            cur = trial
            res = cur.X - x
            it += 1
        return y, it


def invert_map(flowmap: FlowMap, n: int, x, tol: float = 1e-12):
    return flowmap.invert(n, x, tol)[0]


# metric data -------------------------------------------------------------

@dataclass
class TransformedCoefficients:
    """Metric and connection of the pulled-back Euclidean structure.

    ``g_lower = F^T F``, ``g_upper = F^-1 F^-T`` and
    ``gamma[..., i, j, k] = sum_m Finv[i, m] H[m, j, k]``.
    """

    F: np.ndarray
    Finv: np.ndarray
    g_lower: np.ndarray
    g_upper: np.ndarray
    gamma: np.ndarray


def metric_and_christoffel(sample: FlowSample) -> TransformedCoefficients:
    F = sample.F
    det = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    if np.any(det <= 0):
        raise FlowMapError("singular metric: det grad X <= 0")
    Finv = np.empty_like(F)
    Finv[:, 0, 0] = F[:, 1, 1] / det
    Finv[:, 1, 1] = F[:, 0, 0] / det
    Finv[:, 0, 1] = -F[:, 0, 1] / det
    Finv[:, 1, 0] = -F[:, 1, 0] / det
    gl = np.einsum("nki,nkj->nij", F, F)
    gu = np.einsum("nik,njk->nij", Finv, Finv)
    gamma = np.einsum("nim,nmjk->nijk", Finv, sample.H)
    return TransformedCoefficients(F=F, Finv=Finv, g_lower=gl, g_upper=gu, gamma=gamma)


def compose_maps(fm1: FlowMap, fm2: FlowMap, n: int, x, tol: float = 1e-12):
    """``phi = X2(t_n, Y1(t_n, x))`` and ``grad phi = F2 F1^-1`` at physical points ``x``."""
    if len(fm1.times) <= n or len(fm2.times) <= n or abs(fm1.times[n] - fm2.times[n]) > 1e-12:
        raise FlowMapError("flow maps do not share the time grid")
    y = invert_map(fm1, n, x, tol)
    s1 = fm1.forward(y, n)
    s2 = fm2.forward(y, n)
    return s2.X, s2.F @ np.linalg.inv(s1.F)


def rigid_map(state: RigidState, y):
    return state.h + np.asarray(y, float) @ rotation_matrix(state.theta).T


# invariant checks ------------------------------------------------------------

def prescribed_flowmap(points, cutoff: Cutoff, l, r, dt: float, nsteps: int, min_substeps: int = 4) -> FlowMap:
    """Flow map for a body moving with constant velocity ``l`` and angular velocity ``r``."""
    l = np.asarray(l, dtype=float)
    fm = FlowMap.start(points, cutoff, RigidState(l=l, r=r), 0.0, min_substeps)
    for k in range(1, nsteps + 1):
        fm.extend(RigidState(h=l * (k * dt), theta=r * k * dt, l=l, r=r), dt)
    return fm


def fd_divergence(field, x, h: float = 1e-4):
    """Fourth-order centered finite-difference divergence of a planar vector field."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(len(x))
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        out += (-field(x + 2 * e)[:, i] + 8 * field(x + e)[:, i] - 8 * field(x - e)[:, i] + field(x - 2 * e)[:, i]) / (12 * h)
    return out


def smooth_sample_points(cutoff: Cutoff, rng, n: int, clearance: float = 1e-3, rmax: float = 0.98):
    """Random interior points kept ``clearance`` away from the two circles where the cutoff switches on.

    The cutoff is only C^2 across those circles, so finite-difference
    stencils straddling them lose their order.
    """
    out = np.empty((0, 2))
    q = 0.25 * cutoff.delta
    while len(out) < n:
        ang = rng.uniform(0, 2 * np.pi, 2 * n)
        rad = cutoff.radius * np.sqrt(rng.uniform(0, rmax**2, 2 * n))
        x = cutoff.center + rad[:, None] * np.stack([np.cos(ang), np.sin(ang)], -1)
        d = cutoff.distance(x)
        keep = (np.abs(d - q) > clearance) & (np.abs(d - 2 * q) > clearance)
        out = np.vstack([out, x[keep]])
    return out[:n]


def smooth_trajectory_points(fm: FlowMap, count: int, clearance: float = 1e-3):
    """Current positions of up to ``count`` sample trajectories that never come within ``clearance``
    of the cutoff transition circles; trajectories inside the transition band come first."""
    q = 0.25 * fm.cutoff.delta
    D = np.array([fm.cutoff.distance(s.X) for s in fm.samples])
    clear = np.all((np.abs(D - q) > clearance) & (np.abs(D - 2 * q) > clearance), axis=0)
    band = clear & np.all((D > q) & (D < 2 * q), axis=0)
    idx = np.concatenate([np.flatnonzero(band), np.flatnonzero(clear & ~band)])[:count]
    return fm.samples[-1].X[idx]


def inverse_jacobian_drift(fm: FlowMap, x, n: int, h: float = 1e-5, tol: float = 1e-14):
    """Backward-difference time derivative of ``grad X(t, Y(t, x)) grad Y(t, x)`` between steps ``n-1`` and ``n``.

    ``grad Y`` is formed by fourth-order centered differences of the
    backward-integrated map (smooth, free of Newton stopping noise), so the
    product is not the identity by construction.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))

    def product(k):
        y = fm.invert(k, x, tol)[0]
        F = fm.forward(y, k).F
        G = np.empty((len(x), 2, 2))
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            G[:, :, j] = (-fm.backward(x + 2 * e, k) + 8 * fm.backward(x + e, k)
                          - 8 * fm.backward(x - e, k) + fm.backward(x - 2 * e, k)) / (12 * h)
        return F @ G

    dt = fm.times[n] - fm.times[n - 1]
    return (product(n) - product(n - 1)) / dt


def verify_invariants(fm: FlowMap, cell_weights, rng, n_points: int = 1000, body_points=None) -> list:
    """Check the flow map invariants; returns ``(name, value, tolerance)`` triples.

    ``cell_weights`` holds the quadrature weights (cells, qp) whose points are
    stored in ``fm.samples`` after the first ``n_nodes = len(points) - size``
    entries. ``body_points`` are reference points on the body.
    """
    cut = fm.cutoff
    nsteps = len(fm.times) - 1
    checks = []

    # divergence of the extension field at interior points
    st = fm.states[-1]
    x = smooth_sample_points(cut, rng, n_points)

    def lam(p):
        return lambda_state(st, cut, p)

    lmax = float(np.max(np.abs(lam(x)))) or 1.0
    div = np.max(np.abs(fd_divergence(lam, x))) / lmax
    checks.append(("div_lambda_rel", float(div), 1e-8))

    # area of every marked cell: integral of det grad X over the reference cell
    w = np.asarray(cell_weights)
    nq = w.size
    worst = 0.0
    for smp in fm.samples:
        det = smp.det[-nq:].reshape(w.shape)
        worst = max(worst, float(np.max(np.abs((w * (det - 1.0)).sum(1)) / w.sum(1))))
    checks.append(("cell_area_rel", worst, 1e-7))
    checks.append(("det_error", fm.max_det_error(), 1e-7))

    # time derivative of grad X(Y) grad Y, at points whose trajectories stay
    # clear of the circles where the cutoff is only C^2 (band points first)
    if nsteps >= 1:
        xs = smooth_trajectory_points(fm, 8)
        drift = inverse_jacobian_drift(fm, xs, nsteps)
        checks.append(("inverse_jacobian_drift", float(np.max(np.abs(drift))), 1e-6))

    # rigid motion of the body
    if body_points is not None:
        worst = 0.0
        for k in range(0, nsteps + 1, max(1, nsteps // 10)):
            s = fm.forward(body_points, k)
            worst = max(worst, float(np.max(np.abs(s.X - rigid_map(fm.states[k], body_points)))))
        checks.append(("body_rigidity", worst, 1e-9))
    return checks
