"""Rigid-body state, rotation algebra and rigid velocity fields in the plane."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


def perp(x):
    """Counterclockwise quarter turn ``x -> (-x2, x1)``, applied on the last axis."""
    x = np.asarray(x, dtype=float)
    return np.stack([-x[..., 1], x[..., 0]], axis=-1)


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class RigidState:
    """Position ``h``, angle ``theta`` and velocities ``l = h'``, ``r = theta'``.

    The angle is kept unwrapped.
    """

    h: np.ndarray = field(default_factory=lambda: np.zeros(2))
    theta: float = 0.0
    l: np.ndarray = field(default_factory=lambda: np.zeros(2))
    r: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "h", np.array(self.h, dtype=float).reshape(2))
        object.__setattr__(self, "l", np.array(self.l, dtype=float).reshape(2))
        object.__setattr__(self, "theta", float(self.theta))
        object.__setattr__(self, "r", float(self.r))

    @property
    def Q(self) -> np.ndarray:
        return rotation_matrix(self.theta)

    def body_velocity(self) -> np.ndarray:
        """Translational velocity seen from the body frame, ``Q^T l``."""
        return self.Q.T @ self.l

    def as_array(self) -> np.ndarray:
        return np.array([self.h[0], self.h[1], self.theta, self.l[0], self.l[1], self.r])

    def __eq__(self, other):
        if not isinstance(other, RigidState):
            return NotImplemented
        return bool(np.array_equal(self.as_array(), other.as_array()))


@dataclass(frozen=True)
class MaterialParams:
    """Body mass ``m``, moment of inertia ``J`` and friction coefficient ``alpha``.

    Fluid density and viscosity are both 1.
    """

    m: float
    J: float
    alpha: float = 0.0
    rho_s: float | None = None

    def __post_init__(self):
        if not self.m > 0:
            raise ValueError(f"body mass must be positive, got m={self.m}")
        if not self.J > 0:
            raise ValueError(f"moment of inertia must be positive, got J={self.J}")
        if not self.alpha >= 0:
            raise ValueError(f"friction coefficient must be nonnegative, got alpha={self.alpha}")

    @classmethod
    def for_disk(cls, radius: float, rho_s: float, alpha: float = 0.0) -> "MaterialParams":
        m, J = inertia_from_density(("disk", radius), rho_s)
        return cls(m=m, J=J, alpha=alpha, rho_s=rho_s)


def rigid_velocity(state: RigidState, x) -> np.ndarray:
    """Velocity ``l + r (x - h)^perp`` of the rigid motion at points ``x``."""
    x = np.asarray(x, dtype=float)
    return state.l + state.r * perp(x - state.h)


def body_point(state: RigidState, y) -> np.ndarray:
    """Current position ``h + Q y`` of the body point with reference position ``y``."""
    y = np.asarray(y, dtype=float)
    return state.h + y @ state.Q.T


def advance_rigid(state: RigidState, l_new, r_new: float, dt: float) -> RigidState:
    """Trapezoidal update of ``(h, theta)`` from the endpoint velocities."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    l_new = np.asarray(l_new, dtype=float).reshape(2)
    h = state.h + 0.5 * dt * (state.l + l_new)
    theta = state.theta + 0.5 * dt * (state.r + float(r_new))
    return replace(state, h=h, theta=theta, l=l_new, r=float(r_new))


def interpolate_rigid(s0: RigidState, s1: RigidState, frac, dt: float):
    """Rigid data at ``t_n + frac*dt`` for velocities linear across the step.

    Returns ``(h, theta, l, r)``; positions are the exact integrals of the
    linear velocities, so ``frac = 1`` reproduces :func:`advance_rigid`.
    """
    dl = s1.l - s0.l
    dr = s1.r - s0.r
    h = s0.h + dt * (frac * s0.l + 0.5 * frac * frac * dl)
    theta = s0.theta + dt * (frac * s0.r + 0.5 * frac * frac * dr)
    return h, theta, s0.l + frac * dl, s0.r + frac * dr


def inertia_from_density(geometry, rho_s: float):
    """Mass and polar moment of inertia about the centroid.

    ``geometry`` is either ``("disk", radius)`` or an ``(n, 2)`` array of
    polygon vertices in counterclockwise order. For polygons the centroid
    must sit at the origin (the reference convention ``h0 = 0``); the
    moment is taken about the origin.
    """
    if isinstance(geometry, tuple) and geometry and geometry[0] == "disk":
        a = float(geometry[1])
        if not a > 0:
            raise ValueError("degenerate geometry: disk radius must be positive")
        area = np.pi * a * a
        m = rho_s * area
        return m, 0.5 * m * a * a
    pts = np.asarray(geometry, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise ValueError("degenerate geometry: need at least three vertices")
    x, y = pts[:, 0], pts[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * cross.sum()
    if abs(area) < 1e-300:
        raise ValueError("degenerate geometry: zero area")
    # second moments of a polygon about the origin
    ixx = (cross * (y * y + y * yn + yn * yn)).sum() / 12.0
    iyy = (cross * (x * x + x * xn + xn * xn)).sum() / 12.0
    return rho_s * abs(area), rho_s * abs(ixx + iyy)
