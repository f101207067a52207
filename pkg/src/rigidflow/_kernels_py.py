"""Pure numpy versions of the compiled kernels.

The cutoff is a quintic smoothstep of the distance to a circular wall
(center ``cc``, radius ``R``), rising from 0 at distance ``delta/4`` to 1 at
``delta/2``.
"""
import numpy as np

_P = np.array([[0.0, -1.0], [1.0, 0.0]])
_I = np.eye(2)


def cutoff_derivatives(x, cc, R, delta):
    """``psi`` with gradient, Hessian and third derivative at points ``x``."""
    q = 0.25 * delta
    z = x - cc
    rho = np.sqrt((z * z).sum(-1))
    s = np.clip((R - rho - q) / q, 0.0, 1.0)
    inside = (s > 0.0) & (s < 1.0)
    v = s**3 * (10.0 - 15.0 * s + 6.0 * s * s)
    f1 = -30.0 * s * s * (1.0 - s) ** 2 * inside / q
    f2 = 60.0 * s * (1.0 - s) * (1.0 - 2.0 * s) * inside / q**2
    f3 = -60.0 * (1.0 - 6.0 * s + 6.0 * s * s) * inside / q**3
    safe = np.where(rho > 0, rho, 1.0)
    n = z / safe[..., None]
    nn = n[..., :, None] * n[..., None, :]
    g = f1[..., None] * n
    h = f2[..., None, None] * nn + (f1 / safe)[..., None, None] * (_I - nn)
    nnn = nn[..., :, :, None] * n[..., None, None, :]
    sym = (
        _I[:, :, None] * n[..., None, None, :]
        + _I[:, None, :] * n[..., None, :, None]
        + _I[None, :, :] * n[..., :, None, None]
    )
    c = (f2 / safe - f1 / safe**2)[..., None, None, None]
    t = f3[..., None, None, None] * nnn + c * (sym - 3.0 * nnn)
    return v, g, h, t


def lambda_derivs(x, cc, R, delta, h, l, r, order):
    """Extension field ``Lambda = P grad(psi w)``, ``w = z^perp . l + r |z|^2 / 2``, ``z = x - h``.

    Returns ``Lambda`` for ``order == 0``, else a tuple with the first
    (``[..., i, j] = d_j Lambda_i``) and for ``order == 2`` second derivatives.
    """
    psi, pg, ph, pt = cutoff_derivatives(x, cc, R, delta)
    z = x - h
    w = -z[..., 1] * l[0] + z[..., 0] * l[1] + 0.5 * r * (z * z).sum(-1)
    gw = np.stack([l[1] + r * z[..., 0], -l[0] + r * z[..., 1]], axis=-1)
    d1 = pg * w[..., None] + psi[..., None] * gw
    lam = d1 @ _P.T
    if order == 0:
        return lam
    d2 = (
        ph * w[..., None, None]
        + pg[..., :, None] * gw[..., None, :]
        + gw[..., :, None] * pg[..., None, :]
        + (r * psi)[..., None, None] * _I
    )
    dlam = np.einsum("ia,...aj->...ij", _P, d2)
    if order == 1:
        return lam, dlam
    d3 = (
        pt * w[..., None, None, None]
        + ph[..., :, :, None] * gw[..., None, None, :]
        + ph[..., :, None, :] * gw[..., None, :, None]
        + ph[..., None, :, :] * gw[..., :, None, None]
        + r * (
            pg[..., :, None, None] * _I[None, :, :]
            + pg[..., None, :, None] * _I[:, None, :]
            + pg[..., None, None, :] * _I[:, :, None]
        )
    )
    d2lam = np.einsum("ia,...ajk->...ijk", _P, d3)
    return lam, dlam, d2lam


def flow_rhs(X, F, H, cc, R, delta, h, l, r):
    """Right-hand sides of the flow ODE and its first two variational equations."""
    lam, dlam, d2lam = lambda_derivs(X, cc, R, delta, h, l, r, 2)
    dF = np.einsum("nil,nlj->nij", dlam, F)
    dH = np.einsum("nilm,nlj,nmk->nijk", d2lam, F, F) + np.einsum("nil,nljk->nijk", dlam, H)
    return lam, dF, dH


def velocity_element_matrices(N, dN, w, F, H, adv, mass_coef, visc_coef):
    """Local 18x18 velocity matrices (rows test, columns trial; dof ``2a + c``).

    For the basis field ``N_a e_c`` pulled back through ``F``, the physical
    gradient is ``L = F e_c (Finv^T grad N_a)^T + N_a H[:, c, :] Finv``.
    """
    nc, nq = w.shape
    det = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    Finv = np.empty_like(F)
    Finv[..., 0, 0] = F[..., 1, 1] / det
    Finv[..., 1, 1] = F[..., 0, 0] / det
    Finv[..., 0, 1] = -F[..., 0, 1] / det
    Finv[..., 1, 0] = -F[..., 1, 0] / det
    G = np.einsum("cqaj,cqjk->cqak", dN, Finv)
    HF = np.einsum("cqimj,cqjk->cqmik", H, Finv)            # [c, q, comp, i, k]
    Lb = (
        np.einsum("cqim,cqak->cqamik", F, G)
        + N[None, :, :, None, None, None] * HF[:, :, None]
    ).reshape(nc, nq, 18, 2, 2)
    D = 0.5 * (Lb + np.swapaxes(Lb, -1, -2))
    K = 2.0 * visc_coef * np.einsum("cq,cqIik,cqJik->cIJ", w, D, D)
    Phi = (N[None, :, :, None, None] * np.swapaxes(F, -1, -2)[:, :, None, :, :]).reshape(nc, nq, 18, 2)
    if mass_coef != 0.0:
        K += mass_coef * np.einsum("cq,cqIi,cqJi->cIJ", w, Phi, Phi)
    if adv is not None:
        La = np.einsum("cqIik,cqk->cqIi", Lb, adv)
        C = np.einsum("cq,cqJi,cqIi->cIJ", w, La, Phi)
        K += 0.5 * (C - np.swapaxes(C, 1, 2))
    return K
