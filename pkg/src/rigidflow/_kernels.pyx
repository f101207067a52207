# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled per-point kernels for the extension field and the flow ODE."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


cdef inline void _cutoff(double x0, double x1, double c0, double c1, double R, double delta,
                         double* psi, double* g, double* h, double* t) noexcept nogil:
    cdef double q = 0.25 * delta
    cdef double z0 = x0 - c0, z1 = x1 - c1
    cdef double rho = sqrt(z0 * z0 + z1 * z1)
    cdef double s = (R - rho - q) / q
    cdef double f1 = 0.0, f2 = 0.0, f3 = 0.0, n[2], safe, c, dij
    cdef int i, j, k
    if s <= 0.0:
        psi[0] = 0.0
    elif s >= 1.0:
        psi[0] = 1.0
    else:
        psi[0] = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
        f1 = -30.0 * s * s * (1.0 - s) * (1.0 - s) / q
        f2 = 60.0 * s * (1.0 - s) * (1.0 - 2.0 * s) / (q * q)
        f3 = -60.0 * (1.0 - 6.0 * s + 6.0 * s * s) / (q * q * q)
    safe = rho if rho > 0.0 else 1.0
    n[0] = z0 / safe
    n[1] = z1 / safe
    c = f2 / safe - f1 / (safe * safe)
    for i in range(2):
        g[i] = f1 * n[i]
        for j in range(2):
            dij = 1.0 if i == j else 0.0
            h[2 * i + j] = f2 * n[i] * n[j] + f1 / safe * (dij - n[i] * n[j])
            for k in range(2):
                t[4 * i + 2 * j + k] = f3 * n[i] * n[j] * n[k] + c * (
                    (dij * n[k]) + ((1.0 if i == k else 0.0) * n[j])
                    + ((1.0 if j == k else 0.0) * n[i]) - 3.0 * n[i] * n[j] * n[k])


cdef inline void _lambda(double x0, double x1, double c0, double c1, double R, double delta,
                         double h0, double h1, double l0, double l1, double r,
                         double* lam, double* dlam, double* d2lam) noexcept nogil:
    cdef double psi, g[2], hh[4], t[8], gw[2], d1[2], d2[4], d3[8]
    cdef double z0 = x0 - h0, z1 = x1 - h1, w, dij, djk, dik
    cdef int i, j, k
    _cutoff(x0, x1, c0, c1, R, delta, &psi, g, hh, t)
    w = -z1 * l0 + z0 * l1 + 0.5 * r * (z0 * z0 + z1 * z1)
    gw[0] = l1 + r * z0
    gw[1] = -l0 + r * z1
    for i in range(2):
        d1[i] = g[i] * w + psi * gw[i]
        for j in range(2):
            dij = 1.0 if i == j else 0.0
            d2[2 * i + j] = hh[2 * i + j] * w + g[i] * gw[j] + gw[i] * g[j] + r * psi * dij
            for k in range(2):
                djk = 1.0 if j == k else 0.0
                dik = 1.0 if i == k else 0.0
                d3[4 * i + 2 * j + k] = (t[4 * i + 2 * j + k] * w + hh[2 * i + j] * gw[k]
                                         + hh[2 * i + k] * gw[j] + hh[2 * j + k] * gw[i]
                                         + r * (g[i] * djk + g[j] * dik + g[k] * dij))
    lam[0] = -d1[1]
    lam[1] = d1[0]
    for j in range(2):
        dlam[j] = -d2[2 + j]
        dlam[2 + j] = d2[j]
        for k in range(2):
            d2lam[2 * j + k] = -d3[4 + 2 * j + k]
            d2lam[4 + 2 * j + k] = d3[2 * j + k]


def lambda_derivs(double[:, ::1] x, cc, double R, double delta, h, l, double r, int order):
    cdef Py_ssize_t n, N = x.shape[0]
    cdef double c0 = cc[0], c1 = cc[1], h0 = h[0], h1 = h[1], l0 = l[0], l1 = l[1]
    lam_a = np.empty((N, 2))
    dlam_a = np.empty((N, 2, 2))
    d2lam_a = np.empty((N, 2, 2, 2))
    cdef double[:, ::1] lam = lam_a
    cdef double[:, :, ::1] dlam = dlam_a
    cdef double[:, :, :, ::1] d2lam = d2lam_a
    cdef double a[2], b[4], c[8]
    cdef int i, j, k
    with nogil:
        for n in range(N):
            _lambda(x[n, 0], x[n, 1], c0, c1, R, delta, h0, h1, l0, l1, r, a, b, c)
            for i in range(2):
                lam[n, i] = a[i]
                for j in range(2):
                    dlam[n, i, j] = b[2 * i + j]
                    for k in range(2):
                        d2lam[n, i, j, k] = c[4 * i + 2 * j + k]
    if order == 0:
        return lam_a
    if order == 1:
        return lam_a, dlam_a
    return lam_a, dlam_a, d2lam_a


def flow_rhs(double[:, ::1] X, double[:, :, ::1] F, double[:, :, :, ::1] H,
             cc, double R, double delta, h, l, double r):
    cdef Py_ssize_t n, N = X.shape[0]
    cdef double c0 = cc[0], c1 = cc[1], h0 = h[0], h1 = h[1], l0 = l[0], l1 = l[1]
    dX_a = np.empty((N, 2))
    dF_a = np.empty((N, 2, 2))
    dH_a = np.empty((N, 2, 2, 2))
    cdef double[:, ::1] dX = dX_a
    cdef double[:, :, ::1] dF = dF_a
    cdef double[:, :, :, ::1] dH = dH_a
    cdef double a[2], b[4], c[8], acc
    cdef int i, j, k, p, q
    with nogil:
        for n in range(N):
            _lambda(X[n, 0], X[n, 1], c0, c1, R, delta, h0, h1, l0, l1, r, a, b, c)
            for i in range(2):
                dX[n, i] = a[i]
                for j in range(2):
                    dF[n, i, j] = b[2 * i] * F[n, 0, j] + b[2 * i + 1] * F[n, 1, j]
                    for k in range(2):
                        acc = 0.0
                        for p in range(2):
                            acc = acc + b[2 * i + p] * H[n, p, j, k]
                            for q in range(2):
                                acc = acc + c[4 * i + 2 * p + q] * F[n, p, j] * F[n, q, k]
                        dH[n, i, j, k] = acc
    return dX_a, dF_a, dH_a


def velocity_element_matrices(double[:, ::1] N, double[:, :, :, ::1] dN, double[:, ::1] w,
                              double[:, :, :, ::1] F, double[:, :, :, :, ::1] H, adv,
                              double mass_coef, double visc_coef):
    """Local 18x18 velocity matrices; see the numpy version for the definitions."""
    cdef Py_ssize_t nc = w.shape[0], nq = w.shape[1]
    K_a = np.zeros((nc, 18, 18))
    cdef double[:, :, ::1] K = K_a
    cdef double[:, :, ::1] A
    cdef bint has_adv = adv is not None
    if has_adv:
        A = adv
    cdef double Lb[18][2][2]
    cdef double D[18][2][2]
    cdef double Phi[18][2]
    cdef double La[18][2]
    cdef double Fi[2][2]
    cdef double HF[2][2][2]
    cdef double G[2]
    cdef double det, wq, acc, cterm
    cdef Py_ssize_t c, q, a, comp, i, k, j, I, J
    with nogil:
        for c in range(nc):
            for q in range(nq):
                wq = w[c, q]
                det = F[c, q, 0, 0] * F[c, q, 1, 1] - F[c, q, 0, 1] * F[c, q, 1, 0]
                Fi[0][0] = F[c, q, 1, 1] / det
                Fi[1][1] = F[c, q, 0, 0] / det
                Fi[0][1] = -F[c, q, 0, 1] / det
                Fi[1][0] = -F[c, q, 1, 0] / det
                for comp in range(2):
                    for i in range(2):
                        for k in range(2):
                            HF[comp][i][k] = H[c, q, i, comp, 0] * Fi[0][k] + H[c, q, i, comp, 1] * Fi[1][k]
                for a in range(9):
                    G[0] = dN[c, q, a, 0] * Fi[0][0] + dN[c, q, a, 1] * Fi[1][0]
                    G[1] = dN[c, q, a, 0] * Fi[0][1] + dN[c, q, a, 1] * Fi[1][1]
                    for comp in range(2):
                        I = 2 * a + comp
                        for i in range(2):
                            Phi[I][i] = N[q, a] * F[c, q, i, comp]
                            for k in range(2):
                                Lb[I][i][k] = F[c, q, i, comp] * G[k] + N[q, a] * HF[comp][i][k]
                        for i in range(2):
                            for k in range(2):
                                D[I][i][k] = 0.5 * (Lb[I][i][k] + Lb[I][k][i])
                        if has_adv:
                            for i in range(2):
                                La[I][i] = Lb[I][i][0] * A[c, q, 0] + Lb[I][i][1] * A[c, q, 1]
                for I in range(18):
                    for J in range(18):
                        acc = 2.0 * visc_coef * (D[I][0][0] * D[J][0][0] + D[I][0][1] * D[J][0][1]
                                                 + D[I][1][0] * D[J][1][0] + D[I][1][1] * D[J][1][1])
                        if mass_coef != 0.0:
                            acc = acc + mass_coef * (Phi[I][0] * Phi[J][0] + Phi[I][1] * Phi[J][1])
                        if has_adv:
                            cterm = (La[J][0] * Phi[I][0] + La[J][1] * Phi[I][1]
                                     - La[I][0] * Phi[J][0] - La[I][1] * Phi[J][1])
                            acc = acc + 0.5 * cterm
                        K[c, I, J] += wq * acc
    return K_a
