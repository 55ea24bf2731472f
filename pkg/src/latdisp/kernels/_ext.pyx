# Compiled kernels: periodic stencil application, fused Chebyshev step,
# direct torus quadrature sum.  Mirrors _fallback.py.

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, sin

cnp.import_array()

ctypedef double complex cplx


def laplacian_periodic(cnp.ndarray[cplx, ndim=3] u):
    cdef Py_ssize_t n1 = u.shape[0], n2 = u.shape[1], n3 = u.shape[2]
    cdef cnp.ndarray[cplx, ndim=3] out = np.empty_like(u)
    cdef Py_ssize_t i, j, k, ip, im, jp, jm, kp, km
    for i in range(n1):
        ip = i + 1 if i + 1 < n1 else 0
        im = i - 1 if i > 0 else n1 - 1
        for j in range(n2):
            jp = j + 1 if j + 1 < n2 else 0
            jm = j - 1 if j > 0 else n2 - 1
            for k in range(n3):
                kp = k + 1 if k + 1 < n3 else 0
                km = k - 1 if k > 0 else n3 - 1
                out[i, j, k] = (u[ip, j, k] + u[im, j, k]
                                + u[i, jp, k] + u[i, jm, k]
                                + u[i, j, kp] + u[i, j, km]
                                - 6.0 * u[i, j, k])
    return out


def apply_shifted_hamiltonian(cnp.ndarray[cplx, ndim=3] u,
                              cnp.ndarray[cnp.int64_t, ndim=1] v_idx,
                              cnp.ndarray[cnp.float64_t, ndim=1] v_val,
                              double complex a, double complex b):
    """a*((-lap + V) u) + b*u, V sparse as flat indices/values."""
    cdef Py_ssize_t n1 = u.shape[0], n2 = u.shape[1], n3 = u.shape[2]
    cdef cnp.ndarray[cplx, ndim=3] out = np.empty_like(u)
    cdef Py_ssize_t i, j, k, ip, im, jp, jm, kp, km, p
    cdef cplx lap
    for i in range(n1):
        ip = i + 1 if i + 1 < n1 else 0
        im = i - 1 if i > 0 else n1 - 1
        for j in range(n2):
            jp = j + 1 if j + 1 < n2 else 0
            jm = j - 1 if j > 0 else n2 - 1
            for k in range(n3):
                kp = k + 1 if k + 1 < n3 else 0
                km = k - 1 if k > 0 else n3 - 1
                lap = (u[ip, j, k] + u[im, j, k]
                       + u[i, jp, k] + u[i, jm, k]
                       + u[i, j, kp] + u[i, j, km]
                       - 6.0 * u[i, j, k])
                out[i, j, k] = -a * lap + b * u[i, j, k]
    cdef cplx[:] flat_out = out.reshape(-1)
    cdef cplx[:] flat_u = u.reshape(-1)
    for p in range(v_idx.shape[0]):
        flat_out[v_idx[p]] += a * v_val[p] * flat_u[v_idx[p]]
    return out


def cheb_step(cnp.ndarray[cplx, ndim=3] u_k,
              cnp.ndarray[cplx, ndim=3] u_km1,
              double complex a, double complex b,
              cnp.ndarray[cnp.int64_t, ndim=1] v_idx,
              cnp.ndarray[cnp.float64_t, ndim=1] v_val):
    """2*(a*(-lap+V) + b) u_k - u_km1, one fused pass."""
    cdef Py_ssize_t n1 = u_k.shape[0], n2 = u_k.shape[1], n3 = u_k.shape[2]
    cdef cnp.ndarray[cplx, ndim=3] out = np.empty_like(u_k)
    cdef Py_ssize_t i, j, k, ip, im, jp, jm, kp, km, p
    cdef cplx lap
    for i in range(n1):
        ip = i + 1 if i + 1 < n1 else 0
        im = i - 1 if i > 0 else n1 - 1
        for j in range(n2):
            jp = j + 1 if j + 1 < n2 else 0
            jm = j - 1 if j > 0 else n2 - 1
            for k in range(n3):
                kp = k + 1 if k + 1 < n3 else 0
                km = k - 1 if k > 0 else n3 - 1
                lap = (u_k[ip, j, k] + u_k[im, j, k]
                       + u_k[i, jp, k] + u_k[i, jm, k]
                       + u_k[i, j, kp] + u_k[i, j, km]
                       - 6.0 * u_k[i, j, k])
                out[i, j, k] = 2.0 * (-a * lap + b * u_k[i, j, k]) - u_km1[i, j, k]
    cdef cplx[:] flat_out = out.reshape(-1)
    cdef cplx[:] flat_u = u_k.reshape(-1)
    for p in range(v_idx.shape[0]):
        flat_out[v_idx[p]] += 2.0 * a * v_val[p] * flat_u[v_idx[p]]
    return out


def torus_quad_sum(z, double complex omega, Py_ssize_t m):
    """(1/M^3) sum over the uniform M^3 grid of exp(-i theta.z)/(phi-omega)."""
    cdef Py_ssize_t z1 = z[0], z2 = z[1], z3 = z[2]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] c = np.empty(m)
    cdef cnp.ndarray[cplx, ndim=1] p1 = np.empty(m, dtype=np.complex128)
    cdef cnp.ndarray[cplx, ndim=1] p2 = np.empty(m, dtype=np.complex128)
    cdef cnp.ndarray[cplx, ndim=1] p3 = np.empty(m, dtype=np.complex128)
    cdef Py_ssize_t i, j, k
    cdef double ang, two_pi_over_m = 2.0 * np.pi / m
    for i in range(m):
        ang = two_pi_over_m * i
        c[i] = cos(ang)
        p1[i] = cos(ang * z1) - 1j * sin(ang * z1)
        p2[i] = cos(ang * z2) - 1j * sin(ang * z2)
        p3[i] = cos(ang * z3) - 1j * sin(ang * z3)
    cdef cplx total = 0, row, pij
    cdef double cij
    for i in range(m):
        for j in range(m):
            cij = 6.0 - 2.0 * (c[i] + c[j])
            pij = p1[i] * p2[j]
            row = 0
            for k in range(m):
                row = row + p3[k] / ((cij - 2.0 * c[k]) - omega)
            total = total + pij * row
    return complex(total / (<double> m * m * m))
