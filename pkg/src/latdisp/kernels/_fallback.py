"""Pure-NumPy implementations of the hot kernels.

Same signatures as the compiled module `_ext`; used when the extension
is not built or when LATDISP_PURE=1.
"""

import numpy as np


def laplacian_periodic(u):
    # 6-neighbour stencil with periodic wrap: sum of neighbours - 6u
    out = -6.0 * u
    for ax in (0, 1, 2):
        out += np.roll(u, 1, axis=ax)
        out += np.roll(u, -1, axis=ax)
    return out


def apply_shifted_hamiltonian(u, v_idx, v_val, a, b):
    """a*((-lap + V) u) + b*u with V sparse (flat indices into u)."""
    hu = -laplacian_periodic(u)
    if len(v_val):
        hu.reshape(-1)[v_idx] += v_val * u.reshape(-1)[v_idx]
    return a * hu + b * u


def cheb_step(u_k, u_km1, a, b, v_idx, v_val):
    """One Chebyshev recurrence step: 2*(a*(-lap+V) + b) u_k - u_km1."""
    return 2.0 * apply_shifted_hamiltonian(u_k, v_idx, v_val, a, b) - u_km1


def torus_quad_sum(z, omega, m):
    """Direct trapezoidal sum of exp(-i theta.z)/(phi(theta)-omega) on the
    uniform M^3 torus grid, normalised by M^3.

    Slab-wise over the first axis to bound memory at O(M^2).
    """
    k = np.arange(m)
    ang = 2.0 * np.pi * k / m
    c = np.cos(ang)
    px = np.exp(-1j * ang * z[0])
    py = np.exp(-1j * ang * z[1])
    pz = np.exp(-1j * ang * z[2])
    pyz = np.outer(py, pz)
    cjk = c[:, None] + c[None, :]
    total = 0.0 + 0.0j
    for i in range(m):
        denom = (6.0 - 2.0 * (c[i] + cjk)) - omega
        total += px[i] * np.sum(pyz / denom)
    return total / m**3
