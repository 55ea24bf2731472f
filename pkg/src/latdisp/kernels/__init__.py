"""Hot numerical kernels: compiled core with a pure-NumPy fallback.

The Cython extension `_ext` implements the periodic Laplacian stencil,
the fused Chebyshev recurrence step and the direct torus quadrature sum.
Selection happens once at import time; set LATDISP_PURE=1 to force the
NumPy fallback (useful for benchmarking and debugging).
"""

import os

from . import _fallback

_forced_pure = os.environ.get("LATDISP_PURE", "") == "1"

if not _forced_pure:
    try:
        from . import _ext as _impl
        HAVE_EXT = True
    except ImportError:
        _impl = _fallback
        HAVE_EXT = False
else:
    _impl = _fallback
    HAVE_EXT = False

laplacian_periodic = _impl.laplacian_periodic
apply_shifted_hamiltonian = _impl.apply_shifted_hamiltonian
cheb_step = _impl.cheb_step
torus_quad_sum = _impl.torus_quad_sum

BACKEND = "cython" if HAVE_EXT else "numpy"
