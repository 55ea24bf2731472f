"""Free lattice Schrodinger operator: symbol, resolvent kernel, propagator.

The resolvent kernel
    k(omega, z) = (2 pi)^-3 int_{T^3} exp(-i theta.z) / (phi(theta) - omega) dtheta
is evaluated by three routes:

``torus``  - trapezoidal sum on the uniform M^3 grid (spectrally accurate
             for omega well away from the spectrum [0, 12]; by Poisson
             summation its error equals the sum of kernel images at range M,
             roughly exp(-dist * M / 3) / M).
``fft``    - the same discrete sum for a whole cube of z values at once via
             one FFT of 1/(phi - omega); used for kernel tables and as an
             independent implementation cross-check of ``torus``.
``time``   - exact reduction to a 1D time integral
             i * int_0^inf exp(i (omega - 6) t) prod_j i^{|z_j|} J_{|z_j|}(2t) dt,
             split at T into a direct oscillatory part plus eight Hankel
             sign-sectors whose tails are integrated along rotated rays with
             exponential damping.  Accurate uniformly up to and on the
             spectrum, including the +i0 boundary values; this is what makes
             limiting-absorption and Puiseux studies honest at desk scale.

Boundary values R0(omega +- i0) for real omega in [0, 12] follow the
epsilon-schedule contract: evaluate at omega +- i eps_k and extrapolate
(Richardson away from the critical values 0, 4, 8, 12, a sqrt-aware fit
near them, where the expansion is in powers of sqrt(omega)).
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import hankel1e, hankel2e, jv

from . import kernels
from .errors import DomainError, ExtrapolationError, InvalidInputError, ValidationError
from .lattice import GridFunction, LatticeBox, Site

UPPER = "upper"
LOWER = "lower"
OFF_AXIS = "off"

SPECTRUM_MIN = 0.0
SPECTRUM_MAX = 12.0

DEFAULT_EPSILONS = tuple(0.1 * 2.0**-k for k in range(9))

# switch from torus quadrature to the time-integral route when the distance
# to the spectrum drops below _TORUS_DIST_FACTOR / M
_TORUS_DIST_FACTOR = 64.0
# use the sqrt-aware extrapolation when within this distance of a critical value
_CRITICAL_PROXIMITY = 0.02


def symbol(theta):
    """Fourier multiplier of -Laplacian: phi(theta) = 4 sum_j sin^2(theta_j / 2)."""
    t = np.asarray(theta, dtype=float)
    return 4.0 * np.sum(np.sin(t / 2.0) ** 2, axis=-1)


def symbol_gradient(theta):
    t = np.asarray(theta, dtype=float)
    return 2.0 * np.sin(t)


def critical_values() -> list[float]:
    """Values of phi at its critical points: 0 and 12 elliptic, 4 and 8 hyperbolic."""
    return [0.0, 4.0, 8.0, 12.0]


def sector_sqrt(w):
    """sqrt with branch cut on the positive real axis, arg w in (0, 2 pi).

    This is the branch used for all expansions near critical values; approach
    from the upper half-plane gives the positive root on (0, infinity).
    """
    return 1j * np.sqrt(-np.asarray(w, dtype=complex))


def distance_to_spectrum(omega: complex) -> float:
    re, im = float(np.real(omega)), float(np.imag(omega))
    dx = max(SPECTRUM_MIN - re, re - SPECTRUM_MAX, 0.0)
    return float(np.hypot(dx, im))


@dataclass(frozen=True)
class SpectralPoint:
    """A resolvent evaluation point: omega plus the boundary-side convention."""

    omega: complex
    side: str = OFF_AXIS

    def __post_init__(self):
        if self.side not in (UPPER, LOWER, OFF_AXIS):
            raise ValidationError(f"unknown side {self.side!r}")
        if self.side != OFF_AXIS:
            if abs(np.imag(self.omega)) != 0.0:
                raise ValidationError("boundary-value side requires real omega")
            re = np.real(self.omega)
            if not (SPECTRUM_MIN <= re <= SPECTRUM_MAX):
                raise ValidationError("boundary-value side requires omega in [0, 12]")

    @classmethod
    def off_axis(cls, omega) -> "SpectralPoint":
        return cls(complex(omega), OFF_AXIS)

    @classmethod
    def upper(cls, omega: float) -> "SpectralPoint":
        return cls(complex(omega), UPPER)

    @classmethod
    def lower(cls, omega: float) -> "SpectralPoint":
        return cls(complex(omega), LOWER)


@dataclass(frozen=True)
class QuadratureSpec:
    """Discretisation choices for kernel evaluation and boundary limits."""

    grid_points: int = 128
    epsilons: tuple = DEFAULT_EPSILONS
    extrapolation: str = "richardson"

    def __post_init__(self):
        m = self.grid_points
        if m < 8 or m % 2:
            raise ValidationError("grid_points must be an even integer >= 8")
        eps = tuple(float(e) for e in self.epsilons)
        if any(e <= 0 for e in eps) or any(
            e2 >= e1 for e1, e2 in zip(eps, eps[1:])
        ):
            raise ValidationError("epsilons must be strictly decreasing and positive")
        object.__setattr__(self, "epsilons", eps)
        if self.extrapolation not in ("none", "richardson"):
            raise ValidationError("extrapolation must be 'none' or 'richardson'")


@dataclass
class KernelBlock:
    """Resolvent kernel samples on a rows x cols block of sites."""

    rows: list[Site]
    cols: list[Site]
    values: np.ndarray
    at: SpectralPoint

    def __post_init__(self):
        if self.values.shape != (len(self.rows), len(self.cols)):
            raise ValidationError("kernel block shape mismatch")


# ---------------------------------------------------------------------------
# extrapolation helpers


def richardson_extrapolate(values, ratio: float = 2.0):
    """Limit of f(eps_k) for a geometric schedule eps_k = eps_0 ratio^-k.

    Assumes smooth dependence on eps (Neville table in powers of eps).
    Returns (limit, successive_differences).  Raises ExtrapolationError when
    the raw differences grow instead of shrinking.
    """
    vals = [np.asarray(v, dtype=complex) for v in values]
    if len(vals) < 2:
        raise InvalidInputError("need at least two values to extrapolate")
    diffs = [float(np.max(np.abs(b - a))) for a, b in zip(vals, vals[1:])]
    scale = max(float(np.max(np.abs(v))) for v in vals) + 1e-300
    for d_prev, d_next in zip(diffs, diffs[1:]):
        if d_next > 1.5 * d_prev and d_next > 1e-12 * scale:
            raise ExtrapolationError(
                "epsilon-extrapolation differences are not decreasing",
                tail=diffs,
            )
    table = list(vals)
    order = len(vals)
    for j in range(1, order):
        fac = ratio**j
        table = [
            (fac * table[i + 1] - table[i]) / (fac - 1.0)
            for i in range(len(table) - 1)
        ]
    limit = table[0]
    return limit, diffs


def sqrt_fit_extrapolate(offsets, values):
    """Limit of f at offset 0 from samples f(delta_k), fitting
    c0 + c1 sqrt(delta) + c2 delta with the sector branch of sqrt.

    Used near critical values where the resolvent has a Puiseux expansion and
    polynomial Richardson extrapolation is invalid.
    """
    d = np.asarray(offsets, dtype=complex)
    vals = np.stack([np.atleast_1d(np.asarray(v, dtype=complex)) for v in values])
    basis = np.stack([np.ones_like(d), sector_sqrt(d), d], axis=1)
    coef, _, rank, _ = np.linalg.lstsq(basis, vals.reshape(len(d), -1), rcond=None)
    if rank < 3:
        raise ExtrapolationError("sqrt-fit design matrix is rank deficient")
    c0 = coef[0].reshape(vals.shape[1:])
    if vals.ndim == 1 or vals.shape[1:] == ():
        return complex(c0)
    return c0


# ---------------------------------------------------------------------------
# route: torus quadrature and FFT kernel tables


def _torus_kernel_point(omega: complex, z: Site, m: int) -> complex:
    return kernels.torus_quad_sum(tuple(int(c) for c in z), complex(omega), int(m))


@functools.lru_cache(maxsize=16)
def _phi_flat(m: int) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(m) / m
    c = np.cos(ang)
    return (
        6.0
        - 2.0 * (c[:, None, None] + c[None, :, None] + c[None, None, :])
    )


@functools.lru_cache(maxsize=32)
def _fft_kernel_cube(omega: complex, m: int, zmax: int) -> np.ndarray:
    """Kernel values k(omega, z) for all z in [-zmax, zmax]^3 via one FFT."""
    if 2 * zmax + 1 > m:
        raise InvalidInputError("zmax too large for the quadrature grid")
    phi = _phi_flat(m)
    transform = np.fft.fftn(1.0 / (phi - omega)) / m**3
    idx = np.arange(-zmax, zmax + 1) % m
    return transform[np.ix_(idx, idx, idx)]


def fft_kernel_table(omega: complex, m: int, zmax: int) -> np.ndarray:
    """Public wrapper: cube of kernel values indexed by z + zmax per axis."""
    return _fft_kernel_cube(complex(omega), int(m), int(zmax))


# ---------------------------------------------------------------------------
# route: exact 1D time-integral (Bessel/Hankel) reduction


@functools.lru_cache(maxsize=8)
def _gl_nodes(npts: int):
    x, w = np.polynomial.legendre.leggauss(npts)
    return x, w


def _panel_nodes(a: float, b: float, npts: int = 16):
    x, w = _gl_nodes(npts)
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


_SIGN_VECTORS = list(itertools.product((1, -1), repeat=3))

# beyond this |zeta| the scaled Hankel functions are evaluated by their
# asymptotic series (3 correction terms, error ~ (n^2/zeta)^4); scipy's
# amos backend is unreliable for very large complex arguments
_HANKEL_SERIES_CUTOFF = 1.0e7


def _hankel_rows(orders: np.ndarray, zeta: np.ndarray):
    """Scaled Hankel values hankel1e/hankel2e for all orders at all nodes,
    switching to the asymptotic series for very large |zeta|."""
    big = np.abs(zeta) > _HANKEL_SERIES_CUTOFF
    h1 = np.empty((len(orders), len(zeta)), dtype=complex)
    h2 = np.empty_like(h1)
    if not big.all():
        zs = zeta[~big]
        h1[:, ~big] = hankel1e(orders[:, None], zs[None, :])
        h2[:, ~big] = hankel2e(orders[:, None], zs[None, :])
    if big.any():
        zb = zeta[big]
        n = orders[:, None].astype(float)
        f = 4.0 * n**2
        a1 = (f - 1.0) / 8.0
        a2 = (f - 1.0) * (f - 9.0) / 128.0
        a3 = (f - 1.0) * (f - 9.0) * (f - 25.0) / 3072.0
        mu = n * (0.5 * np.pi) + 0.25 * np.pi
        pref = np.sqrt(2.0 / (np.pi * zb))[None, :]
        inv = 1.0 / zb[None, :]
        ser_p = 1.0 + 1j * a1 * inv - a2 * inv**2 - 1j * a3 * inv**3
        ser_m = 1.0 - 1j * a1 * inv - a2 * inv**2 + 1j * a3 * inv**3
        h1[:, big] = pref * np.exp(-1j * mu) * ser_p
        h2[:, big] = pref * np.exp(1j * mu) * ser_m
    return h1, h2


def _time_integral_block(omega: complex, z_arr: np.ndarray) -> np.ndarray:
    """Kernel values for the +i0 / upper-half-plane continuation at all rows
    of z_arr (integer array, shape (nz, 3)).  Requires Im(omega) >= 0."""
    if np.imag(omega) < 0:
        raise InvalidInputError("time-integral route requires Im(omega) >= 0")
    ns = np.abs(z_arr.astype(np.int64))
    nmax = int(ns.max()) if ns.size else 0
    orders = np.arange(nmax + 1)

    t_split = max(24.0, 0.75 * nmax + 8.0)
    rate = abs(omega - 6.0) + 6.0
    width = min(0.5, 4.0 / rate)
    n_panels = int(np.ceil(t_split / width))
    edges = np.linspace(0.0, t_split, n_panels + 1)
    t_nodes = []
    t_weights = []
    for a, b in zip(edges, edges[1:]):
        tn, tw = _panel_nodes(a, b, 12)
        t_nodes.append(tn)
        t_weights.append(tw)
    t_nodes = np.concatenate(t_nodes)
    t_weights = np.concatenate(t_weights)

    jrows = jv(orders[:, None], 2.0 * t_nodes[None, :])
    envelope = np.exp(1j * (omega - 6.0) * t_nodes) * t_weights

    n1, n2, n3 = ns[:, 0], ns[:, 1], ns[:, 2]
    part = np.zeros(len(z_arr), dtype=complex)
    chunk = 256
    for lo in range(0, len(z_arr), chunk):
        sl = slice(lo, lo + chunk)
        prod = jrows[n1[sl]] * jrows[n2[sl]] * jrows[n3[sl]]
        part[sl] = prod @ envelope

    total = part
    for s in _SIGN_VECTORS:
        sig = sum(s)
        a_s = omega - 6.0 + 2.0 * sig
        if a_s == 0:
            theta = 0.5 * np.pi
            scale = t_split
        else:
            theta = 0.5 * np.pi - np.angle(a_s)
            theta = min(max(theta, -0.5 * np.pi), 0.5 * np.pi)
            scale = 1.0 / abs(a_s)
        eith = np.exp(1j * theta)
        u1 = 0.5 * min(t_split, scale)
        acc = np.zeros(len(z_arr), dtype=complex)
        lo_edge = 0.0
        hi_edge = u1
        small_count = 0
        for _ in range(70):
            u, w = _panel_nodes(lo_edge, hi_edge, 16)
            zeta = 2.0 * (t_split + eith * u)
            expo = 1j * a_s * (t_split + eith * u)
            efac = np.exp(np.minimum(expo.real, 0.0) + 1j * expo.imag)
            efac = efac * w * (eith / 8.0)
            h1, h2 = _hankel_rows(orders, zeta)
            rows = [h1 if sj > 0 else h2 for sj in s]
            prod = rows[0][n1] * rows[1][n2] * rows[2][n3]
            contrib = prod @ efac
            acc += contrib
            ref = float(np.max(np.abs(total + acc))) + 1e-30
            if float(np.max(np.abs(contrib))) < 1e-16 * ref:
                small_count += 1
                if small_count >= 2:
                    break
            else:
                small_count = 0
            lo_edge, hi_edge = hi_edge, 2.0 * hi_edge
        total = total + acc

    phase = 1j * (1j ** ((n1 + n2 + n3) % 4))
    return phase * total


def _time_kernel_values(omega: complex, z_list) -> np.ndarray:
    """Time-integral kernel values, reducing by the octahedral symmetry class
    of z and conjugating for the lower half-plane."""
    z_arr = np.atleast_2d(np.asarray(z_list, dtype=np.int64))
    classes = np.sort(np.abs(z_arr), axis=1)
    uniq, inverse = np.unique(classes, axis=0, return_inverse=True)
    if np.imag(omega) < 0:
        vals = np.conj(_time_integral_block(np.conj(complex(omega)), uniq))
    else:
        vals = _time_integral_block(complex(omega), uniq)
    return vals[inverse]


# ---------------------------------------------------------------------------
# public kernel interface


def _resolve_route(omega: complex, m: int, route: str) -> str:
    if route != "auto":
        return route
    if distance_to_spectrum(omega) >= _TORUS_DIST_FACTOR / m:
        return "torus"
    return "time"


def _eval_kernel(omega: complex, z_list, m: int, route: str) -> np.ndarray:
    route = _resolve_route(omega, m, route)
    if route == "time":
        return _time_kernel_values(omega, z_list)
    if route == "torus":
        return np.array([_torus_kernel_point(omega, z, m) for z in z_list])
    if route == "fft":
        zmax = int(np.max(np.abs(np.asarray(z_list)))) if len(z_list) else 0
        cube = fft_kernel_table(omega, m, zmax)
        return np.array([cube[z[0] + zmax, z[1] + zmax, z[2] + zmax] for z in z_list])
    raise InvalidInputError(f"unknown kernel route {route!r}")


def _boundary_offsets(at: SpectralPoint, epsilons) -> np.ndarray:
    sign = 1.0 if at.side == UPPER else -1.0
    return np.array([at.omega + sign * 1j * e for e in epsilons])


def _near_critical(omega_real: float) -> bool:
    return min(abs(omega_real - c) for c in critical_values()) < _CRITICAL_PROXIMITY


def free_resolvent_kernel_block(
    at: SpectralPoint,
    z_list,
    quad: QuadratureSpec = QuadratureSpec(),
    route: str = "auto",
    cache=None,
) -> np.ndarray:
    """Kernel values k(at, z) for every z in z_list (shared quadrature work).

    Off-axis points are evaluated directly.  Boundary points follow the
    epsilon schedule with extrapolation; 'none' returns the value at the
    smallest epsilon.
    """
    z_list = [tuple(int(c) for c in z) for z in np.atleast_2d(np.asarray(z_list))]
    m = quad.grid_points

    if cache is not None:
        cached = [cache.lookup(at, z, quad) for z in z_list]
        if all(c is not None for c in cached):
            return np.array(cached)

    if at.side == OFF_AXIS:
        omega = complex(at.omega)
        if np.imag(omega) == 0.0 and SPECTRUM_MIN <= np.real(omega) <= SPECTRUM_MAX:
            raise DomainError(
                "real omega inside [0, 12] needs a boundary side (upper/lower)"
            )
        out = _eval_kernel(omega, z_list, m, route)
    else:
        omegas = _boundary_offsets(at, quad.epsilons)
        seq = [_eval_kernel(w, z_list, m, route) for w in omegas]
        if quad.extrapolation == "none":
            out = seq[-1]
        elif _near_critical(float(np.real(at.omega))):
            offsets = omegas - min(critical_values(), key=lambda c: abs(at.omega - c))
            out = sqrt_fit_extrapolate(offsets, seq)
        else:
            out, _ = richardson_extrapolate(seq)
        out = np.atleast_1d(out)

    if cache is not None:
        for z, v in zip(z_list, out):
            cache.store(at, z, quad, complex(v))
    return out


def free_resolvent_kernel(
    at: SpectralPoint,
    z: Site,
    quad: QuadratureSpec = QuadratureSpec(),
    route: str = "auto",
    cache=None,
) -> complex:
    """Free resolvent kernel R0(omega, z); see module docstring for routes."""
    return complex(free_resolvent_kernel_block(at, [z], quad, route, cache)[0])


def boundary_kernel_direct(omega: float, z_list, side: str = UPPER) -> np.ndarray:
    """Directly continued boundary values R0(omega +- i0, z) via the time
    integral, bypassing the epsilon schedule.  Cross-check utility."""
    if not (SPECTRUM_MIN <= omega <= SPECTRUM_MAX):
        raise DomainError("boundary values only defined on [0, 12]")
    zs = np.atleast_2d(np.asarray(z_list, dtype=np.int64))
    vals = _time_kernel_values(complex(omega), zs)
    return vals if side == UPPER else np.conj(vals)


# ---------------------------------------------------------------------------
# resolvent applied to grid functions (Fourier-diagonal on the box)


@functools.lru_cache(maxsize=16)
def _phi_box(side: int) -> np.ndarray:
    return _phi_flat(side)


def _apply_diagonal(f: GridFunction, multiplier: np.ndarray) -> GridFunction:
    return GridFunction(f.box, np.fft.ifftn(np.fft.fftn(f.values) * multiplier))


def free_resolvent_apply(
    at: SpectralPoint,
    f: GridFunction,
    quad: QuadratureSpec = QuadratureSpec(),
) -> GridFunction:
    """Apply R0(at) to f, diagonally on the box dual grid.

    Boundary sides evaluate at omega +- i eps over the schedule and
    extrapolate entrywise.  Note the box's own dual modes set the resolution;
    for boundary studies that must mimic Z^3, build a ToeplitzOperator from
    time-route kernels instead (see asymptotics module).
    """
    if f.box.boundary != "periodic":
        raise DomainError("resolvent application requires a periodic box")
    phi = _phi_box(f.box.side)
    if at.side == OFF_AXIS:
        omega = complex(at.omega)
        if np.imag(omega) == 0.0 and SPECTRUM_MIN <= np.real(omega) <= SPECTRUM_MAX:
            raise DomainError(
                "real omega inside [0, 12] needs a boundary side (upper/lower)"
            )
        return _apply_diagonal(f, 1.0 / (phi - omega))
    omegas = _boundary_offsets(at, quad.epsilons)
    seq = [_apply_diagonal(f, 1.0 / (phi - w)).values for w in omegas]
    if quad.extrapolation == "none":
        vals = seq[-1]
    elif _near_critical(float(np.real(at.omega))):
        offsets = omegas - min(critical_values(), key=lambda c: abs(at.omega - c))
        vals = sqrt_fit_extrapolate(offsets, seq)
    else:
        vals, _ = richardson_extrapolate(seq)
    return GridFunction(f.box, vals)


def free_propagator(psi0: GridFunction, t: float) -> GridFunction:
    """exp(-i t H0) psi0, exact on the box dual grid (unitary to roundoff)."""
    if psi0.box.boundary != "periodic":
        raise DomainError("free propagator requires a periodic box")
    phi = _phi_box(psi0.box.side)
    return _apply_diagonal(psi0, np.exp(-1j * t * phi))
