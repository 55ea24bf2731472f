"""Lattice geometry, grid functions, discrete Laplacian, weighted norms and
the torus Fourier transform.

Conventions
-----------
A periodic box of half-width L holds sites with centered coordinates
x_j in [-L, L); values are stored as a (2L, 2L, 2L) complex array with
array index i_j = x_j + L and x3 varying fastest in C order.  A
zero-boundary box holds x_j in [-L, L] with side 2L+1.

The weight is (1 + |x|^2)^(sigma/2) with |x|^2 = x1^2+x2^2+x3^2 measured
from the origin of the integer lattice, not from the box corner.

The forward torus transform is the unnormalised sum
uhat(theta) = sum_x u(x) exp(i theta.x) on the dual grid theta = 2 pi k / (2L),
k = 0..2L-1 per axis (FFT index ordering); the inverse carries 1/(2L)^3.
Parseval then reads ||uhat||^2 = (2L)^3 ||u||^2.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import (
    ConvergenceError,
    InvalidInputError,
    UnsupportedBoundaryError,
    ValidationError,
)

PERIODIC = "periodic"
ZERO = "zero"

Site = tuple[int, int, int]


@dataclass(frozen=True)
class LatticeBox:
    """Truncation of Z^3 to a cube, periodic or zero boundary."""

    half_width: int
    boundary: str = PERIODIC

    def __post_init__(self):
        if self.half_width < 1:
            raise ValidationError("half_width must be >= 1")
        if self.boundary not in (PERIODIC, ZERO):
            raise ValidationError(f"unknown boundary rule: {self.boundary!r}")

    @property
    def side(self) -> int:
        return 2 * self.half_width if self.boundary == PERIODIC else 2 * self.half_width + 1

    @property
    def shape(self) -> tuple[int, int, int]:
        n = self.side
        return (n, n, n)

    @property
    def n_sites(self) -> int:
        return self.side**3

    def index(self, site: Site) -> tuple[int, int, int]:
        L = self.half_width
        idx = tuple(int(c) + L for c in site)
        n = self.side
        if any(i < 0 or i >= n for i in idx):
            raise InvalidInputError(f"site {site} outside box of half-width {L}")
        return idx

    def coordinate_axes(self) -> np.ndarray:
        """1D array of centered coordinates along one axis."""
        L = self.half_width
        hi = L if self.boundary == PERIODIC else L + 1
        return np.arange(-L, hi)


@functools.lru_cache(maxsize=64)
def _weight_array(box: LatticeBox, sigma: float) -> np.ndarray:
    ax = box.coordinate_axes().astype(float)
    r2 = ax[:, None, None] ** 2 + ax[None, :, None] ** 2 + ax[None, None, :] ** 2
    return (1.0 + r2) ** (sigma / 2.0)


@dataclass
class GridFunction:
    """Complex-valued function on a lattice box."""

    box: LatticeBox
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.complex128)
        if self.values.shape != self.box.shape:
            raise InvalidInputError(
                f"values shape {self.values.shape} does not match box {self.box.shape}"
            )

    @classmethod
    def zeros(cls, box: LatticeBox) -> "GridFunction":
        return cls(box, np.zeros(box.shape, dtype=np.complex128))

    @classmethod
    def delta(cls, box: LatticeBox, site: Site = (0, 0, 0)) -> "GridFunction":
        u = cls.zeros(box)
        u.values[box.index(site)] = 1.0
        return u

    @classmethod
    def from_callable(cls, box: LatticeBox, f) -> "GridFunction":
        ax = box.coordinate_axes()
        x1, x2, x3 = np.meshgrid(ax, ax, ax, indexing="ij")
        return cls(box, np.asarray(f(x1, x2, x3), dtype=np.complex128))

    def copy(self) -> "GridFunction":
        return GridFunction(self.box, self.values.copy())

    def __getitem__(self, site: Site) -> complex:
        return complex(self.values[self.box.index(site)])

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def check_finite(self):
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("grid function has non-finite entries")


@dataclass(frozen=True)
class Potential:
    """Real-valued potential with finite support, stored sparsely."""

    sites: tuple[Site, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.sites) != len(self.values):
            raise ValidationError("sites and values must have equal length")
        if len(set(self.sites)) != len(self.sites):
            raise ValidationError("potential support has duplicate sites")
        if not all(np.isfinite(v) for v in self.values):
            raise InvalidInputError("potential values must be finite")

    @classmethod
    def from_dict(cls, entries: dict) -> "Potential":
        sites = tuple(tuple(int(c) for c in s) for s in entries)
        return cls(sites, tuple(float(entries[s]) for s in entries))

    @classmethod
    def single_site(cls, value: float, site: Site = (0, 0, 0)) -> "Potential":
        return cls((tuple(site),), (float(value),))

    @classmethod
    def empty(cls) -> "Potential":
        return cls((), ())

    @property
    def support_size(self) -> int:
        return len(self.sites)

    def max_abs(self) -> float:
        return max((abs(v) for v in self.values), default=0.0)

    def flat_indices(self, box: LatticeBox) -> np.ndarray:
        n = box.side
        idx = [box.index(s) for s in self.sites]
        return np.array([(i * n + j) * n + k for i, j, k in idx], dtype=np.int64)

    def value_array(self) -> np.ndarray:
        return np.array(self.values, dtype=np.float64)

    def apply(self, u: GridFunction) -> GridFunction:
        out = GridFunction.zeros(u.box)
        for s, v in zip(self.sites, self.values):
            idx = u.box.index(s)
            out.values[idx] = v * u.values[idx]
        return out


# ---------------------------------------------------------------------------
# norms and operators


def weighted_norm(u: GridFunction, sigma: float) -> float:
    """l^2_sigma norm: || (1+|x|^2)^(sigma/2) u ||_2."""
    u.check_finite()
    w = _weight_array(u.box, float(sigma))
    return float(np.linalg.norm(w * u.values))


def apply_discrete_laplacian(u: GridFunction) -> GridFunction:
    """6-neighbour stencil sum_{|y-x|=1} u(y) - 6 u(x)."""
    if u.box.boundary == PERIODIC:
        return GridFunction(u.box, kernels.laplacian_periodic(u.values))
    out = -6.0 * u.values
    for ax in (0, 1, 2):
        shifted = np.zeros_like(u.values)
        src = [slice(None)] * 3
        dst = [slice(None)] * 3
        src[ax] = slice(1, None)
        dst[ax] = slice(None, -1)
        shifted[tuple(dst)] += u.values[tuple(src)]
        shifted2 = np.zeros_like(u.values)
        shifted2[tuple(src)] += u.values[tuple(dst)]
        out += shifted + shifted2
    return GridFunction(u.box, out)


@functools.lru_cache(maxsize=32)
def _alternating_phase(n: int) -> np.ndarray:
    k = np.arange(n)
    s = (-1.0) ** k
    return s[:, None, None] * s[None, :, None] * s[None, None, :]


def torus_transform(u: GridFunction, direction: str = "forward") -> GridFunction:
    """Discrete torus Fourier transform on a periodic box.

    Forward: uhat(k) = sum_x u(x) exp(2 pi i k.x / N) with x centered,
    returned in FFT index ordering.  Inverse divides by N^3.
    """
    if u.box.boundary != PERIODIC:
        raise UnsupportedBoundaryError("torus transform requires a periodic box")
    n = u.box.side
    ph = _alternating_phase(n)
    if direction == "forward":
        vals = ph * np.fft.ifftn(u.values) * n**3
    elif direction == "inverse":
        vals = np.fft.fftn(ph * u.values) / n**3
    else:
        raise InvalidInputError(f"direction must be forward or inverse, got {direction!r}")
    return GridFunction(u.box, vals)


def dual_angles(box: LatticeBox) -> np.ndarray:
    """1D dual-grid angles theta_k = 2 pi k / N in FFT ordering."""
    if box.boundary != PERIODIC:
        raise UnsupportedBoundaryError("dual grid requires a periodic box")
    n = box.side
    return 2.0 * np.pi * np.arange(n) / n


def weighted_operator_norm(
    apply,
    sigma_from: float,
    sigma_to: float,
    box: LatticeBox,
    apply_adjoint=None,
    tol: float = 1e-6,
    max_iter: int = 5000,
    seed: int = 7,
) -> float:
    """Largest singular value of W_to o apply o W_from^{-1} by power iteration
    on A*A.

    `apply` maps GridFunction -> GridFunction and must be linear.  If
    `apply_adjoint` is omitted the operator is assumed complex symmetric
    (kernel K(x,y) = K(y,x), true of all resolvents built here), so that
    A* u = conj(A(conj u)).
    """
    w_from = _weight_array(box, float(sigma_from))
    w_to = _weight_array(box, float(sigma_to))

    def big_a(vals):
        u = GridFunction(box, vals / w_from)
        return w_to * apply(u).values

    if apply_adjoint is None:
        def big_a_star(vals):
            u = GridFunction(box, np.conj(vals * w_to))
            return np.conj(apply(u).values) / w_from
    else:
        def big_a_star(vals):
            u = GridFunction(box, vals * w_to)
            return apply_adjoint(u).values / w_from

    rng = np.random.default_rng(seed)
    v = rng.standard_normal(box.shape) + 1j * rng.standard_normal(box.shape)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iter):
        av = big_a(v)
        new_est = float(np.linalg.norm(av))
        if new_est == 0.0:
            return 0.0
        v = big_a_star(av)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0
        v /= nv
        if abs(new_est - est) <= tol * max(new_est, 1e-300):
            return new_est
        est = new_est
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} iterations",
        last_estimate=est,
    )


# ---------------------------------------------------------------------------
# convolution application of translation-invariant kernels


def circulant_apply(kernel_values: np.ndarray, u: GridFunction) -> GridFunction:
    """Apply the periodic convolution u -> sum_y k((x-y) mod N) u(y).

    `kernel_values` is the kernel on the box, indexed like a GridFunction
    (centered coordinates).
    """
    n = u.box.side
    L = u.box.half_width
    k_fft_order = np.roll(kernel_values, -L, axis=(0, 1, 2))
    return GridFunction(
        u.box,
        np.fft.ifftn(np.fft.fftn(k_fft_order) * np.fft.fftn(u.values)),
    )


class ToeplitzOperator:
    """Truncation of an infinite-lattice convolution operator to a box.

    Built from kernel values k(z) on z in [-(N-1), N-1]^3 (N the box side);
    applies u -> sum_{y in box} k(x-y) u(y) by zero-padded FFT.  This is the
    honest finite section of the Z^3 operator, unlike `circulant_apply`
    which wraps around.
    """

    def __init__(self, box: LatticeBox, kernel_fn):
        if box.boundary != PERIODIC:
            raise UnsupportedBoundaryError("ToeplitzOperator requires a periodic box")
        self.box = box
        n = box.side
        m = 2 * n
        zs = np.arange(-(n - 1), n)
        kvals = kernel_fn(zs)
        if kvals.shape != (2 * n - 1,) * 3:
            raise InvalidInputError("kernel_fn must return a (2N-1)^3 array")
        # place k(z) at index z mod 2N; the 2N-1 values never collide
        embed = np.zeros((m, m, m), dtype=np.complex128)
        idx = zs % m
        embed[np.ix_(idx, idx, idx)] = kvals
        self._khat = np.fft.fftn(embed)
        self._n = n

    def __call__(self, u: GridFunction) -> GridFunction:
        n = self._n
        m = 2 * n
        pad = np.zeros((m, m, m), dtype=np.complex128)
        pad[:n, :n, :n] = u.values
        conv = np.fft.ifftn(self._khat * np.fft.fftn(pad))
        return GridFunction(u.box, conv[:n, :n, :n])


# ---------------------------------------------------------------------------
# serialization


def save_csv(u: GridFunction, path):
    """Write (x1, x2, x3, re, im) rows, x3 fastest, with a metadata header."""
    box = u.box
    ax = box.coordinate_axes()
    with open(path, "w") as fh:
        fh.write(f"# latdisp gridfunction L={box.half_width} boundary={box.boundary}\n")
        fh.write("x1,x2,x3,re,im\n")
        for i, x1 in enumerate(ax):
            for j, x2 in enumerate(ax):
                for k, x3 in enumerate(ax):
                    v = u.values[i, j, k]
                    fh.write(f"{x1},{x2},{x3},{v.real:.17g},{v.imag:.17g}\n")


def load_csv(path) -> GridFunction:
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("# latdisp gridfunction"):
            raise InvalidInputError("missing gridfunction metadata header")
        fields = dict(tok.split("=") for tok in header.split()[3:])
        box = LatticeBox(int(fields["L"]), fields["boundary"])
        fh.readline()  # column names
        data = np.loadtxt(fh, delimiter=",")
    u = GridFunction.zeros(box)
    for row in np.atleast_2d(data):
        site = (int(row[0]), int(row[1]), int(row[2]))
        u.values[box.index(site)] = row[3] + 1j * row[4]
    return u


def save_npz(u: GridFunction, path):
    np.savez_compressed(
        path, values=u.values, half_width=u.box.half_width, boundary=u.box.boundary
    )


def load_npz(path) -> GridFunction:
    dat = np.load(path)
    box = LatticeBox(int(dat["half_width"]), str(dat["boundary"]))
    return GridFunction(box, dat["values"])
