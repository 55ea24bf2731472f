"""Perturbed operator H = -Laplacian + V for finitely supported V.

Everything routes through the finite-rank reduction on supp(V): the
resolvent solve uses the |supp V|-dimensional system
(I + G diag(v)) c = (R0 f)|supp, eigenvalues are roots of
det(I + G(mu) diag(v)), and the genericity check inspects the smallest
singular value of I + G(omega_k +- i0) diag(v) at the four critical values.

Two kernel conventions coexist deliberately:

* box-consistent kernels (the box's own dual-grid sum) make the Woodbury
  algebra exact on the box: (H - omega) u = f holds to solver precision,
  and eigenpairs are exact box eigenpairs;
* infinite-lattice kernels (time-integral route) feed the asymptotics
  laboratory, where finite-box dual grids would inject spurious spectral
  resolution limits.

`support_gram` selects the convention with its `box` argument.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .errors import (
    BoundaryCollisionError,
    DomainError,
    NearEigenvalueError,
    ValidationError,
)
from .freeop import (
    OFF_AXIS,
    QuadratureSpec,
    SpectralPoint,
    critical_values,
    free_resolvent_apply,
    free_resolvent_kernel_block,
)
from .lattice import GridFunction, LatticeBox, Potential

EDGE_FLOOR = 1e-3  # eigenvalue search keeps this far from the band edges


@dataclass
class SupportGram:
    """Free-resolvent kernel compressed to supp(V) x supp(V)."""

    sites: tuple
    matrix: np.ndarray
    at: SpectralPoint

    def __post_init__(self):
        n = len(self.sites)
        if self.matrix.shape != (n, n):
            raise ValidationError("gram matrix shape mismatch")


@dataclass
class EigenPair:
    mu: float
    u: GridFunction
    multiplicity: int = 1


@dataclass
class GenericityReport:
    """Smallest singular value of I + G(omega_k +- i0) diag(v) per critical
    value, with condition numbers and an overall verdict."""

    entries: dict
    verdict: str
    thresholds: tuple = (1e-6, 1e-10)


@functools.lru_cache(maxsize=8)
def _phi_grid_box(side: int) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(side) / side
    c = np.cos(ang)
    return 6.0 - 2.0 * (c[:, None, None] + c[None, :, None] + c[None, None, :])


def box_kernel_values(omega: complex, diffs, box: LatticeBox) -> np.ndarray:
    """Box-dual-grid kernel (1/N^3) sum_k exp(-i theta.z) / (phi_k - omega)
    for each difference vector z in `diffs`."""
    n = box.side
    phi = _phi_grid_box(n)
    inv = 1.0 / (phi - omega)
    ang = 2.0 * np.pi * np.arange(n) / n
    out = np.empty(len(diffs), dtype=complex)
    for i, z in enumerate(diffs):
        px = np.exp(-1j * ang * z[0])
        py = np.exp(-1j * ang * z[1])
        pz = np.exp(-1j * ang * z[2])
        out[i] = np.einsum("i,j,k,ijk->", px, py, pz, inv)
    return out / n**3


def support_gram(
    at: SpectralPoint,
    V: Potential,
    quad: QuadratureSpec = QuadratureSpec(),
    box: LatticeBox | None = None,
) -> SupportGram:
    """Gram matrix G[a, b] = R0(at, site_a - site_b) on the support of V."""
    if V.support_size == 0:
        raise ValidationError("support_gram requires a nonempty potential")
    sites = V.sites
    nsup = len(sites)
    diffs = [
        tuple(np.subtract(sites[a], sites[b]))
        for a in range(nsup)
        for b in range(nsup)
    ]
    if box is not None:
        if at.side != OFF_AXIS:
            raise DomainError("box-consistent gram needs an off-axis point")
        vals = box_kernel_values(complex(at.omega), diffs, box)
    else:
        vals = free_resolvent_kernel_block(at, diffs, quad)
    return SupportGram(sites, vals.reshape(nsup, nsup), at)


def _small_system(gram: SupportGram, V: Potential) -> np.ndarray:
    return np.eye(V.support_size) + gram.matrix * V.value_array()[None, :]


def apply_resolvent(
    at: SpectralPoint,
    V: Potential,
    f: GridFunction,
    quad: QuadratureSpec = QuadratureSpec(),
) -> GridFunction:
    """u = R(at) f via the finite-rank reduction; (H - omega) u = f holds on
    the box to solver precision for off-axis omega."""
    g = free_resolvent_apply(at, f, quad)
    if V.support_size == 0:
        return g
    gram = support_gram(at, V, quad, box=f.box)
    a_mat = _small_system(gram, V)
    svals = np.linalg.svd(a_mat, compute_uv=False)
    if svals[-1] < 1e-12 * svals[0]:
        raise NearEigenvalueError(
            "I + G diag(V) is numerically singular (omega at an eigenvalue?)",
            smallest_singular_value=float(svals[-1]),
        )
    g_sup = np.array([g[s] for s in V.sites])
    c = np.linalg.solve(a_mat, g_sup)
    vc = GridFunction.zeros(f.box)
    for s, v, cv in zip(V.sites, V.values, c):
        vc.values[f.box.index(s)] = v * cv
    corr = free_resolvent_apply(at, vc, quad)
    return GridFunction(f.box, g.values - corr.values)


def apply_hamiltonian(V: Potential, u: GridFunction) -> GridFunction:
    from .lattice import apply_discrete_laplacian

    out = apply_discrete_laplacian(u)
    res = GridFunction(u.box, -out.values)
    for s, v in zip(V.sites, V.values):
        idx = u.box.index(s)
        res.values[idx] += v * u.values[idx]
    return res


# ---------------------------------------------------------------------------
# eigenvalues


def _det_on_support(mu: float, V: Potential, box: LatticeBox) -> float:
    gram = support_gram(SpectralPoint.off_axis(complex(mu)), V, box=box)
    a_mat = _small_system(gram, V)
    return float(np.real(np.linalg.det(a_mat)))


def default_search_intervals(V: Potential) -> list[tuple[float, float]]:
    reach = 12.0 + V.max_abs() + 1.0
    lo = max(-100.0, -V.max_abs() - 1.0)
    hi = min(100.0, reach)
    return [(lo, -EDGE_FLOOR), (12.0 + EDGE_FLOOR, hi)]


def find_eigenvalues(
    V: Potential,
    box: LatticeBox,
    search: list | None = None,
    tol: float = 1e-10,
    scan_points: int = 400,
) -> list[EigenPair]:
    """Discrete eigenvalues of -Laplacian + V outside [0, 12] on the box.

    Roots of det(I + G(mu) diag(v)) located by sign-tracked bisection over
    each search interval; eigenfunctions reconstructed from the null vector
    of the small system.  The count never exceeds |supp V|.
    """
    if V.support_size == 0:
        return []
    if search is None:
        search = default_search_intervals(V)
    roots = []
    for lo, hi in search:
        if hi <= lo:
            continue
        if lo > -EDGE_FLOOR and hi < 12.0 + EDGE_FLOOR:
            raise DomainError("search interval overlaps the continuous spectrum")
        grid = np.linspace(lo, hi, scan_points)
        dets = np.array([_det_on_support(m, V, box) for m in grid])
        if dets[0] == 0.0 or dets[-1] == 0.0:
            raise BoundaryCollisionError(
                f"determinant vanishes at a search endpoint of [{lo}, {hi}]"
            )
        for i in np.flatnonzero(np.sign(dets[:-1]) * np.sign(dets[1:]) < 0):
            a, b = grid[i], grid[i + 1]
            fa = dets[i]
            while b - a > tol:
                mid = 0.5 * (a + b)
                fm = _det_on_support(mid, V, box)
                if fm == 0.0:
                    a = b = mid
                    break
                if np.sign(fm) == np.sign(fa):
                    a, fa = mid, fm
                else:
                    b = mid
            roots.append(0.5 * (a + b))

    pairs = []
    for mu in roots:
        gram = support_gram(SpectralPoint.off_axis(complex(mu)), V, box=box)
        a_mat = _small_system(gram, V)
        u_svd, svals, vh = np.linalg.svd(a_mat)
        null_mask = svals < 1e-6 * max(svals[0], 1.0)
        multiplicity = max(int(null_mask.sum()), 1)
        vecs = []
        for j in range(len(svals) - multiplicity, len(svals)):
            c = np.conj(vh[j])
            vc = GridFunction.zeros(LatticeBox(box.half_width, box.boundary))
            for s, v, cv in zip(V.sites, V.values, c):
                vc.values[box.index(s)] = v * cv
            u = free_resolvent_apply(SpectralPoint.off_axis(complex(mu)), vc)
            u = GridFunction(box, -u.values)
            nrm = u.norm()
            if nrm == 0.0:
                continue
            u.values /= nrm
            vecs.append(u)
        # orthonormalise within the eigenspace
        ortho = []
        for u in vecs:
            w = u.values.copy()
            for prev in ortho:
                w -= np.vdot(prev.values, w) * prev.values
            nrm = np.linalg.norm(w)
            if nrm > 1e-8:
                ortho.append(GridFunction(box, w / nrm))
        for u in ortho:
            pairs.append(EigenPair(mu=float(mu), u=u, multiplicity=multiplicity))
    pairs.sort(key=lambda p: p.mu)
    return pairs


def spectral_projection(pairs: list[EigenPair], f: GridFunction) -> GridFunction:
    """Orthogonal projection onto the span of the eigenfunctions."""
    n = len(pairs)
    for i in range(n):
        for j in range(i, n):
            ip = np.vdot(pairs[i].u.values, pairs[j].u.values)
            target = 1.0 if i == j else 0.0
            if abs(ip - target) > 1e-8:
                raise ValidationError(
                    f"eigenpairs not orthonormal: <u{i}, u{j}> = {ip:.3e}"
                )
    out = GridFunction.zeros(f.box)
    for p in pairs:
        out.values += np.vdot(p.u.values, f.values) * p.u.values
    return out


# ---------------------------------------------------------------------------
# genericity


def genericity_check(
    V: Potential, quad: QuadratureSpec = QuadratureSpec()
) -> GenericityReport:
    """Smallest singular value of I + G(omega_k + i0) diag(v) at each
    critical value (the -i0 side gives the same singular values by
    conjugation for real V)."""
    hi, lo = 1e-6, 1e-10
    entries = {}
    if V.support_size == 0:
        for c in critical_values():
            entries[c] = (1.0, 1.0)
        return GenericityReport(entries, "generic")
    for c in critical_values():
        gram = support_gram(SpectralPoint.upper(c), V, quad)
        a_mat = _small_system(gram, V)
        svals = np.linalg.svd(a_mat, compute_uv=False)
        entries[c] = (float(svals[-1]), float(svals[0] / svals[-1]))
    smin = min(v[0] for v in entries.values())
    if smin > hi:
        verdict = "generic"
    elif smin < lo:
        verdict = "degenerate"
    else:
        verdict = "inconclusive"
    return GenericityReport(entries, verdict)
