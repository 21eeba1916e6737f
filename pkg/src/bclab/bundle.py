"""Trivial rank-n Hermitian bundle over the interval [0, L].

Connection coefficients, potentials, gauge transforms and sections are stored
as nodal samples on a uniform grid.  Arrays are laid out node-first:
matrix fields have shape ``(nx, n, n)`` and sections ``(nx, n)``.

Structural constraints (skew-Hermitian connection, Hermitian potential,
unitary gauge) are enforced by projection when a field is constructed; the
projection residual is logged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

SKEW_TOL = 1e-12
UNITARY_TOL = 1e-10


class BundleError(ValueError):
    """Raised on grid/rank mismatches and violated structure constraints."""


def dagger(m: np.ndarray) -> np.ndarray:
    """Conjugate transpose over the last two axes."""
    return np.conj(np.swapaxes(m, -1, -2))


def antihermitian_part(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m - dagger(m))


def hermitian_part(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + dagger(m))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Grid1D:
    """Uniform grid on [0, length] with ``nx`` nodes (Euclidean metric)."""

    length: float
    nx: int

    def __post_init__(self):
        if not self.length > 0:
            raise BundleError(f"grid length must be positive, got {self.length}")
        if int(self.nx) != self.nx or self.nx < 3:
            raise BundleError(f"grid needs at least 3 nodes, got {self.nx}")

    @property
    def h(self) -> float:
        return self.length / (self.nx - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, self.length, self.nx)

    def weights(self) -> np.ndarray:
        """Trapezoid quadrature weights."""
        w = np.full(self.nx, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Trapezoid integral over the node axis (axis 0)."""
        w = self.weights()
        return np.tensordot(w, values, axes=(0, 0))

    def nearest_index(self, x: float) -> int:
        return int(round(x / self.h))

    @classmethod
    def from_points(cls, x) -> "Grid1D":
        """Rebuild a grid from node coordinates; rejects nonuniform spacing."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 1 or x.size < 3 or abs(x[0]) > 1e-12:
            raise BundleError("node coordinates must start at 0 and have >= 3 entries")
        dx = np.diff(x)
        if np.max(np.abs(dx - dx.mean())) > 1e-9 * max(1.0, x[-1]):
            raise BundleError("nonuniform grids are not supported")
        return cls(float(x[-1]), int(x.size))


def _check_matrix_field(grid: Grid1D, coeff) -> np.ndarray:
    coeff = np.asarray(coeff, dtype=complex)
    if coeff.ndim == 1 and coeff.shape[0] == grid.nx:
        coeff = coeff[:, None, None]
    if coeff.ndim != 3 or coeff.shape[0] != grid.nx or coeff.shape[1] != coeff.shape[2]:
        raise BundleError(
            f"expected matrix field of shape ({grid.nx}, n, n), got {coeff.shape}"
        )
    return coeff


@dataclass(frozen=True)
class ConnectionField:
    """Skew-Hermitian coefficient A1(x) of the connection d + A1 dx."""

    grid: Grid1D
    coeff: np.ndarray
    projection_residual: float = field(default=0.0, compare=False)

    def __post_init__(self):
        raw = _check_matrix_field(self.grid, self.coeff)
        proj = antihermitian_part(raw)
        resid = float(np.max(np.abs(raw - proj))) if raw.size else 0.0
        if resid > SKEW_TOL:
            log.info("connection projected to skew-Hermitian, residual %.3e", resid)
        object.__setattr__(self, "coeff", _frozen(proj))
        object.__setattr__(self, "projection_residual", resid)

    @property
    def rank(self) -> int:
        return self.coeff.shape[1]

    @classmethod
    def zero(cls, grid: Grid1D, n: int) -> "ConnectionField":
        return cls(grid, np.zeros((grid.nx, n, n), complex))

    def derivative(self) -> np.ndarray:
        return d_dx_4th(self.coeff, self.grid.h)

    def midpoints(self) -> np.ndarray:
        """Cubic interpolation of A1 at the cell midpoints, shape (nx-1, n, n)."""
        return midpoint_values(self.coeff)


@dataclass(frozen=True)
class PotentialField:
    """Hermitian potential V(x)."""

    grid: Grid1D
    coeff: np.ndarray
    projection_residual: float = field(default=0.0, compare=False)

    def __post_init__(self):
        raw = _check_matrix_field(self.grid, self.coeff)
        proj = hermitian_part(raw)
        resid = float(np.max(np.abs(raw - proj))) if raw.size else 0.0
        if resid > SKEW_TOL:
            log.info("potential projected to Hermitian, residual %.3e", resid)
        object.__setattr__(self, "coeff", _frozen(proj))
        object.__setattr__(self, "projection_residual", resid)

    @property
    def rank(self) -> int:
        return self.coeff.shape[1]

    @classmethod
    def zero(cls, grid: Grid1D, n: int) -> "PotentialField":
        return cls(grid, np.zeros((grid.nx, n, n), complex))


@dataclass(frozen=True)
class GaugeTransform:
    """Unitary-valued gauge field U(x)."""

    grid: Grid1D
    samples: np.ndarray
    tol: float = field(default=UNITARY_TOL, compare=False)

    def __post_init__(self):
        u = _check_matrix_field(self.grid, self.samples)
        err = unitarity_defect(u)
        if err > self.tol:
            raise BundleError(f"gauge field is not unitary (defect {err:.3e})")
        object.__setattr__(self, "samples", _frozen(u))

    @property
    def rank(self) -> int:
        return self.samples.shape[1]

    @property
    def boundary_fixed(self) -> bool:
        eye = np.eye(self.rank)
        return bool(
            np.max(np.abs(self.samples[0] - eye)) <= self.tol
            and np.max(np.abs(self.samples[-1] - eye)) <= self.tol
        )

    def inverse(self) -> "GaugeTransform":
        return GaugeTransform(self.grid, dagger(self.samples), self.tol)

    def compose(self, other: "GaugeTransform") -> "GaugeTransform":
        """Pointwise product ``self * other`` (first self, then other)."""
        _same_grid(self.grid, other.grid)
        return GaugeTransform(self.grid, self.samples @ other.samples, self.tol)

    @classmethod
    def identity(cls, grid: Grid1D, n: int) -> "GaugeTransform":
        return cls(grid, np.broadcast_to(np.eye(n, dtype=complex), (grid.nx, n, n)))


@dataclass(frozen=True)
class SectionField:
    grid: Grid1D
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.grid.nx:
            raise BundleError(f"section has {v.shape[0]} samples, grid has {self.grid.nx}")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def rank(self) -> int:
        return self.values.shape[1]


def unitarity_defect(u: np.ndarray) -> float:
    n = u.shape[-1]
    return float(np.max(np.abs(dagger(u) @ u - np.eye(n)))) if u.size else 0.0


def _same_grid(a: Grid1D, b: Grid1D):
    if a != b:
        raise BundleError(f"grid mismatch: {a} vs {b}")


def _same_rank(ra: int, rb: int):
    if ra != rb:
        raise BundleError(f"rank mismatch: {ra} vs {rb}")


# --- finite differences -----------------------------------------------------

def d_dx_4th(f: np.ndarray, h: float) -> np.ndarray:
    """Fourth-order first derivative along axis 0 (one-sided near the ends)."""
    f = np.asarray(f)
    m = f.shape[0]
    if m < 5:
        raise BundleError("fourth-order differences need at least 5 nodes")
    d = np.empty_like(f, dtype=np.result_type(f, float))
    d[2:-2] = (f[:-4] - 8 * f[1:-3] + 8 * f[3:-1] - f[4:]) / (12 * h)
    d[0] = (-25 * f[0] + 48 * f[1] - 36 * f[2] + 16 * f[3] - 3 * f[4]) / (12 * h)
    d[1] = (-3 * f[0] - 10 * f[1] + 18 * f[2] - 6 * f[3] + f[4]) / (12 * h)
    d[-1] = (25 * f[-1] - 48 * f[-2] + 36 * f[-3] - 16 * f[-4] + 3 * f[-5]) / (12 * h)
    d[-2] = (3 * f[-1] + 10 * f[-2] - 18 * f[-3] + 6 * f[-4] - f[-5]) / (12 * h)
    return d


def d_dx_2nd(f: np.ndarray, h: float) -> np.ndarray:
    """Second-order first derivative along axis 0 (one-sided at the ends)."""
    return np.gradient(np.asarray(f), h, axis=0, edge_order=2)


def midpoint_values(f: np.ndarray) -> np.ndarray:
    """Cubic (4-point) interpolation at cell midpoints along axis 0."""
    f = np.asarray(f)
    m = f.shape[0]
    if m < 4:
        return 0.5 * (f[1:] + f[:-1])
    mid = np.empty((m - 1,) + f.shape[1:], dtype=f.dtype)
    mid[1:-1] = (-f[:-3] + 9 * f[1:-2] + 9 * f[2:-1] - f[3:]) / 16
    mid[0] = (5 * f[0] + 15 * f[1] - 5 * f[2] + f[3]) / 16
    mid[-1] = (5 * f[-1] + 15 * f[-2] - 5 * f[-3] + f[-4]) / 16
    return mid


# --- operations ---------------------------------------------------------------

def gauge_transform_connection(A: ConnectionField, U: GaugeTransform) -> ConnectionField:
    """Gauge action B = U^{-1} dU/dx + U^{-1} A U, computed pointwise."""
    _same_grid(A.grid, U.grid)
    _same_rank(A.rank, U.rank)
    u = U.samples
    uinv = dagger(u)
    du = d_dx_4th(u, A.grid.h)
    return ConnectionField(A.grid, uinv @ du + uinv @ A.coeff @ u)


def gauge_transform_potential(V: PotentialField, U: GaugeTransform) -> PotentialField:
    _same_grid(V.grid, U.grid)
    _same_rank(V.rank, U.rank)
    u = U.samples
    return PotentialField(V.grid, dagger(u) @ V.coeff @ u)


def gauge_transform_section(u: SectionField, U: GaugeTransform) -> SectionField:
    """Sections transform as u -> U^{-1} u."""
    _same_grid(u.grid, U.grid)
    return SectionField(u.grid, np.einsum("xji,xj->xi", np.conj(U.samples), u.values))


def covariant_dx(u: SectionField, A: ConnectionField) -> SectionField:
    """Covariant derivative du/dx + A1 u (second-order central differences)."""
    _same_grid(u.grid, A.grid)
    _same_rank(u.rank, A.rank)
    du = d_dx_2nd(u.values, u.grid.h)
    return SectionField(u.grid, du + np.einsum("xij,xj->xi", A.coeff, u.values))


def project_structures(A_raw, V_raw, grid: Grid1D | None = None):
    """Nearest skew-Hermitian / Hermitian fields and the Frobenius distances.

    Returns ``(A, V, dist_A, dist_V)``; distances are the largest pointwise
    Frobenius distance between raw and projected matrices.
    """
    A_raw = np.asarray(A_raw, dtype=complex)
    V_raw = np.asarray(V_raw, dtype=complex)
    if grid is None:
        grid = Grid1D(1.0, A_raw.shape[0])
    A_raw = _check_matrix_field(grid, A_raw)
    V_raw = _check_matrix_field(grid, V_raw)
    A = ConnectionField(grid, A_raw)
    V = PotentialField(grid, V_raw)
    dA = float(np.max(np.linalg.norm(A_raw - A.coeff, axis=(1, 2))))
    dV = float(np.max(np.linalg.norm(V_raw - V.coeff, axis=(1, 2))))
    return A, V, dA, dV


def skew_hermitian_basis(n: int) -> np.ndarray:
    """Real basis of u(n): n^2 skew-Hermitian matrices, orthonormal in Frobenius."""
    basis = []
    for i in range(n):
        e = np.zeros((n, n), complex)
        e[i, i] = 1j
        basis.append(e)
    for i in range(n):
        for j in range(i + 1, n):
            e = np.zeros((n, n), complex)
            e[i, j], e[j, i] = 1, -1
            basis.append(e / np.sqrt(2))
            e = np.zeros((n, n), complex)
            e[i, j] = e[j, i] = 1j
            basis.append(e / np.sqrt(2))
    return np.array(basis)
