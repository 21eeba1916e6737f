"""Elliptic Dirichlet-to-Neumann maps of the transversal operator P0.

On the cylinder R x [0, L] with the product connection dt + A0, the operator
-d_t^2 + P0 separates: u(t, x) = exp(ikt) v(x) solves (-d_t^2 + P0 - lam) u = 0
exactly when (P0 - (lam - k^2)) v = 0, so

    Lambda(lam)(exp(ikt) h) = exp(ikt) Lambda0(lam - k^2) h.

P0 is assembled with the staggered covariant difference of the wave module,
P0 = D_I^H D_I on interior nodes (D_I the columns of D at interior nodes), so
it is Hermitian by construction.  Neumann values use the interior normal:
d_x + A0 at x = 0 and -(d_x + A0) at x = L.  They are read off as the
discrete boundary flux of the same form,

    N(v) = -(h D_B^H D v - mu (h / 2) v_B),

(D_B the boundary columns, trapezoid mass at the ends) which is second-order
accurate and makes Lambda0(mu) exactly Hermitian for real mu.  The one-sided
trace stencil of the wave module is available as ``neumann="trace"``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .bundle import ConnectionField, d_dx_4th

log = logging.getLogger(__name__)

POLE_DIST = 1e-6
CROSS_TOL = 1e-8


class CylinderError(ValueError):
    pass


class PoleError(CylinderError):
    """Spectral parameter on or too close to the Dirichlet spectrum."""

    def __init__(self, mu: float, nearest: float, index: int):
        self.mu, self.nearest, self.index = mu, nearest, index
        super().__init__(f"mu={mu:.12g} is within {abs(mu - nearest):.3e} of "
                         f"Dirichlet eigenvalue lambda_{index + 1}={nearest:.12g}")


def _difference_matrix(A: ConnectionField) -> sps.csr_matrix:
    """D: nodal sections (nx*n) -> midpoint values ((nx-1)*n)."""
    h = A.grid.h
    n = A.rank
    amid = A.midpoints()
    eye = np.eye(n)
    m = amid.shape[0]
    lo = -eye / h + 0.5 * amid            # coefficient of u_i
    hi = eye / h + 0.5 * amid             # coefficient of u_{i+1}
    rows, cols, vals = [], [], []
    bi, bj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    for i in range(m):
        for off, blk in ((0, lo[i]), (1, hi[i])):
            rows.append(i * n + bi.ravel())
            cols.append((i + off) * n + bj.ravel())
            vals.append(blk.ravel())
    return sps.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(m * n, (m + 1) * n))


@dataclass
class TransversalOperator:
    """Dirichlet P0 = nabla0^* nabla0 for the connection A0 (no potential)."""

    A0: ConnectionField
    matrix: sps.csr_matrix = field(init=False, repr=False)
    coupling: sps.csr_matrix = field(init=False, repr=False)
    flux: sps.csr_matrix = field(init=False, repr=False)
    _eig: tuple | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        n, nx = self.A0.rank, self.A0.grid.nx
        D = _difference_matrix(self.A0)
        interior = np.arange(n, (nx - 1) * n)
        bnd = np.r_[np.arange(n), np.arange((nx - 1) * n, nx * n)]
        DI = D[:, interior]
        self.matrix = (DI.conj().T @ DI).tocsr()
        # P_full u restricted to interior rows, boundary-value columns
        self.coupling = (DI.conj().T @ D[:, bnd]).tocsr()
        self.flux = (D[:, bnd].conj().T @ D).tocsr() * self.A0.grid.h
        dev = abs(self.matrix - self.matrix.conj().T).max() if self.matrix.nnz else 0.0
        if dev > 1e-10 * max(1.0, abs(self.matrix).max()):
            raise CylinderError(f"discrete P0 not Hermitian: {dev:.3e}")

    @property
    def n(self) -> int:
        return self.A0.rank

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def eig(self):
        """Full eigendecomposition (cached), eigenvalues ascending."""
        if self._eig is None:
            try:
                w, q = sla.eigh(self.matrix.toarray())
            except sla.LinAlgError as exc:  # pragma: no cover
                raise CylinderError(f"eigensolver failed: {exc}") from exc
            self._eig = (w, q)
        return self._eig

    def check_off_spectrum(self, mu: float):
        w, _ = self.eig()
        j = int(np.argmin(np.abs(w - mu)))
        if abs(w[j] - mu) <= POLE_DIST:
            raise PoleError(float(mu), float(w[j]), j)
        return float(abs(w[j] - mu))

    def traces(self, v: np.ndarray, mu: float = 0.0, neumann: str = "flux") -> np.ndarray:
        """Covariant Neumann values (interior normal) of full nodal v (nx, n)."""
        h = self.A0.grid.h
        if neumann == "flux":
            vb = np.concatenate([v[0], v[-1]])
            return -(self.flux @ v.ravel() - mu * 0.5 * h * vb)
        if neumann != "trace":
            raise ValueError(f"neumann must be 'flux' or 'trace', got {neumann!r}")
        a0, aL = self.A0.coeff[0], self.A0.coeff[-1]
        left = (-3 * v[0] + 4 * v[1] - v[2]) / (2 * h) + a0 @ v[0]
        right = -(3 * v[-1] - 4 * v[-2] + v[-3]) / (2 * h) - aL @ v[-1]
        return np.concatenate([left, right])


def transversal_operator(A0: ConnectionField) -> TransversalOperator:
    return TransversalOperator(A0)


def dirichlet_spectrum(P0: TransversalOperator, count: int) -> np.ndarray:
    """Lowest ``count`` Dirichlet eigenvalues of the discrete P0, ascending."""
    if not 1 <= count <= P0.size:
        raise CylinderError(f"count must lie in [1, {P0.size}], got {count}")
    return P0.eig()[0][:count].copy()


def _boundary_vector(P0: TransversalOperator, h) -> np.ndarray:
    h = np.asarray(h, complex).reshape(-1)
    if h.size != 2 * P0.n:
        raise CylinderError(f"boundary data must have {2 * P0.n} entries (left then right)")
    return h


def _assemble(P0: TransversalOperator, interior: np.ndarray, h: np.ndarray) -> np.ndarray:
    n = P0.n
    v = np.empty((P0.A0.grid.nx, n), complex)
    v[0], v[-1] = h[:n], h[n:]
    v[1:-1] = interior.reshape(-1, n)
    return v


def dirichlet_solution(P0: TransversalOperator, mu: float, h, method: str = "direct") -> np.ndarray:
    """Nodal solution of (P0 - mu) v = 0 with v(0), v(L) given by h."""
    P0.check_off_spectrum(mu)
    h = _boundary_vector(P0, h)
    rhs = -(P0.coupling @ h)
    if method == "direct":
        M = (P0.matrix - mu * sps.identity(P0.size, format="csr")).tocsc()
        x = spla.spsolve(M, rhs)
    elif method == "spectral":
        w, q = P0.eig()
        x = q @ ((q.conj().T @ rhs) / (w - mu))
    else:
        raise ValueError(f"method must be 'direct' or 'spectral', got {method!r}")
    return _assemble(P0, np.asarray(x, complex), h)


@dataclass
class EllipticDtn:
    mu: float
    values: np.ndarray          # (2n,) left then right
    spectral: np.ndarray
    cross_check: float


def elliptic_dtn(P0: TransversalOperator, mu: float, h, tol: float | None = CROSS_TOL,
                 neumann: str = "flux") -> EllipticDtn:
    """Covariant Neumann values of the solution with Dirichlet values h.

    Computed by a sparse direct solve and by the eigen-expansion; the two
    must agree to ``tol`` relative to the data.  ``tol=None`` skips the
    cross-check (used for the deliberately ill-conditioned pole sweep).
    """
    mu = float(mu)
    vd = dirichlet_solution(P0, mu, h, "direct")
    if tol is None:
        nd = P0.traces(vd, mu, neumann)
        return EllipticDtn(mu, nd, nd, float("nan"))
    vs = dirichlet_solution(P0, mu, h, "spectral")
    nd, ns = P0.traces(vd, mu, neumann), P0.traces(vs, mu, neumann)
    scale = max(1.0, float(np.max(np.abs(nd))))
    gap = float(np.max(np.abs(nd - ns))) / scale if nd.size else 0.0
    if gap > tol:
        raise CylinderError(f"direct and spectral DtN disagree by {gap:.3e} at mu={mu}")
    return EllipticDtn(mu, nd, ns, gap)


def dtn_matrix(P0: TransversalOperator, mu: float, tol: float | None = CROSS_TOL) -> np.ndarray:
    """Lambda0(mu) as a (2n, 2n) matrix acting on stacked boundary values."""
    cols = [elliptic_dtn(P0, mu, e, tol).values for e in np.eye(2 * P0.n)]
    return np.array(cols).T


def _separated_residual(P0: TransversalOperator, v: np.ndarray, lam: float, k: float) -> float:
    """Residual of u = exp(ikt) v(x) in (-d_t^2 - (d_x + A)^2 - lam) u = 0.

    Uses stencils independent of the assembly: a 4th-order covariant first
    derivative applied twice in x and a second difference in t with step h,
    evaluated on the t = 0 slice away from the ends.
    """
    A = P0.A0.coeff
    hx = P0.A0.grid.h
    t = np.array([-hx, 0.0, hx])
    u = np.exp(1j * k * t)[:, None, None] * v[None]
    utt = (u[2] - 2 * u[1] + u[0]) / hx ** 2
    cov = d_dx_4th(v, hx) + np.einsum("xij,xj->xi", A, v)
    cov2 = d_dx_4th(cov, hx) + np.einsum("xij,xj->xi", A, cov)
    res = -utt - cov2 - lam * v
    return float(np.max(np.abs(res[3:-3])) / max(1.0, np.max(np.abs(v))))


def cylinder_dtn_separated(P0: TransversalOperator, lam: float, k: int, h, nt: int = 64) -> np.ndarray:
    """Lambda(lam) applied to exp(ikt) h on a periodic t-grid, shape (nt, 2n).

    The boundary datum is decomposed into t-Fourier modes and each mode m
    is mapped by Lambda0(lam - m^2); the cylinder itself is never meshed.
    """
    h = _boundary_vector(P0, h)
    t = np.arange(nt) * 2 * np.pi / nt
    data = np.exp(1j * k * t)[:, None] * h[None]
    spec = np.fft.fft(data, axis=0)
    modes = np.fft.fftfreq(nt, 1.0 / nt)
    out = np.zeros_like(spec)
    for j, m in enumerate(modes):
        if np.max(np.abs(spec[j])) > 1e-12 * np.max(np.abs(spec)):
            out[j] = elliptic_dtn(P0, lam - m ** 2, spec[j]).values
    return np.fft.ifft(out, axis=0)


def cylinder_relation_check(P0: TransversalOperator, lam: float, ks, h, pairs=None,
                            pole_steps: int = 6, nt: int = 32) -> dict:
    """Verify Lambda0(lam - k^2) h = exp(-ikt) Lambda(lam)(exp(ikt) h).

    Parameters
    ----------
    lam : float
        Real spectral parameter below lambda_1.
    ks : iterable of int
        Transversal frequencies.
    pairs : optional list of ((lam, k), (lam', k')) with lam - k^2 = lam' - k'^2
        Cross-consistency pairs; by default every k > 0 is paired with
        (lam - k^2, 0).

    Returns
    -------
    dict with the relation error, cross-consistency, separated-solution
    residuals, the quadratic-form family <h, Lambda0(mu) h> and its
    monotonicity, symmetry defect and the fitted pole constant.
    """
    lam = float(lam)
    ks = [int(k) for k in ks]
    h = _boundary_vector(P0, h)
    lam1 = float(dirichlet_spectrum(P0, 1)[0])
    if lam >= lam1:
        raise CylinderError(f"lambda={lam} must lie below lambda_1={lam1}")
    rel_err, sep_res, forms, mus, cross_dtn = [], [], [], [], []
    t = np.arange(nt) * 2 * np.pi / nt
    for k in ks:
        mu = lam - k ** 2
        d = elliptic_dtn(P0, mu, h)
        cyl = cylinder_dtn_separated(P0, lam, k, h, nt)
        back = np.exp(-1j * k * t)[:, None] * cyl
        rel_err.append(float(np.max(np.abs(back - d.values[None]))))
        v = dirichlet_solution(P0, mu, h)
        sep_res.append(_separated_residual(P0, v, lam, k))
        forms.append(float(np.real(np.vdot(h, d.values))))
        mus.append(mu)
        cross_dtn.append(d.values)
    if pairs is None:
        pairs = [((lam, k), (lam - k ** 2, 0)) for k in ks if k != 0]
    cross = 0.0
    for (l1, k1), (l2, k2) in pairs:
        if abs((l1 - k1 ** 2) - (l2 - k2 ** 2)) > 1e-12 * max(1.0, abs(l1)):
            raise CylinderError(f"pair {(l1, k1)}, {(l2, k2)} has different lam - k^2")
        a = np.exp(-1j * k1 * t)[:, None] * cylinder_dtn_separated(P0, l1, k1, h, nt)
        b = np.exp(-1j * k2 * t)[:, None] * cylinder_dtn_separated(P0, l2, k2, h, nt)
        cross = max(cross, float(np.max(np.abs(a - b))))
    order = np.argsort(mus)
    f_sorted = np.asarray(forms)[order]
    # interior normal: the quadratic form increases with mu
    increasing = bool(np.all(np.diff(f_sorted) > 0)) if len(forms) > 1 else True
    L0 = dtn_matrix(P0, lam)
    sym = float(np.max(np.abs(L0 - L0.conj().T)))
    deltas = 10.0 ** -np.arange(1, pole_steps + 1) * max(lam1, 1.0)
    deltas = deltas[deltas > 10 * POLE_DIST]
    norms = np.array([np.linalg.norm(dtn_matrix(P0, lam1 - d, None), 2) for d in deltas])
    growth = norms * deltas
    return {
        "lambda": lam,
        "lambda_1": lam1,
        "k": ks,
        "mu": mus,
        "relation_error": max(rel_err) if rel_err else 0.0,
        "cross_consistency": cross,
        "separated_residual": sep_res,
        "quadratic_form": forms,
        "monotone_increasing_in_mu": increasing,
        "symmetry_defect": sym,
        "pole_constant": float(np.min(growth)) if growth.size else None,
        "pole_growth_positive": bool(growth.size and np.min(growth) > 0),
        "direct_spectral_gap": max(elliptic_dtn(P0, m, h).cross_check for m in mus),
    }
