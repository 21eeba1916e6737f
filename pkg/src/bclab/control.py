"""Boundary control from Gram data: domains of influence, Tikhonov control,
shell localization and interior frames.

Everything here consumes inner products <Wf, Wh> of final states.  In data
mode they come from the DtN operator through the Blagovestchenskii form; in
oracle mode they are read off simulated interior states, which gives every
data-only step a twin for verification.

Control sources are cubic B-splines in time with knots on a uniform ladder
t_j = T - j*delta.  The spline with start T - j*delta steers a final state
supported in M(Gamma, j*delta), so nested prefixes of the basis span the
controllable spaces of the cut ladder r_m = m*delta.  Raw time hats are
avoided because the discrete Gram is inaccurate near the grid frequency.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from scipy.interpolate import BSpline

from .blago import BlagoForm, GramError, hermitian_psd
from .wave import ENDPOINTS, DtnOperator, WaveError, source_states

log = logging.getLogger(__name__)

ALPHA_LADDER = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)
K_SCHEDULE = (2, 4, 8, 16)
COND_MAX = 1e6


class ControlError(RuntimeError):
    pass


# --- domains of influence ----------------------------------------------------

@dataclass(frozen=True)
class InfluenceDomain:
    """M(Gamma, h) on [0, L] as a sorted union of closed intervals."""

    length: float
    radii: dict
    intervals: tuple

    def contains(self, x: float, tol: float = 1e-12) -> bool:
        return any(a - tol <= x <= b + tol for a, b in self.intervals)

    def includes(self, other: "InfluenceDomain", tol: float = 1e-12) -> bool:
        return all(any(a - tol <= c and d <= b + tol for a, b in self.intervals)
                   for c, d in other.intervals)

    @property
    def measure(self) -> float:
        return float(sum(b - a for a, b in self.intervals))


def influence_domain(gamma, h, length: float) -> InfluenceDomain:
    """M(Gamma, h) = {x : min_y (d(x, y) - h(y)) <= 0}.

    ``h`` is a scalar radius or a dict endpoint -> radius (the piecewise
    constant case; a point boundary component carries one value).
    """
    gamma = (gamma,) if isinstance(gamma, str) else tuple(gamma)
    radii = {e: float(h[e] if isinstance(h, dict) else h) for e in gamma}
    pieces = []
    for e, r in radii.items():
        if e not in ENDPOINTS:
            raise WaveError(f"unknown endpoint {e!r}")
        if r < 0:
            raise WaveError(f"negative radius {r} at {e}")
        pieces.append((0.0, min(r, length)) if e == "left" else (max(0.0, length - r), length))
    pieces.sort()
    merged = []
    for a, b in pieces:
        if merged and a <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], b))
        else:
            merged.append((a, b))
    return InfluenceDomain(float(length), radii, tuple(merged))


def distance_to(x: float, endpoint: str, length: float) -> float:
    return float(x if endpoint == "left" else length - x)


@dataclass(frozen=True)
class Shell:
    """X_k = M(Y, s + 1/k) minus M(Gamma, s), with Y the endpoint nearest x."""

    x: float
    k: int
    endpoint: str
    s: float
    lo: float
    hi: float

    @property
    def volume(self) -> float:
        return self.hi - self.lo

    def widened(self, pad: float) -> tuple:
        return self.lo - pad, self.hi + pad


def make_shell(x: float, k: int, gamma, length: float) -> Shell:
    gamma = (gamma,) if isinstance(gamma, str) else tuple(gamma)
    e = min(gamma, key=lambda g: distance_to(x, g, length))
    s = distance_to(x, e, length)
    w = min(1.0 / k, length - s)
    if e == "left":
        lo, hi = s, s + w
    else:
        lo, hi = length - s - w, length - s
    return Shell(float(x), int(k), e, s, lo, hi)


# --- source basis and Gram access --------------------------------------------

@dataclass(frozen=True)
class SplineBasis:
    """Cubic B-spline sources on the cut ladder, stacked in DtN layout.

    Columns are ordered by ladder index j, then endpoint, then fiber, so that
    the sources controlling M(Gamma, m*delta) form the first ``prefix(m)``
    columns.
    """

    matrix: np.ndarray
    j: np.ndarray
    endpoint: np.ndarray
    fiber: np.ndarray
    delta: float
    steps: int

    @property
    def count(self) -> int:
        return self.matrix.shape[1]

    @property
    def ladder(self) -> int:
        return int(self.j.max()) if self.j.size else 0

    def prefix(self, m: int) -> int:
        return int(np.searchsorted(self.j, m, side="right"))

    def select(self, endpoint: str | None, r: float) -> np.ndarray:
        """Columns whose sources act within time r of T (from ``endpoint``)."""
        ok = self.j * self.delta <= r + 1e-9 * self.delta
        if endpoint is not None:
            ok &= self.endpoint == endpoint
        return np.flatnonzero(ok)


def spline_basis(op: DtnOperator, steps: int = 2, radius: float | None = None) -> SplineBasis:
    """Spline sources with knot spacing ``steps * dt`` up to the given radius."""
    tg = op.timegrid
    if steps < 1:
        raise WaveError("spline spacing must be at least one time step")
    delta = steps * tg.dt
    radius = tg.T if radius is None else min(radius, tg.T)
    jmax = int(np.floor(radius / delta + 1e-9))
    t = tg.t
    live = t <= tg.T + 1e-12 * tg.T
    cols, js, es, ks = [], [], [], []
    for j in range(1, jmax + 1):
        start = tg.T - j * delta
        if start <= 0:
            break
        knots = start + delta * np.arange(5)
        b = np.nan_to_num(BSpline.basis_element(knots, extrapolate=False)(t))
        b[~live] = 0.0
        for e in op.gamma:
            for k in range(op.n):
                v = np.zeros(op.size)
                v[[op.index(e, i, k) for i in range(tg.nt)]] = b
                cols.append(v)
                js.append(j)
                es.append(e)
                ks.append(k)
    mat = np.array(cols).T if cols else np.zeros((op.size, 0))
    return SplineBasis(mat, np.array(js, int), np.array(es), np.array(ks, int), delta, steps)


@dataclass
class ControlSpace:
    """Gram data of the spline sources and cross products with other sources.

    ``mode="data"`` uses only the DtN operator; ``mode="oracle"`` simulates
    the final states (requires ``fields=(A, V)``) and is the reference twin.
    """

    op: DtnOperator
    steps: int = 2
    radius: float | None = None
    mode: str = "data"
    fields: tuple | None = None
    basis: SplineBasis = field(init=False)
    gram: np.ndarray = field(init=False, repr=False)
    clipped: float = field(init=False, default=0.0)

    def __post_init__(self):
        if self.mode not in ("data", "oracle"):
            raise ValueError(f"mode must be 'data' or 'oracle', got {self.mode!r}")
        self.basis = spline_basis(self.op, self.steps, self.radius)
        S = self.basis.matrix
        if self.mode == "data":
            self._rows = np.flatnonzero(np.any(S != 0, axis=1))
            self._grows = BlagoForm(self.op).gram_rows(self._rows)
            raw = S[self._rows].T @ (self._grows @ S)
        else:
            if self.fields is None:
                raise ValueError("oracle mode needs fields=(A, V)")
            self._ws = self.states(S)
            raw = self._inner(self._ws, self._ws)
        tab = hermitian_psd(raw, label=f"spline gram ({self.mode})")
        self.gram, self.clipped = tab.matrix, tab.clipped

    # oracle helpers
    def states(self, sources: np.ndarray) -> np.ndarray:
        """Final states W h, shape (nx, n, B); needs the true fields."""
        if self.fields is None:
            raise ControlError("interior states need fields=(A, V)")
        A, V = self.fields
        tg = self.op.timegrid
        return source_states(A, V, self.op.gamma, tg, sources, [tg.mid])[tg.mid]

    def _inner(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        w = self.op.grid.weights()
        return np.einsum("x,xia,xib->ab", w, a.conj(), b, optimize=True)

    def cross(self, sources: np.ndarray) -> np.ndarray:
        """<W s_p, W h> for every spline s_p and every column h of ``sources``."""
        sources = np.asarray(sources, complex)
        flat = sources.ndim == 1
        H = sources[:, None] if flat else sources
        if self.mode == "data":
            out = self.basis.matrix[self._rows].T @ (self._grows @ H)
        else:
            out = self._inner(self._ws, self.states(H))
        return out[:, 0] if flat else out

    def sources(self, coeffs: np.ndarray) -> np.ndarray:
        """Stacked boundary sources for spline coefficient vectors."""
        return self.basis.matrix @ coeffs


# --- Tikhonov control --------------------------------------------------------

def _scale(g: np.ndarray) -> float:
    d = np.real(np.diag(g))
    return float(d.mean()) if d.size else 1.0


def tikhonov_control(space: ControlSpace, target_cross: np.ndarray, r: float,
                     alpha: float, endpoint: str | None = None) -> np.ndarray:
    """Coefficients minimizing ||W f - phi||^2 + alpha ||f||^2 over M(Gamma, r).

    ``target_cross[p] = <W s_p, phi>``.  ``alpha`` is relative to the mean
    diagonal of the Gram block.  Returns a full-length coefficient vector.
    """
    idx = space.basis.select(endpoint, r)
    out = np.zeros((space.basis.count,) + np.shape(target_cross)[1:], complex)
    if idx.size == 0:
        return out
    g = space.gram[np.ix_(idx, idx)]
    a = alpha * _scale(g)
    out[idx] = sla.solve(g + a * np.eye(idx.size), np.asarray(target_cross)[idx], assume_a="pos")
    return out


@dataclass(frozen=True)
class TikhonovResult:
    coeffs: np.ndarray
    leakage: float
    fraction: float
    mu: np.ndarray
    localizable: bool


def tikhonov_project(G_big: np.ndarray, G_cross: np.ndarray, alpha: float,
                     target_norm: float = 1.0, count: int = 1) -> TikhonovResult:
    """Smallest-leakage combination of the big family.

    Solves (G_cross G_cross^H + a I) c = mu (G_big + a I) c with a = alpha
    times the mean diagonal of ``G_big``.  ``G_cross[p, i] = <W f_p, W h_i>``
    against an orthonormalized small family, so c^H G_cross G_cross^H c is the
    squared norm of the part of W f inside the small span.  Returns the
    ``count`` smallest eigenvectors, scaled to c^H G_big c = target_norm.
    """
    G_big = np.asarray(G_big, complex)
    m = G_big.shape[0]
    if m == 0:
        raise ControlError("empty big family")
    if alpha <= 0:
        raise ControlError("alpha must be positive (the big Gram is numerically singular)")
    a = alpha * max(_scale(G_big), 1e-300)
    G_cross = np.asarray(G_cross, complex).reshape(m, -1)
    if G_cross.shape[1] == 0:
        w, v = np.linalg.eigh(G_big)
        c = v[:, ::-1][:, :count]
        mu = np.zeros(count)
    else:
        K = G_cross @ G_cross.conj().T
        try:
            mu, v = sla.eigh(K + a * np.eye(m), G_big + a * np.eye(m))
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise ControlError(f"generalized eigensolver failed: {exc}") from exc
        c = v[:, :count]
        mu = mu[:count]
    norms = np.real(np.einsum("ip,pq,qi->i", c.conj().T, G_big, c))
    c = c * np.sqrt(target_norm / np.maximum(norms, 1e-300))
    if G_cross.shape[1]:
        leak = np.real(np.einsum("ip,pq,qi->i", c.conj().T, G_cross @ G_cross.conj().T, c))
    else:
        leak = np.zeros(c.shape[1])
    frac = leak / target_norm
    ok = bool(frac[0] < 0.5)
    if not ok:
        log.warning("no localizable component: leakage fraction %.3f", frac[0])
    coeffs = c[:, 0] if count == 1 else c
    return TikhonovResult(coeffs, float(leak[0]), float(frac[0]), np.asarray(mu), ok)


def _orthonormal_small(g_small: np.ndarray, rel: float = 1e-10) -> np.ndarray:
    """Whitening map K with K^H g_small K = I on the numerically nonzero span."""
    if g_small.shape[0] == 0:
        return np.zeros((0, 0), complex)
    w, v = np.linalg.eigh(g_small)
    keep = w > rel * max(w.max(), 1e-300)
    return v[:, keep] / np.sqrt(w[keep])


# --- shell localizers --------------------------------------------------------

@dataclass
class LocalizerStep:
    k: int
    shell: Shell
    alpha: float
    coeffs: np.ndarray
    leakage: float
    norm: float


@dataclass
class Localizer:
    """Shell-localized sources f_k at x for one reference direction."""

    x: float
    steps: list
    reference: int = 0

    def values(self, cross: np.ndarray) -> np.ndarray:
        """<W f_k, W h> for each shell; ``cross`` from ``ControlSpace.cross``."""
        return np.array([s.coeffs.conj() @ cross for s in self.steps])

    def limit(self, cross: np.ndarray):
        """k -> infinity value by a linear fit in 1/k over the schedule."""
        v = self.values(cross)
        inv = np.array([1.0 / s.k for s in self.steps])
        if len(v) == 1:
            return v[0]
        X = np.stack([np.ones_like(inv), inv], 1)
        coef, *_ = np.linalg.lstsq(X, v.reshape(len(v), -1), rcond=None)
        out = coef[0]
        return out[0] if np.ndim(cross) == 1 else out


def build_localizer(space: ControlSpace, x: float, reference: np.ndarray,
                    schedule=K_SCHEDULE, alphas=ALPHA_LADDER, gamma=None,
                    subspace_tol: float = 0.05) -> list:
    """Shell localizers at x, one per reference source column.

    For each k the big family is the splines from the nearest endpoint
    acting within s + 1/k of T, the small family everything acting within
    d(x, e) of T for each endpoint e.  The localizable subspace is spanned by
    generalized eigenvectors with leakage fraction below ``subspace_tol``;
    inside it the Tikhonov projection of W h_ref is taken, normalized to
    ||W f_k||^2 = 1/|X_k| and phased so <W f_k, W h_ref> > 0.  Alpha comes
    from the ladder by the discrepancy rule (largest alpha whose leakage is at
    most twice the ladder minimum).
    """
    op = space.op
    L = op.grid.length
    gamma = op.gamma if gamma is None else tuple(gamma)
    if min(distance_to(x, e, L) for e in gamma) >= op.timegrid.T:
        raise ControlError(f"x={x} is not reachable before T")
    reference = np.asarray(reference, complex)
    reference = reference[:, None] if reference.ndim == 1 else reference
    ref_cross = space.cross(reference)
    G = space.gram
    b = space.basis
    small = np.concatenate([b.select(e, distance_to(x, e, L)) for e in gamma]) if len(gamma) else []
    small = np.unique(small).astype(int)
    out = [Localizer(float(x), [], q) for q in range(reference.shape[1])]
    for k in schedule:
        sh = make_shell(x, k, gamma, L)
        big = b.select(sh.endpoint, sh.s + sh.volume)
        if big.size == 0:
            raise ControlError(f"no sources reach the shell at x={x}, k={k}")
        Ks = _orthonormal_small(G[np.ix_(small, small)])
        cross = G[np.ix_(big, small)] @ Ks if small.size else np.zeros((big.size, 0))
        Gb = G[np.ix_(big, big)]
        K = cross @ cross.conj().T
        trials = []
        for alpha in alphas:
            a = alpha * _scale(Gb)
            res = _localize(Gb, K, ref_cross[big], a, subspace_tol, sh.volume)
            trials.append((alpha, res))
        leaks = np.array([max(r[1]) for _, r in trials])
        if not np.isfinite(leaks).any():
            raise ControlError(f"x={x}, k={k}: not localizable")
        best = np.nanmin(leaks)
        pick = max((i for i in range(len(trials)) if leaks[i] <= 2 * best + 1e-15),
                   key=lambda i: trials[i][0])
        alpha, (coeffs, leak, norm) = trials[pick]
        if best > 0.5:
            raise ControlError(f"x={x}, k={k}: not localizable (leakage {best:.2f})")
        for q, loc in enumerate(out):
            full = np.zeros(b.count, complex)
            full[big] = coeffs[:, q]
            loc.steps.append(LocalizerStep(k, sh, alpha, full, float(leak[q]), float(norm[q])))
    return out


def _localize(Gb, K, ref_big, a, tol, volume):
    m = Gb.shape[0]
    try:
        mu, v = sla.eigh(K + a * np.eye(m), Gb + a * np.eye(m))
    except (np.linalg.LinAlgError, ValueError):
        q = ref_big.shape[1]
        return np.zeros((m, q)), [np.inf] * q, [0.0] * q
    keep = mu <= tol
    if not keep.any():
        keep = mu <= mu.min() * 2
    E = v[:, keep]
    c = E @ (E.conj().T @ ref_big)
    norm = np.real(np.einsum("pq,pi,qi->i", Gb, c.conj(), c))
    c = c / np.sqrt(np.maximum(norm, 1e-300) * volume)
    ph = np.einsum("pi,pi->i", c.conj(), ref_big)
    c = c * np.exp(1j * np.angle(ph))[None, :]
    normv = np.real(np.einsum("pq,pi,qi->i", Gb, c.conj(), c))
    leak = np.real(np.einsum("pq,pi,qi->i", K, c.conj(), c)) / np.maximum(normv, 1e-300)
    return c, list(leak), list(normv)


# --- interior frames by mollified shells ------------------------------------

def smooth_ramp(t: np.ndarray, a: float, b: float) -> np.ndarray:
    """C-infinity step from 0 (t <= a) to 1 (t >= b)."""
    s = np.clip((np.asarray(t, float) - a) / (b - a), 0.0, 1.0)

    def f(z):
        return np.where(z > 0, np.exp(-1.0 / np.maximum(z, 1e-300)), 0.0)

    return f(s) / (f(s) + f(1 - s))


def reference_sources(op: DtnOperator, endpoint: str | None = None, rise: float | None = None) -> np.ndarray:
    """Frame reference sources psi(t) b_l from one endpoint (size x n).

    psi rises smoothly from 0 at t=0 to 1 at ``rise`` (default T/2) and stays
    there, so W h_l equals b_l at the endpoint and the frame is pinned to the
    standard basis there.
    """
    tg = op.timegrid
    endpoint = op.gamma[0] if endpoint is None else endpoint
    rise = 0.5 * tg.T if rise is None else rise
    psi = smooth_ramp(tg.t, 0.0, rise)
    H = np.zeros((op.size, op.n), complex)
    for k in range(op.n):
        H[[op.index(endpoint, i, k) for i in range(tg.nt)], k] = psi
    return H


def kernel_weights(r: np.ndarray, x: float, sigma: float) -> np.ndarray:
    """Gaussian weights centred at x, tapered smoothly to zero over 3-4 sigma.

    The taper keeps the kernel C-infinity with compact support, so that
    shifting the centre by one grid cell never switches a weight on or off
    abruptly (second differences of evaluations would amplify that jump).
    """
    z = np.abs(np.asarray(r, float) - x) / sigma
    return np.exp(-0.5 * z ** 2) * (1.0 - smooth_ramp(z, 3.0, 4.0))


def kernel_moment(sigma: float, delta: float) -> float:
    """Second moment of the discrete kernel on a lattice of spacing delta."""
    z = np.arange(-int(np.ceil(4 * sigma / delta)), int(np.ceil(4 * sigma / delta)) + 1) * delta
    w = kernel_weights(z, 0.0, sigma)
    return float(np.sum(w * z ** 2) / np.sum(w))


@dataclass
class FrameData:
    """Orthonormal interior frame and its evaluation functionals.

    ``coeffs[i, l]`` are spline coefficients of the mollified-shell source
    for direction l at node i; its final state approximates
    rho_sigma(. - x_i) W h_l.  ``lowdin[i]`` = N(x_i)^{-1/2} with N the node
    Gram, and ``registration[i]`` the unitary applied after Lowdin.
    """

    nodes: np.ndarray
    sigma: float
    coeffs: np.ndarray
    gram: np.ndarray
    lowdin: np.ndarray
    registration: np.ndarray
    table: np.ndarray
    failed: np.ndarray
    alpha: float
    steps: int
    endpoint: str
    mode: str = "data"
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.gram.shape[1]

    def raw(self, cross: np.ndarray) -> np.ndarray:
        """<e_l(x), W h(x)> before orthonormalization, shape (nodes, n, cols)."""
        cross = np.asarray(cross)
        c = cross[:, None] if cross.ndim == 1 else cross
        return np.einsum("ilp,pc->ilc", self.coeffs.conj(), c, optimize=True)

    def represent(self, cross: np.ndarray) -> np.ndarray:
        """Frame components of W h at each node, shape (nodes, n, cols)."""
        mats = np.einsum("iab,ibc->iac", self.registration, self.lowdin)
        out = np.einsum("iab,ibc->iac", mats, self.raw(cross))
        cross = np.asarray(cross)
        return out[..., 0] if cross.ndim == 1 else out


def _inv_sqrt(m: np.ndarray):
    w, v = np.linalg.eigh(0.5 * (m + m.conj().T))
    if w.min() <= 0:
        return None, np.inf
    return (v / np.sqrt(w)) @ v.conj().T, float(w.max() / w.min())


def polar_unitary(m: np.ndarray) -> np.ndarray:
    u, _, vh = np.linalg.svd(m)
    return u @ vh


def cut_projections(space: ControlSpace, cross: np.ndarray, alpha: float,
                    endpoint: str | None = None) -> np.ndarray:
    """Tikhonov projections onto M(Gamma, m*delta) for every ladder cut m.

    Returns coefficients of shape (ladder + 1, basis count, cols); entry 0
    is the empty cut.  The regularization is alpha times the mean diagonal of
    the full Gram, so all cuts share one Cholesky factor.
    """
    b = space.basis
    idx = np.arange(b.count) if endpoint is None else np.flatnonzero(b.endpoint == endpoint)
    G = space.gram[np.ix_(idx, idx)]
    a = alpha * _scale(G)
    try:
        Lc = np.linalg.cholesky(G + a * np.eye(idx.size))
    except np.linalg.LinAlgError as exc:
        raise GramError(f"regularized Gram not positive definite: {exc}") from exc
    rhs = np.asarray(cross)[idx]
    jsel = b.j[idx]
    out = np.zeros((b.ladder + 1, b.count, rhs.shape[1]), complex)
    for m in range(1, b.ladder + 1):
        p = int(np.searchsorted(jsel, m, side="right"))
        if p == 0:
            continue
        y = sla.solve_triangular(Lc[:p, :p], rhs[:p], lower=True)
        out[m, idx[:p]] = sla.solve_triangular(Lc[:p, :p].conj().T, y, lower=False)
    return out


def frame_nodes(space: ControlSpace, sigma: float, spacing: float | None = None,
                margin: float | None = None, endpoint: str | None = None) -> np.ndarray:
    """Grid-aligned evaluation nodes whose kernels fit inside the cut ladder."""
    op = space.op
    b = space.basis
    h = op.grid.h
    endpoint = op.gamma[0] if endpoint is None else endpoint
    margin = 4 * sigma if margin is None else margin
    step = max(1, int(round((h if spacing is None else spacing) / h)))
    lo = int(np.ceil((margin + b.delta) / h - 1e-9))
    hi = int(np.floor((min(b.ladder * b.delta, op.grid.length) - margin) / h + 1e-9))
    d = np.arange(lo, hi + 1, step) * h
    return d if endpoint == "left" else op.grid.length - d[::-1]


def _kernel_matrix(r: np.ndarray, centers: np.ndarray, sigma: float, delta: float) -> np.ndarray:
    """Rows: normalized kernel weights over ladder midpoints for each center."""
    K = np.stack([kernel_weights(r, c, sigma) for c in centers])
    tot = K.sum(axis=1) * delta
    if np.any(tot <= 0):
        raise ControlError("kernel centre outside the cut ladder")
    return K / tot[:, None]


def build_frame(space: ControlSpace, nodes, reference: np.ndarray | None = None,
                sigma: float = 0.03, alpha: float = 1e-4, register: bool = False,
                endpoint: str | None = None) -> FrameData:
    """Orthonormal frame at interior nodes from Gram data.

    With c_m the projection of W h_l onto M(Gamma, r_m), the differences
    c_m - c_{m-1} steer thin slices of the reference waves e_l = W h_l.  The
    slices are first summed against a kernel to estimate the pointwise
    Gram N(r)[l, q] = <e_l(r), e_q(r)>, corrected for the kernel's second
    moment.  Reweighting every slice by N(r)^{-1/2} turns the reference waves
    into the orthonormal frame F = e N^{-1/2}, and the localizer at x for
    direction l,

        f = sum_m rho(r_m - x) (c_m - c_{m-1}) N(r_m)^{-1/2}[:, l] / sum_m rho(r_m - x) delta,

    has final state close to rho(. - x) F_l.  Evaluations are therefore the
    convolution rho * (F^H u) of the frame components with a fixed kernel.
    """
    op = space.op
    endpoint = op.gamma[0] if endpoint is None else endpoint
    if reference is None:
        reference = reference_sources(op, endpoint)
    n = reference.shape[1]
    b = space.basis
    nodes = np.atleast_1d(np.asarray(nodes, float))
    ref_cross = space.cross(reference)
    C = cut_projections(space, ref_cross, alpha, endpoint)
    dC = np.diff(C, axis=0)                                   # (ladder, count, n)
    rmid = (np.arange(1, b.ladder + 1) - 0.5) * b.delta
    L = op.grid.length
    # pointwise reference Gram on the ladder
    Kr = _kernel_matrix(rmid, rmid, sigma, b.delta)
    slice_vals = np.einsum("mpl,pq->mlq", dC.conj(), ref_cross)  # <slice_l, e_q> per cut
    Nr = np.einsum("rm,mlq->rlq", Kr, slice_vals)
    Nr = 0.5 * (Nr + dagger_last(Nr))
    d2 = np.zeros_like(Nr)
    d2[1:-1] = (Nr[2:] - 2 * Nr[1:-1] + Nr[:-2]) / b.delta ** 2
    d2[0], d2[-1] = d2[1], d2[-2]
    Nr = Nr - 0.5 * kernel_moment(sigma, b.delta) * d2
    Gr = np.zeros_like(Nr)
    conds = np.zeros(rmid.size)
    for m in range(rmid.size):
        s, conds[m] = _inv_sqrt(Nr[m])
        Gr[m] = np.zeros((n, n)) if s is None else s
    # localizers
    dist = np.array([distance_to(x, endpoint, L) for x in nodes])
    Kx = _kernel_matrix(rmid, dist, sigma, b.delta)
    bad_r = conds > COND_MAX
    coeffs = np.einsum("im,mpk,mkl->ilp", Kx, dC, Gr, optimize=True)
    failed = (Kx[:, bad_r] > 0).any(axis=1)
    if failed.any():
        log.warning("%d frame nodes touch rank-deficient reference Grams", int(failed.sum()))
    eye = np.broadcast_to(np.eye(n, dtype=complex), (nodes.size, n, n)).copy()
    fd = FrameData(nodes, float(sigma), coeffs, np.zeros((nodes.size, n, n), complex), eye.copy(),
                   eye.copy(), np.zeros((nodes.size, n, n), complex), failed,
                   float(alpha), b.steps, endpoint, space.mode)
    R = fd.raw(ref_cross)
    steps = eye.copy()
    for i in range(nodes.size - 1):
        steps[i + 1] = polar_unitary(R[i + 1] @ R[i].conj().T)
    if register:
        acc = np.eye(n, dtype=complex)
        for i in range(1, nodes.size):
            acc = acc @ steps[i].conj().T
            fd.registration[i] = acc
    fd.table = fd.represent(ref_cross)
    # node Gram of the frame directions, G^H N G at the node (identity when consistent)
    Gx = np.einsum("im,mab->iab", Kx, Gr) * b.delta
    Nx = np.einsum("im,mab->iab", Kx, Nr) * b.delta
    fd.gram = np.einsum("iba,ibc,icd->iad", Gx.conj(), Nx, Gx)
    dev = float(np.max(np.abs(fd.gram - np.eye(n)))) if nodes.size else 0.0
    if dev > 0.05:
        log.info("frame node Gram deviates from identity by %.3e", dev)
    fd.meta.update(condition=conds, registration_steps=steps, lowdin_deviation=dev,
                   ladder_r=rmid, ladder_gram=Nr)
    return fd


FRAME_MAGIC = "bclab-frame 1"


def write_frame(path, frame: FrameData) -> Path:
    """Text header (blank-line terminated) then little-endian arrays.

    Payload order: nodes (f8), coeffs, lowdin, registration (c16), failed (u1).
    """
    path = Path(path)
    N, n, count = frame.coeffs.shape
    head = {"nodes": N, "n": n, "count": count, "sigma": repr(frame.sigma), "alpha": repr(frame.alpha),
            "steps": frame.steps, "endpoint": frame.endpoint, "mode": frame.mode, "endianness": "little"}
    text = FRAME_MAGIC + "\n" + "".join(f"{k}: {v}\n" for k, v in head.items()) + "\n"
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(text.encode("utf-8"))
        fh.write(np.asarray(frame.nodes, "<f8").tobytes())
        for a in (frame.coeffs, frame.lowdin, frame.registration):
            fh.write(np.ascontiguousarray(a, "<c16").tobytes())
        fh.write(np.asarray(frame.failed, "u1").tobytes())
    tmp.replace(path)
    return path


def read_frame(path) -> FrameData:
    raw = Path(path).read_bytes()
    sep = raw.find(b"\n\n")
    if sep < 0 or not raw.startswith(FRAME_MAGIC.encode()):
        raise ControlError(f"{path}: not a frame file")
    head = dict(line.split(": ", 1) for line in raw[:sep].decode("utf-8").splitlines()[1:])
    N, n, count = int(head["nodes"]), int(head["n"]), int(head["count"])
    buf, pos = raw[sep + 2:], 0

    def take(dtype, shape):
        nonlocal pos
        size = int(np.prod(shape)) * np.dtype(dtype).itemsize
        out = np.frombuffer(buf[pos:pos + size], dtype).reshape(shape)
        pos += size
        return out.astype(np.dtype(dtype).newbyteorder("="))

    nodes = take("<f8", (N,))
    coeffs = take("<c16", (N, n, count))
    lowdin = take("<c16", (N, n, n))
    reg = take("<c16", (N, n, n))
    failed = take("u1", (N,)).astype(bool)
    return FrameData(nodes, float(head["sigma"]), coeffs, np.zeros((N, n, n), complex), lowdin, reg,
                     np.zeros((N, n, n), complex), failed, float(head["alpha"]), int(head["steps"]),
                     head["endpoint"], head["mode"])


def dagger_last(m: np.ndarray) -> np.ndarray:
    return np.swapaxes(m, -1, -2).conj()


def shift_sources(op: DtnOperator, sources: np.ndarray, tau_steps: int) -> np.ndarray:
    """Delay stacked sources by ``tau_steps`` time steps: h(t) -> h(t - tau)."""
    sources = np.asarray(sources, complex)
    flat = sources.ndim == 1
    H = sources[:, None] if flat else sources
    ne, nt, n = len(op.gamma), op.timegrid.nt, op.n
    blk = H.reshape(ne, nt, n, -1)
    if tau_steps < 0:
        raise WaveError("shifts must be nonnegative")
    if tau_steps and np.any(blk[:, nt - tau_steps:] != 0):
        raise WaveError(f"shift by {tau_steps} steps pushes the source past 2T")
    out = np.zeros_like(blk)
    out[:, tau_steps:] = blk[:, :nt - tau_steps]
    out = out.reshape(H.shape)
    return out[:, 0] if flat else out


def evaluate_wave(frame: FrameData, space: ControlSpace, sources: np.ndarray, tau_steps: int = 0) -> np.ndarray:
    """Frame components of u^h(T - tau, x) at the frame nodes."""
    return frame.represent(space.cross(shift_sources(space.op, sources, tau_steps)))


# --- oracle diagnostics ------------------------------------------------------

def oracle_mass_outside(state: np.ndarray, grid, lo: float, hi: float) -> float:
    """Fraction of ||state||^2 outside [lo, hi]."""
    w = grid.weights()
    dens = w * np.sum(np.abs(state) ** 2, axis=1)
    inside = (grid.x >= lo - 1e-12) & (grid.x <= hi + 1e-12)
    tot = dens.sum()
    return float(dens[~inside].sum() / tot) if tot > 0 else 0.0


def density_residuals(space: ControlSpace, target: np.ndarray, r: float, alphas=ALPHA_LADDER,
                      endpoint: str | None = None) -> np.ndarray:
    """Oracle residuals ||W f_alpha - phi|| / ||phi|| along the alpha ladder.

    ``target`` is an interior section (nx, n) supported in M(Gamma, r).
    """
    if space.mode != "oracle":
        raise ControlError("density residuals need an oracle space")
    grid = space.op.grid
    phi = np.asarray(target, complex)
    w = grid.weights()
    b_t = np.einsum("x,xip,xi->p", w, space._ws.conj(), phi)
    nphi = np.sqrt(np.real(np.einsum("x,xi,xi->", w, phi.conj(), phi)))
    out = []
    for alpha in alphas:
        c = tikhonov_control(space, b_t, r, alpha, endpoint)
        st = np.einsum("xip,p->xi", space._ws, c)
        d = st - phi
        out.append(np.sqrt(np.real(np.einsum("x,xi,xi->", w, d.conj(), d))) / nphi)
    return np.array(out)


def domination_test(space: ControlSpace, inner_r: dict, outer_r: dict, alpha: float = 1e-6,
                    tol: float = 0.05) -> tuple:
    """Gram test for M(Sigma, s) inside M(Gamma, h).

    Every spline state controlling M(Sigma, s) is projected onto the span of
    the M(Gamma, h) states; the domain is included iff the worst relative
    residual stays below ``tol``.  Returns ``(included, worst)``.
    """
    b = space.basis
    sm = np.unique(np.concatenate([b.select(e, r) for e, r in inner_r.items()] or [[]])).astype(int)
    bg = np.unique(np.concatenate([b.select(e, r) for e, r in outer_r.items()] or [[]])).astype(int)
    if sm.size == 0:
        return True, 0.0
    G = space.gram
    gss = np.real(np.diag(G)[sm])
    if bg.size == 0:
        return False, 1.0
    gbb = G[np.ix_(bg, bg)]
    a = alpha * _scale(gbb)
    gbs = G[np.ix_(bg, sm)]
    sol = sla.solve(gbb + a * np.eye(bg.size), gbs, assume_a="pos")
    proj = np.real(np.einsum("ps,ps->s", gbs.conj(), sol))
    rel = np.maximum(gss - proj, 0.0) / np.maximum(gss, 1e-300)
    worst = float(rel.max())
    return worst <= tol, worst
