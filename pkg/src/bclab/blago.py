"""Inner products of final states computed from the DtN operator alone.

For boundary sources f, h on (0, 2T) x Gamma the final-state inner product
<Wf, Wh> = <u^f(T), u^h(T)>_{L^2} (conjugate-linear in the first slot) is

    <Wf, Wh> = f^H Q (Lambda^* J - J Lambda) h,

where Q holds the trapezoid weights, Lambda^* = Q^{-1} Lambda^H Q is the
adjoint for the weighted inner product and J is the time integral operator
with kernel sgn(t - s) 1_L(t, s) / 4 on L = {t + s <= 2T, t, s > 0}.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .wave import DtnOperator, WaveError

log = logging.getLogger(__name__)

PSD_REL = 1e-8


class GramError(ValueError):
    pass


def j_kernel_value(t: float, s: float, T: float) -> float:
    if t <= 0 or s <= 0 or t + s > 2 * T:
        return 0.0
    return float(np.sign(t - s)) / 4.0


def j_kernel_matrix(t: np.ndarray, T: float) -> np.ndarray:
    """Discrete J on time nodes, trapezoid weights folded into the columns.

    Nodes on the cut t + s = 2T get half weight (midpoint of the jump), which
    keeps the quadrature second order; the diagonal is zero by antisymmetry.
    """
    t = np.asarray(t, float)
    dt = t[1] - t[0]
    tt, ss = np.meshgrid(t, t, indexing="ij")
    k = np.sign(tt - ss) / 4.0
    s_sum = tt + ss
    tol = 1e-9 * dt
    k[s_sum > 2 * T + tol] = 0.0
    k[np.abs(s_sum - 2 * T) <= tol] *= 0.5
    k[(tt <= 0) | (ss <= 0)] = 0.0
    w = np.full(t.size, dt)
    w[0] = w[-1] = 0.5 * dt
    return k * w[None, :]


@dataclass
class BlagoForm:
    """Sesquilinear form (f, h) -> <Wf, Wh> built from one DtN operator."""

    op: DtnOperator
    _jt: np.ndarray = field(init=False, repr=False)
    _q: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        tg = self.op.timegrid
        self._jt = j_kernel_matrix(tg.t, tg.T)
        self._q = self.op.weights()

    def _J(self, v: np.ndarray, transpose: bool = False) -> np.ndarray:
        """Apply J (or its transpose) channel-wise; v has shape (size,) or (size, m)."""
        op = self.op
        ne, nt, n = len(op.gamma), op.timegrid.nt, op.n
        flat = v.ndim == 1
        m = 1 if flat else v.shape[1]
        jt = self._jt.T if transpose else self._jt
        r = np.asarray(v).reshape(ne, nt, n * m)
        out = np.stack([jt @ r[e] for e in range(ne)]).reshape(-1, m)
        return out[:, 0] if flat else out

    def lhs_vectors(self, h: np.ndarray) -> np.ndarray:
        """The vector g = Q (Lambda^* J - J Lambda) h, so that <Wf, Wh> = f^H g."""
        lam = self.op.matrix
        q = self._q if h.ndim == 1 else self._q[:, None]
        return lam.conj().T @ (q * self._J(h)) - q * self._J(lam @ h)

    def inner(self, f, h):
        """<Wf, Wh> for stacked source vectors (or matrices of column sources)."""
        f = np.asarray(f, complex)
        h = np.asarray(h, complex)
        return f.conj().T @ self.lhs_vectors(h)

    def gram_rows(self, rows) -> np.ndarray:
        """Rows ``rows`` of the hat-basis Gram matrix, i.e. <W e_r, W e_q> for all q."""
        op = self.op
        lam = op.matrix
        q = self._q
        rows = np.asarray(rows, int)
        ne, nt, n = len(op.gamma), op.timegrid.nt, op.n
        # <W e_r, W e_q> = (Lambda e_r)^H Q J e_q - (Q J Lambda)[r, q]
        a = self._J(q[:, None] * lam[:, rows], transpose=True).conj().T
        e, rem = np.divmod(rows, nt * n)
        i, k = np.divmod(rem, n)
        ti = np.unique(i)
        lam4 = lam.reshape(ne, nt, n, -1)
        jl = np.einsum("ij,ejkq->eikq", self._jt[ti], lam4, optimize=True)
        b = jl[e, np.searchsorted(ti, i), k]
        return a - q[rows, None] * b


def _check_vec(op: DtnOperator, v):
    v = np.asarray(v, complex)
    if v.shape[0] != op.size:
        raise WaveError(f"source vector length {v.shape[0]} does not match DtN size {op.size}")
    return v


def connecting_gram(op: DtnOperator, f, h) -> complex:
    """<Wf, Wh> from boundary data only.

    ``f`` and ``h`` are lists of boundary signals or stacked vectors.
    """
    fv = _check_vec(op, f if isinstance(f, np.ndarray) else op.stack(f))
    hv = _check_vec(op, h if isinstance(h, np.ndarray) else op.stack(h))
    return complex(BlagoForm(op).inner(fv, hv))


@dataclass(frozen=True)
class GramTable:
    matrix: np.ndarray
    asymmetry: float = 0.0
    clipped: float = 0.0


def hermitian_psd(g: np.ndarray, label: str = "gram") -> GramTable:
    """Symmetrize, then clip eigenvalues below -1e-8 trace to zero (logged)."""
    asym = float(np.max(np.abs(g - g.conj().T))) if g.size else 0.0
    g = 0.5 * (g + g.conj().T)
    if asym > 1e-10 * max(1.0, float(np.max(np.abs(g)) if g.size else 0.0)):
        log.info("%s: symmetrized, asymmetry %.3e", label, asym)
    clipped = 0.0
    if g.size:
        w, v = np.linalg.eigh(g)
        eps = PSD_REL * max(float(np.real(np.trace(g))), 0.0)
        if w.min() < 0:
            clipped = float(-w.min())
            if clipped > eps:
                log.warning("%s: negative eigenvalue %.3e beyond tolerance %.3e", label, w.min(), eps)
            w = np.clip(w, 0.0, None)
            g = (v * w) @ v.conj().T
    return GramTable(g, asym, clipped)


def gram_table(op: DtnOperator, sources) -> GramTable:
    """Pairwise <Wf_i, Wf_j> for a list of sources (signal lists or stacked vectors)."""
    if not len(sources):
        return GramTable(np.zeros((0, 0), complex))
    cols = [s if isinstance(s, np.ndarray) else op.stack(s) for s in sources]
    F = np.stack([_check_vec(op, c) for c in cols], axis=1)
    return hermitian_psd(BlagoForm(op).inner(F, F))


def cauchy_test(op: DtnOperator, sources, tol: float, tail: int | None = None):
    """Decide whether (W f_j) is Cauchy from Gram data alone.

    Returns ``(is_cauchy, max_tail_distance_sq)``.  The tail is the last
    ``tail`` members (default: second half of the sequence).
    """
    cols = [s if isinstance(s, np.ndarray) else op.stack(s) for s in sources]
    F = np.stack([_check_vec(op, c) for c in cols], axis=1)
    g = BlagoForm(op).inner(F, F)
    g = 0.5 * (g + g.conj().T)
    m = g.shape[0]
    tail = max(2, m // 2) if tail is None else tail
    idx = range(max(0, m - tail), m)
    eps = PSD_REL * max(float(np.real(np.trace(g))), 1e-300)
    worst = 0.0
    for i in idx:
        for j in idx:
            d = float(np.real(g[i, i] - 2 * g[i, j] + g[j, j]))
            if d < -eps:
                raise GramError(f"negative squared distance {d:.3e}: quadrature failure")
            worst = max(worst, d)
    return worst <= tol, worst
