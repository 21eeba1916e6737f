"""Parallel transport, Wilson lines and the gauge-orbit decision procedure.

In one dimension every connection is pure gauge on the interval: the
transport u_A solving u' + A u = 0, u(0) = Id, moves A to the temporal gauge
A = 0.  Boundary-fixed orbits of (A, V) are then classified by the Wilson
line u_A(L) together with the transported potential u_A^{-1} V u_A.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import expm, logm
from scipy.optimize import minimize

from .bundle import (
    BundleError,
    ConnectionField,
    GaugeTransform,
    PotentialField,
    d_dx_4th,
    dagger,
    skew_hermitian_basis,
    unitarity_defect,
)

log = logging.getLogger(__name__)


def polar_unitary(m: np.ndarray) -> np.ndarray:
    """Nearest unitary matrix (unitary factor of the polar decomposition)."""
    u, _, vh = np.linalg.svd(m)
    return u @ vh


@dataclass(frozen=True)
class TransportSolution:
    x: np.ndarray
    u: np.ndarray
    drift: float = 0.0

    @property
    def endpoint(self) -> np.ndarray:
        return self.u[-1]


def transport_samples(x: np.ndarray, coeff: np.ndarray, substeps: int = 1) -> TransportSolution:
    """RK4 for u' = -A u from x[0] with u(x[0]) = Id.

    A between nodes comes from a cubic spline through the samples; every
    step is followed by polar re-unitarization.  ``substeps`` refines the
    step to (x[i+1] - x[i]) / substeps.
    """
    x = np.asarray(x, float)
    coeff = np.asarray(coeff, complex)
    n = coeff.shape[1]
    spline = CubicSpline(x, coeff, axis=0)
    u = np.eye(n, dtype=complex)
    out = np.empty((x.size, n, n), complex)
    out[0] = u
    drift = 0.0

    def f(s, v):
        return -spline(s) @ v

    for i in range(x.size - 1):
        hstep = (x[i + 1] - x[i]) / substeps
        s = x[i]
        for _ in range(substeps):
            k1 = f(s, u)
            k2 = f(s + 0.5 * hstep, u + 0.5 * hstep * k1)
            k3 = f(s + 0.5 * hstep, u + 0.5 * hstep * k2)
            k4 = f(s + hstep, u + hstep * k3)
            u = u + hstep / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            drift = max(drift, unitarity_defect(u))
            u = polar_unitary(u)
            s += hstep
        out[i + 1] = u
    if drift > 1e-8:
        log.info("transport: max pre-polar unitarity drift %.3e", drift)
    return TransportSolution(x, out, drift)


def parallel_transport(A: ConnectionField, substeps: int = 1) -> TransportSolution:
    """Parallel transport u_A along [0, L] with u_A(0) = Id."""
    return transport_samples(A.grid.x, A.coeff, substeps)


def wilson_line(A: ConnectionField) -> np.ndarray:
    return parallel_transport(A).endpoint


def normalize_temporal_gauge(A: ConnectionField, tol: float = 1e-6):
    """Move A to the temporal gauge: returns (A_tilde, u_A) with A_tilde = 0.

    A_tilde = u^{-1} u' + u^{-1} A u is evaluated with the same 4th-order
    derivative as the bundle module and asserted to vanish.
    """
    sol = parallel_transport(A)
    u = sol.u
    du = d_dx_4th(u, A.grid.h)
    ud = dagger(u)
    at = ud @ du + ud @ A.coeff @ u
    at = 0.5 * (at - dagger(at))
    err = float(np.max(np.abs(at))) if at.size else 0.0
    if err > tol:
        raise BundleError(f"temporal gauge residual {err:.3e} exceeds {tol:.1e}")
    return ConnectionField(A.grid, at), GaugeTransform(A.grid, u, tol=1e-8)


@dataclass
class GaugeVerdict:
    equivalent: bool
    distance: float
    components: dict
    witness: np.ndarray
    anchor: np.ndarray = field(default=None)


def _fro(m: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.abs(m) ** 2, axis=(-2, -1)))


def _connection_residual(x, a, b, U) -> float:
    h = x[1] - x[0]
    dU = d_dx_4th(U, h)
    Ud = dagger(U)
    res = Ud @ dU + Ud @ a @ U - b
    return float(h * np.max(_fro(res)))


def _best_anchor(va_t: np.ndarray, vb_t: np.ndarray, seed: int = 0) -> np.ndarray:
    """Constant unitary C minimizing sum_x ||C^{-1} Va(x) C - Vb(x)||^2."""
    n = va_t.shape[1]
    if n == 1:
        return np.eye(1, dtype=complex)
    basis = skew_hermitian_basis(n)

    def unit(p):
        return expm(np.tensordot(p, basis, axes=(0, 0)))

    def cost(p):
        C = unit(p)
        d = dagger(C) @ va_t @ C - vb_t
        return float(np.sum(np.abs(d) ** 2))

    starts = [np.eye(n, dtype=complex)]
    gaps = [np.ptp(np.linalg.eigvalsh(m)) for m in va_t]
    i = int(np.argmax(gaps))
    _, qa = np.linalg.eigh(va_t[i])
    _, qb = np.linalg.eigh(vb_t[i])
    starts.append(qa @ dagger(qb))
    rng = np.random.default_rng(seed)
    for _ in range(4):
        starts.append(expm(np.tensordot(rng.normal(size=basis.shape[0]), basis, axes=(0, 0))))
    best, bestc = None, np.inf
    for C0 in starts:
        L0 = logm(C0)
        L0 = 0.5 * (L0 - dagger(L0))
        p0 = np.real(np.einsum("kab,ab->k", basis.conj(), L0))
        res = minimize(cost, p0, method="BFGS")
        if res.fun < bestc:
            best, bestc = res.x, res.fun
    return unit(best)


def orbit_distance(x, a, va, b, vb, anchor: str = "boundary"):
    """Gauge-orbit distance between (a, va) and (b, vb) sampled at nodes x.

    ``anchor="boundary"`` is the boundary-fixed setting: the witness is
    U = u_a u_b^{-1} (U(x0) = Id) and the Wilson lines must agree.  With
    ``anchor="free"`` the gauge at x0 is unconstrained (comparison on an
    interior sub-interval): the witness is U = u_a C u_b^{-1} with the
    constant unitary C fitted to the transported potentials, and the Wilson
    term is dropped.
    """
    x = np.asarray(x, float)
    a, va, b, vb = (np.asarray(m, complex) for m in (a, va, b, vb))
    if not (a.shape == b.shape == va.shape == vb.shape) or a.shape[0] != x.size:
        raise BundleError("orbit distance needs fields on the same nodes")
    n = a.shape[1]
    ua = transport_samples(x, a).u
    ub = transport_samples(x, b).u
    va_t = dagger(ua) @ va @ ua
    vb_t = dagger(ub) @ vb @ ub
    if anchor == "boundary":
        C = np.eye(n, dtype=complex)
        wilson = float(np.linalg.norm(ua[-1] - ub[-1]) / np.sqrt(n))
    elif anchor == "free":
        C = _best_anchor(va_t, vb_t)
        wilson = 0.0
    else:
        raise ValueError(f"anchor must be 'boundary' or 'free', got {anchor!r}")
    U = ua @ C @ dagger(ub)
    # both normalizations are symmetric in the two arguments
    scale = 1.0 + max(float(np.max(_fro(va))), float(np.max(_fro(vb))))
    vterm = float(np.max(_fro(dagger(U) @ va @ U - vb))) / scale
    if x.size >= 5:
        conn = 0.5 * (_connection_residual(x, a, b, U) + _connection_residual(x, b, a, dagger(U)))
    else:
        conn = 0.0
    comps = {"wilson": wilson, "potential": vterm, "connection": conn}
    return wilson + vterm + conn, comps, U, C


def gauge_equivalent(A: ConnectionField, VA: PotentialField, B: ConnectionField, VB: PotentialField,
                     tol: float = 1e-3, anchor: str = "boundary") -> GaugeVerdict:
    """Decide whether (B, VB) lies in the boundary-fixed gauge orbit of (A, VA)."""
    if A.grid != B.grid or VA.grid != A.grid or VB.grid != A.grid:
        raise BundleError("gauge comparison needs a common grid")
    if len({A.rank, B.rank, VA.rank, VB.rank}) != 1:
        raise BundleError("gauge comparison needs a common rank")
    d, comps, U, C = orbit_distance(A.grid.x, A.coeff, VA.coeff, B.coeff, VB.coeff, anchor)
    return GaugeVerdict(bool(d <= tol), float(d), comps, U, C)
