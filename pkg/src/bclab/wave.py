"""Forward solver for (d_t^2 + P + V) u = 0 on [0, L] and DtN synthesis.

The connection Laplacian is discretized as P_h = D_h^* D_h with the
staggered covariant difference

    (D_h u)_{i+1/2} = (u_{i+1} - u_i) / h + A1(x_{i+1/2}) (u_i + u_{i+1}) / 2,

so the interior operator is Hermitian for the uniform node inner product and
consistent to second order with -u'' - 2 A1 u' - (A1' + A1^2) u.  Time
stepping is explicit leapfrog; Dirichlet rows are imposed exactly.

Simulations are batched: boundary data and states carry a trailing batch axis
so many sources propagate in a single sweep.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bundle import (
    BundleError,
    ConnectionField,
    Grid1D,
    PotentialField,
    SectionField,
    covariant_dx,
)

log = logging.getLogger(__name__)

ENDPOINTS = ("left", "right")
CFL_MAX = 0.9


class WaveError(ValueError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time nodes on [0, 2T]; ``nt`` must be odd so that T is a node."""

    horizon: float  # 2T
    nt: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise WaveError("time horizon must be positive")
        if self.nt < 3 or self.nt % 2 == 0:
            raise WaveError(f"nt must be odd and >= 3 (T must be a node), got {self.nt}")

    @property
    def dt(self) -> float:
        return self.horizon / (self.nt - 1)

    @property
    def T(self) -> float:
        return 0.5 * self.horizon

    @property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.nt)

    @property
    def mid(self) -> int:
        """Index of the node t = T."""
        return (self.nt - 1) // 2

    def cfl(self, grid: Grid1D) -> float:
        return self.dt / grid.h

    def weights(self) -> np.ndarray:
        w = np.full(self.nt, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w

    @classmethod
    def for_grid(cls, grid: Grid1D, T: float, cfl: float = 0.5) -> "TimeGrid":
        steps = 2 * math.ceil(T / (cfl * grid.h))
        return cls(2 * T, steps + 1)


@dataclass(frozen=True)
class BoundarySignal:
    """Dirichlet data at one endpoint, samples of shape (nt, n)."""

    endpoint: str
    samples: np.ndarray

    def __post_init__(self):
        if self.endpoint not in ENDPOINTS:
            raise WaveError(f"endpoint must be one of {ENDPOINTS}, got {self.endpoint!r}")
        s = np.asarray(self.samples, dtype=complex)
        if s.ndim == 1:
            s = s[:, None]
        if np.max(np.abs(s[0]), initial=0.0) > 1e-12:
            raise WaveError("boundary signal must vanish at t = 0 (zero initial data)")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)


@dataclass(frozen=True)
class WaveField:
    grid: Grid1D
    timegrid: TimeGrid
    values: np.ndarray  # (nt, nx, n)

    def state(self, m: int) -> SectionField:
        return SectionField(self.grid, self.values[m])


def _check_pair(A: ConnectionField, V: PotentialField):
    if A.grid != V.grid:
        raise BundleError("connection and potential live on different grids")
    if A.rank != V.rank:
        raise BundleError(f"rank mismatch: A has {A.rank}, V has {V.rank}")


def _check_cfl(grid: Grid1D, tg: TimeGrid):
    c = tg.cfl(grid)
    if c > CFL_MAX + 1e-12:
        raise WaveError(f"CFL number {c:.3f} exceeds {CFL_MAX}")


class _Stencil:
    """Precomputed coefficients for the discrete operator P_h + V."""

    def __init__(self, A: ConnectionField, V: PotentialField):
        self.h = A.grid.h
        self.amid = A.midpoints()
        self.a0 = A.coeff[0]
        self.aL = A.coeff[-1]
        self.v = V.coeff[1:-1]
        self.v0, self.vL = V.coeff[0], V.coeff[-1]
        self.scalar = A.rank == 1

    def _mul(self, m, u):
        if self.scalar:
            return m[:, :1, :1] * u
        return np.einsum("xij,xjb->xib", m, u)

    def apply(self, u: np.ndarray) -> np.ndarray:
        """(P_h + V) u at interior nodes; u has shape (nx, n, B)."""
        h = self.h
        du = (u[1:] - u[:-1]) / h + self._mul(self.amid, 0.5 * (u[1:] + u[:-1]))
        adu = self._mul(self.amid, du)
        pu = -(du[1:] - du[:-1]) / h - 0.5 * (adu[1:] + adu[:-1])
        return pu + self._mul(self.v, u[1:-1])

    def traces(self, u: np.ndarray):
        """Covariant Neumann traces (interior normal) at both ends."""
        h = self.h
        left = (-3 * u[0] + 4 * u[1] - u[2]) / (2 * h) + self._mul(self.a0[None], u[:1])[0]
        right = -(3 * u[-1] - 4 * u[-2] + u[-3]) / (2 * h) - self._mul(self.aL[None], u[-1:])[0]
        return left, right

    def flux_traces(self, u: np.ndarray, acc_left: np.ndarray, acc_right: np.ndarray):
        """Flux form of the traces.

        The staggered difference D u at x = h/2 is transported back to the
        node covariantly, and the half-cell term uses the equation,
        nabla nabla u = u_tt + V u, with u_tt the boundary data acceleration:

            nabla u(0) = (I + h/2 A_q) (D u)_{1/2} - h/2 (u_tt + V u)(0).

        Unlike the one-sided stencil this stays gauge covariant to second
        order on grid-scale data (hat sources).
        """
        h = self.h
        d0 = (u[1] - u[0]) / h + self._mul(self.amid[:1], 0.5 * (u[:1] + u[1:2]))[0]
        d1 = (u[-1] - u[-2]) / h + self._mul(self.amid[-1:], 0.5 * (u[-1:] + u[-2:-1]))[0]
        n = self.a0.shape[0]
        tl = np.eye(n) + 0.25 * h * (self.a0 + self.amid[0])
        tr = np.eye(n) - 0.25 * h * (self.aL + self.amid[-1])
        left = tl @ d0 - 0.5 * h * (acc_left + self.v0 @ u[0])
        right = -(tr @ d1 + 0.5 * h * (acc_right + self.vL @ u[-1]))
        return left, right


def _data_acceleration(d: np.ndarray, dt: float) -> np.ndarray:
    """Second time difference of boundary data, zero-padded at both ends.

    Zero padding past 2T keeps the hat columns exact time shifts of each
    other, as the shift synthesis requires.
    """
    pad = np.concatenate([np.zeros_like(d[:1]), d, np.zeros_like(d[:1])])
    return (pad[2:] - 2 * pad[1:-1] + pad[:-2]) / dt ** 2


TRACES = ("stencil", "flux")


def bump(t: np.ndarray, a: float, b: float) -> np.ndarray:
    """C-infinity bump supported in (a, b) with peak 1."""
    s = (np.asarray(t, float) - a) / (b - a)
    out = np.zeros_like(s)
    m = (s > 0) & (s < 1)
    out[m] = np.exp(4.0 - 1.0 / (s[m] * (1 - s[m])))
    return out


def propagate(A: ConnectionField, V: PotentialField, tg: TimeGrid,
              left: np.ndarray | None = None, right: np.ndarray | None = None,
              keep=None, trace: str = "stencil"):
    """Batched leapfrog run.

    Parameters
    ----------
    left, right : arrays of shape (nt, n, B) or None
        Dirichlet data at each endpoint (None means homogeneous).
    keep : None, "all" or iterable of time indices
        Which full states to return.
    trace : {"stencil", "flux"}
        Neumann trace: the one-sided second-order stencil or the covariant
        flux form (see ``_Stencil.flux_traces``).

    Returns
    -------
    traces : dict endpoint -> (nt, n, B) covariant Neumann traces
    states : dict time index -> (nx, n, B) (or a single (nt, nx, n, B) array
        when ``keep == "all"``)
    """
    _check_pair(A, V)
    grid = A.grid
    _check_cfl(grid, tg)
    n = A.rank
    data = [d for d in (left, right) if d is not None]
    if not data:
        raise WaveError("at least one boundary datum is required (use zeros)")
    B = data[0].shape[2]
    for d in data:
        if d.shape != (tg.nt, n, B):
            raise WaveError(f"boundary data shape {d.shape} != {(tg.nt, n, B)}")
    zero = np.zeros((tg.nt, n, B), complex)
    left = zero if left is None else np.asarray(left, complex)
    right = zero if right is None else np.asarray(right, complex)

    if trace not in TRACES:
        raise WaveError(f"trace must be one of {TRACES}, got {trace!r}")
    st = _Stencil(A, V)
    dt2 = tg.dt ** 2
    if trace == "flux":
        accL, accR = _data_acceleration(left, tg.dt), _data_acceleration(right, tg.dt)
    nx, nt = grid.nx, tg.nt
    if keep == "all":
        store = np.zeros((nt, nx, n, B), complex)
        wanted = None
    else:
        wanted = set() if keep is None else {int(m) for m in keep}
        store = {}
    trL = np.zeros((nt, n, B), complex)
    trR = np.zeros((nt, n, B), complex)

    def record(m, u):
        if trace == "flux":
            trL[m], trR[m] = st.flux_traces(u, accL[m], accR[m])
        else:
            trL[m], trR[m] = st.traces(u)
        if wanted is None:
            store[m] = u
        elif m in wanted:
            store[m] = u.copy()

    u = np.zeros((nx, n, B), complex)
    u[0], u[-1] = left[0], right[0]
    record(0, u)
    # Taylor first step from zero initial velocity.
    nxt = np.empty_like(u)
    nxt[1:-1] = u[1:-1] - 0.5 * dt2 * st.apply(u)
    nxt[0], nxt[-1] = left[1], right[1]
    prev, u = u, nxt
    record(1, u)
    for m in range(1, nt - 1):
        nxt = np.empty_like(u)
        nxt[1:-1] = 2 * u[1:-1] - prev[1:-1] - dt2 * st.apply(u)
        nxt[0], nxt[-1] = left[m + 1], right[m + 1]
        prev, u = u, nxt
        record(m + 1, u)
    return {"left": trL, "right": trR}, store


def _signals_to_data(signals, tg: TimeGrid, n: int):
    left = right = None
    for s in signals:
        if s.samples.shape != (tg.nt, n):
            raise WaveError(f"signal shape {s.samples.shape} != {(tg.nt, n)}")
        arr = s.samples[:, :, None]
        if s.endpoint == "left":
            left = arr if left is None else left + arr
        else:
            right = arr if right is None else right + arr
    if left is None and right is None:
        left = np.zeros((tg.nt, n, 1), complex)
    return left, right


def solve_ibvp(A: ConnectionField, V: PotentialField, signals, tg: TimeGrid) -> WaveField:
    """Full space-time field for the given boundary signals."""
    left, right = _signals_to_data(signals, tg, A.rank)
    _, states = propagate(A, V, tg, left, right, keep="all")
    return WaveField(A.grid, tg, states[..., 0])


def covariant_neumann_trace(u: WaveField, A: ConnectionField) -> list[BoundarySignal]:
    """Traces nabla_nu u at both endpoints (nu the interior normal)."""
    h = u.grid.h
    v = u.values
    a0, aL = A.coeff[0], A.coeff[-1]
    left = (-3 * v[:, 0] + 4 * v[:, 1] - v[:, 2]) / (2 * h) + v[:, 0] @ a0.T
    right = -(3 * v[:, -1] - 4 * v[:, -2] + v[:, -3]) / (2 * h) - v[:, -1] @ aL.T
    return [_RawSignal("left", left), _RawSignal("right", right)]


@dataclass(frozen=True)
class _RawSignal:
    """Trace output; unlike BoundarySignal it need not vanish at t = 0."""

    endpoint: str
    samples: np.ndarray


def energy(u: WaveField, A: ConnectionField, V: PotentialField, m: int) -> float:
    """||d_t u||^2 + ||nabla u||^2 + <V u, u> at time node m (trapezoid in x)."""
    v = u.values
    dt = u.timegrid.dt
    if 0 < m < v.shape[0] - 1:
        ut = (v[m + 1] - v[m - 1]) / (2 * dt)
    elif m == 0:
        ut = (-3 * v[0] + 4 * v[1] - v[2]) / (2 * dt)
    else:
        ut = (3 * v[m] - 4 * v[m - 1] + v[m - 2]) / (2 * dt)
    du = covariant_dx(SectionField(u.grid, v[m]), A).values
    vu = np.einsum("xij,xj->xi", V.coeff, v[m])
    dens = (np.sum(np.abs(ut) ** 2, axis=1) + np.sum(np.abs(du) ** 2, axis=1)
            + np.real(np.sum(np.conj(v[m]) * vu, axis=1)))
    return float(u.grid.integrate(dens))


# --- DtN synthesis --------------------------------------------------------------

@dataclass(frozen=True)
class DtnOperator:
    """Discrete Lambda over (0, 2T) x Gamma.

    Row/column index is ``(endpoint, time node, fiber)`` endpoint-major.
    Column ``(e, j, k)`` is the stacked trace produced by the time-hat source
    at node j, fiber direction k, applied at endpoint e.
    """

    grid: Grid1D
    timegrid: TimeGrid
    gamma: tuple
    n: int
    matrix: np.ndarray
    basis: str = "hat"
    trace: str = "stencil"

    @property
    def size(self) -> int:
        return len(self.gamma) * self.timegrid.nt * self.n

    def weights(self) -> np.ndarray:
        """Quadrature weights on the stacked index (trapezoid in time)."""
        w = np.repeat(self.timegrid.weights(), self.n)
        return np.tile(w, len(self.gamma))

    def index(self, endpoint: str, j: int, k: int) -> int:
        e = self.gamma.index(endpoint)
        return (e * self.timegrid.nt + j) * self.n + k

    def stack(self, signals) -> np.ndarray:
        """Pack boundary signals into a data vector (endpoints not in Gamma rejected)."""
        out = np.zeros(self.size, complex)
        nt, n = self.timegrid.nt, self.n
        for s in signals:
            if s.endpoint not in self.gamma:
                raise WaveError(f"signal at {s.endpoint} outside Gamma={self.gamma}")
            if s.samples.shape != (nt, n):
                raise WaveError(f"signal shape {s.samples.shape} != {(nt, n)}")
            e = self.gamma.index(s.endpoint)
            out[e * nt * n:(e + 1) * nt * n] += s.samples.ravel()
        return out

    def unstack(self, vec) -> dict:
        nt, n = self.timegrid.nt, self.n
        vec = np.asarray(vec)
        return {e: vec[i * nt * n:(i + 1) * nt * n].reshape(nt, n) for i, e in enumerate(self.gamma)}

    def apply(self, signals) -> dict:
        return self.unstack(self.matrix @ self.stack(signals))


def _normalize_gamma(gamma) -> tuple:
    if isinstance(gamma, str):
        gamma = (gamma,)
    gamma = tuple(e for e in ENDPOINTS if e in set(gamma))
    if not gamma:
        raise WaveError("Gamma must contain 'left' and/or 'right'")
    return gamma


def _hat_data(tg: TimeGrid, n: int, sources):
    """Boundary arrays for a list of (endpoint, time node, fiber) hat sources."""
    B = len(sources)
    left = np.zeros((tg.nt, n, B), complex)
    right = np.zeros((tg.nt, n, B), complex)
    for b, (e, j, k) in enumerate(sources):
        (left if e == "left" else right)[j, k, b] = 1.0
    return left, right


def _columns_job(args):
    A, V, tg, gamma, sources, trace = args
    left, right = _hat_data(tg, A.rank, sources)
    traces, _ = propagate(A, V, tg, left, right, trace=trace)
    return np.concatenate([traces[e] for e in gamma], axis=0).reshape(-1, len(sources))


def synthesize_dtn(A: ConnectionField, V: PotentialField, gamma, tg: TimeGrid,
                   method: str = "shift", workers: int = 1, chunk: int = 64,
                   noise: float = 0.0, seed: int | None = None, trace: str = "flux") -> DtnOperator:
    """Assemble the discrete DtN operator column by column.

    ``method="shift"`` exploits exact time-translation invariance of the
    scheme: the response to the hat at node j >= 1 is the node-1 response
    delayed by j-1 steps, so only 2 n |Gamma| simulations are run.
    ``method="columns"`` simulates every column (optionally across
    ``workers`` processes); both give identical matrices up to rounding.
    """
    _check_pair(A, V)
    _check_cfl(A.grid, tg)
    gamma = _normalize_gamma(gamma)
    n, nt = A.rank, tg.nt
    size = len(gamma) * nt * n
    mat = np.zeros((size, size), complex)
    order = [(e, j, k) for e in gamma for j in range(nt) for k in range(n)]

    if method == "shift":
        base = [(e, j, k) for e in gamma for j in (0, 1) for k in range(n)]
        resp = _columns_job((A, V, tg, gamma, base, trace))
        resp = resp.reshape(len(gamma), nt, n, len(base))
        for b, (e, j0, k) in enumerate(base):
            col0 = (gamma.index(e) * nt + j0) * n + k
            r = resp[..., b]
            if j0 == 0:
                mat[:, col0] = r.ravel()
                continue
            for j in range(1, nt):
                shifted = np.zeros_like(r)
                shifted[:, j - 1:] = r[:, :nt - j + 1]
                mat[:, (gamma.index(e) * nt + j) * n + k] = shifted.ravel()
    elif method == "columns":
        chunks = [order[i:i + chunk] for i in range(0, len(order), chunk)]
        jobs = [(A, V, tg, gamma, c, trace) for c in chunks]
        workers = max(1, int(workers or os.cpu_count() or 1))
        if workers == 1:
            results = map(_columns_job, jobs)
        else:
            pool = ProcessPoolExecutor(max_workers=workers)
            results = pool.map(_columns_job, jobs)
        start = 0
        for res in results:
            mat[:, start:start + res.shape[1]] = res
            start += res.shape[1]
        if workers > 1:
            pool.shutdown()
    else:
        raise WaveError(f"unknown synthesis method {method!r}")

    if noise:
        rng = np.random.default_rng(seed)
        scale = noise * np.linalg.norm(mat) / np.sqrt(mat.size)
        mat = mat + scale * (rng.normal(size=mat.shape) + 1j * rng.normal(size=mat.shape)) / np.sqrt(2)
    return DtnOperator(A.grid, tg, gamma, n, mat, trace=trace)


# --- file format --------------------------------------------------------------

MAGIC = "bclab-dtn 1"


def write_dtn(path, op: DtnOperator, extra: dict | None = None) -> Path:
    """Text header terminated by a blank line, then little-endian complex128 rows."""
    path = Path(path)
    head = {
        "length": repr(op.grid.length),
        "nx": str(op.grid.nx),
        "horizon": repr(op.timegrid.horizon),
        "nt": str(op.timegrid.nt),
        "gamma": ",".join(op.gamma),
        "n": str(op.n),
        "basis": op.basis,
        "trace": op.trace,
        "endianness": "little",
        "dtype": "complex128",
        "shape": f"{op.size}x{op.size}",
    }
    for k, v in (extra or {}).items():
        head[k] = str(v)
    text = MAGIC + "\n" + "".join(f"{k}: {v}\n" for k, v in head.items()) + "\n"
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(text.encode("utf-8"))
        fh.write(np.ascontiguousarray(op.matrix, dtype="<c16").tobytes())
    tmp.replace(path)
    return path


def read_dtn(path):
    """Return ``(DtnOperator, header dict)``."""
    raw = Path(path).read_bytes()
    sep = raw.find(b"\n\n")
    if sep < 0 or not raw.startswith(MAGIC.encode()):
        raise WaveError(f"{path}: not a DtN file")
    lines = raw[:sep].decode("utf-8").splitlines()[1:]
    head = dict(line.split(": ", 1) for line in lines)
    grid = Grid1D(float(head["length"]), int(head["nx"]))
    tg = TimeGrid(float(head["horizon"]), int(head["nt"]))
    gamma = tuple(head["gamma"].split(","))
    n = int(head["n"])
    size = len(gamma) * tg.nt * n
    dtype = "<c16" if head.get("endianness", "little") == "little" else ">c16"
    mat = np.frombuffer(raw[sep + 2:], dtype=dtype).astype(complex).reshape(size, size)
    return DtnOperator(grid, tg, gamma, n, mat, head.get("basis", "hat"), head.get("trace", "stencil")), head


def source_states(A: ConnectionField, V: PotentialField, gamma, tg: TimeGrid,
                  sources: np.ndarray, times=None) -> dict:
    """Interior states produced by stacked source vectors (oracle access).

    ``sources`` has shape (size, B) in the DtN index layout for ``gamma``;
    returns ``{m: (nx, n, B)}`` for the requested time indices (default: T).
    """
    gamma = _normalize_gamma(gamma)
    n = A.rank
    sources = np.asarray(sources, complex)
    if sources.ndim == 1:
        sources = sources[:, None]
    B = sources.shape[1]
    blocks = sources.reshape(len(gamma), tg.nt, n, B)
    data = {e: blocks[i] for i, e in enumerate(gamma)}
    times = [tg.mid] if times is None else list(times)
    _, states = propagate(A, V, tg, left=data.get("left"), right=data.get("right"), keep=times)
    return states
