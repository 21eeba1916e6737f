"""Recovery of the connection and potential from interior wave representations.

In an orthonormal frame the components r(t, x) of a wave satisfy

    r_tt - r_xx = 2 A r_x + W r,    W = A' + A^2 - V,

with A skew-Hermitian.  Given r on a lattice of time shifts and frame
nodes for several sources, (A, W) are fitted per node by real-linear least
squares with A constrained to u(n); V follows from the recovered A.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bundle import d_dx_2nd, hermitian_part, skew_hermitian_basis
from .control import ControlSpace, FrameData, build_frame, frame_nodes, shift_sources
from .gauge import orbit_distance
from .wave import bump, source_states

log = logging.getLogger(__name__)

COND_REJECT = 1e8


class ReconError(RuntimeError):
    pass


@dataclass
class WaveTable:
    """r_q(T - tau_j, x_i) stored as values[j, i, q] (shape (ntau, nodes, Q, n))."""

    nodes: np.ndarray
    tau: np.ndarray
    values: np.ndarray
    failed: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.values.shape[-1]

    @property
    def dx(self) -> float:
        return float(self.nodes[1] - self.nodes[0])

    @property
    def dtau(self) -> float:
        return float(self.tau[1] - self.tau[0])


def _check_shifts(shifts) -> np.ndarray:
    shifts = np.asarray(shifts, int)
    if shifts.size < 5:
        raise ReconError("at least 5 time shifts are needed")
    if np.any(np.diff(shifts) != shifts[1] - shifts[0]) or shifts[1] <= shifts[0]:
        raise ReconError("time shifts must be uniform and increasing")
    return shifts


def assemble_wave_table(frame: FrameData, space: ControlSpace, sources: np.ndarray, shifts) -> WaveTable:
    """Frame components of u^{h_q}(T - tau) at the frame nodes, from Gram data."""
    shifts = _check_shifts(shifts)
    sources = np.asarray(sources, complex)
    if sources.ndim == 1:
        sources = sources[:, None]
    op = space.op
    cols = np.concatenate([shift_sources(op, sources, int(s)) for s in shifts], axis=1)
    rep = frame.represent(space.cross(cols))        # (nodes, n, ntau*Q)
    Q = sources.shape[1]
    vals = rep.reshape(rep.shape[0], rep.shape[1], shifts.size, Q).transpose(2, 0, 3, 1)
    tau = shifts * op.timegrid.dt
    return WaveTable(np.asarray(frame.nodes), tau, vals, frame.failed.copy())


def oracle_wave_table(A, V, gamma, tg, sources: np.ndarray, shifts, node_index) -> WaveTable:
    """Wave table read from simulated interior fields in the standard frame."""
    shifts = _check_shifts(shifts)
    node_index = np.asarray(node_index, int)
    sources = np.asarray(sources, complex)
    if sources.ndim == 1:
        sources = sources[:, None]
    times = [tg.mid - int(s) for s in shifts]
    if min(times) < 0:
        raise ReconError("shift larger than T")
    st = source_states(A, V, gamma, tg, sources, times)
    vals = np.stack([st[m][node_index] for m in times])          # (ntau, nodes, n, Q)
    return WaveTable(A.grid.x[node_index], shifts * tg.dt, vals.transpose(0, 1, 3, 2))


@dataclass
class ReconResult:
    nodes: np.ndarray
    A: np.ndarray
    W: np.ndarray
    V: np.ndarray
    residual: np.ndarray
    condition: np.ndarray
    accepted: np.ndarray
    hermitian_deviation: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.A.shape[1]

    def reported(self):
        """Accepted nodes with their fields."""
        m = self.accepted
        return self.nodes[m], self.A[m], self.V[m]


def _design(n: int):
    basis = skew_hermitian_basis(n)
    return basis


def _node_system(rt, rx, r, basis, rxx=None):
    """Real least-squares system for y = [kappa r_xx +] 2 A r_x + W r over samples."""
    n = r.shape[-1]
    y = (rt).reshape(-1, n)
    rx = rx.reshape(-1, n)
    r = r.reshape(-1, n)
    cols = [] if rxx is None else [rxx.reshape(-1, n).ravel()]
    for B in basis:
        cols.append((2 * rx @ B.T).ravel())
    for a in range(n):
        for b in range(n):
            c = np.zeros((r.shape[0], n), complex)
            c[:, a] = r[:, b]
            cols.append(c.ravel())
            cols.append((1j * c).ravel())
    M = np.array(cols).T
    Mr = np.concatenate([M.real, M.imag])
    yr = np.concatenate([y.ravel().real, y.ravel().imag])
    return Mr, yr


def recover_fields(table: WaveTable, edge: int = 2, cond_max: float = COND_REJECT,
                   free_speed: bool = False) -> ReconResult:
    """Per-node constrained least squares for (A, W), then V = A' + A^2 - W.

    Second-order central differences in tau and x; nodes closer than
    ``edge`` lattice steps to either end of the table are not fitted.  With
    ``free_speed`` the coefficient of r_xx is fitted as well (a nuisance
    parameter kappa, stored in ``meta["kappa"]``), which absorbs a smooth
    stretch of the node coordinate such as the lag that discrete dispersion
    puts into data-driven localization.
    """
    vals = table.values
    ntau, nx, Q, n = vals.shape
    if nx < 2 * edge + 3:
        raise ReconError("too few nodes for central differences")
    dt, dx = table.dtau, table.dx
    basis = _design(n)
    na = basis.shape[0]
    A = np.zeros((nx, n, n), complex)
    W = np.zeros((nx, n, n), complex)
    res = np.full(nx, np.nan)
    cond = np.full(nx, np.inf)
    fitted = np.zeros(nx, bool)
    kappa = np.ones(nx)
    failed = np.zeros(nx, bool) if table.failed is None else np.asarray(table.failed, bool)
    jt = slice(1, ntau - 1)
    rtt = (vals[2:] - 2 * vals[1:-1] + vals[:-2]) / dt ** 2
    for i in range(edge, nx - edge):
        if failed[i - 1:i + 2].any():
            continue
        r = vals[jt, i]
        rx = (vals[jt, i + 1] - vals[jt, i - 1]) / (2 * dx)
        rxx = (vals[jt, i + 1] - 2 * vals[jt, i] + vals[jt, i - 1]) / dx ** 2
        rank = np.linalg.matrix_rank(r.reshape(-1, n), tol=1e-10 * max(np.abs(r).max(), 1e-300))
        if rank < n:
            raise ReconError(f"node {table.nodes[i]:.4f}: only {rank} independent wave vectors")
        if free_speed:
            M, y = _node_system(rtt[:, i], rx, r, basis, rxx)
        else:
            M, y = _node_system(rtt[:, i] - rxx, rx, r, basis)
        scale = np.linalg.norm(M, axis=0)
        scale[scale == 0] = 1.0
        sol, *_ = np.linalg.lstsq(M / scale, y, rcond=None)
        sol = sol / scale
        sv = np.linalg.svd(M / scale, compute_uv=False)
        cond[i] = sv[0] / sv[-1] if sv[-1] > 0 else np.inf
        ny = np.linalg.norm(y)
        res[i] = np.linalg.norm(M @ sol - y) / ny if ny > 0 else 0.0
        if free_speed:
            kappa[i], sol = sol[0], sol[1:]
        A[i] = np.tensordot(sol[:na], basis, axes=(0, 0))
        w = sol[na:].reshape(n, n, 2)
        W[i] = w[..., 0] + 1j * w[..., 1]
        fitted[i] = cond[i] <= cond_max
        if not fitted[i]:
            log.warning("node %.4f rejected: condition %.3e", table.nodes[i], cond[i])
    accepted = fitted.copy()
    # A' from the recovered field on the fitted block (central differences)
    dA = np.zeros_like(A)
    idx = np.flatnonzero(fitted)
    if idx.size >= 3:
        runs = np.split(idx, np.flatnonzero(np.diff(idx) > 1) + 1)
        for run in runs:
            if run.size >= 3:
                dA[run] = d_dx_2nd(A[run], dx)
            else:
                accepted[run] = False
    else:
        accepted[:] = False
    Vraw = dA + A @ A - W
    V = hermitian_part(Vraw)
    herm = np.sqrt(np.sum(np.abs(Vraw - V) ** 2, axis=(1, 2)))
    for i in np.flatnonzero(accepted):
        if herm[i] > 2 * res[i] * max(1.0, float(np.abs(W[i]).max())):
            log.info("node %.4f: Hermitian deviation %.3e vs residual %.3e", table.nodes[i], herm[i], res[i])
    # one-sided derivative stencils at block ends degrade order
    for run in np.split(np.flatnonzero(accepted), np.flatnonzero(np.diff(np.flatnonzero(accepted)) > 1) + 1):
        if run.size:
            accepted[run[0]] = accepted[run[-1]] = False
    return ReconResult(np.asarray(table.nodes), A, W, V, res, cond, accepted, herm,
                       {"kappa": kappa, "free_speed": free_speed})


def probe_sources(tg, n: int, gamma=("left",), count: int | None = None, seed: int = 0,
                  endpoint: str | None = None) -> np.ndarray:
    """Low-frequency probe sources for wave tables, shape (|gamma| nt n, Q).

    Source q is a smooth bump on (0.05 + 0.1 q, T') times a carrier
    exp(i (2 + 0.8 q) t) times a random fiber vector, where T' is 0.97 of
    T.  Low carriers keep r_tt - r_xx well above the discretization
    error; the default count max(2 n^2, 4) gives more samples than unknowns.
    """
    gamma = (gamma,) if isinstance(gamma, str) else tuple(gamma)
    Q = max(2 * n * n, 4) if count is None else int(count)
    endpoint = gamma[0] if endpoint is None else endpoint
    rng = np.random.default_rng(seed)
    t = tg.t
    end = 0.97 * tg.T
    blocks = np.zeros((len(gamma), tg.nt, n, Q), complex)
    e = gamma.index(endpoint)
    for q in range(Q):
        c = rng.normal(size=n) + 1j * rng.normal(size=n)
        start = min(0.05 + 0.1 * q, 0.5 * end)
        prof = bump(t, start, end) * np.exp(1j * (2 + 0.8 * q) * t)
        blocks[e, :, :, q] = prof[:, None] * c[None]
    return blocks.reshape(-1, Q)


def reconstruct(op, sigma: float = 0.05, alpha: float = 1e-4, shifts: int = 80, probes: int | None = None,
                seed: int = 0, mode: str = "data", fields=None, steps: int = 2,
                free_speed: bool = False, endpoint: str | None = None):
    """Data-driven pipeline: Gram data -> frame -> wave table -> (A, V).

    Returns ``(result, frame, table)``.  ``mode="oracle"`` replaces the Gram
    data by simulated inner products (needs ``fields``) for diagnosis.
    """
    space = ControlSpace(op, steps, radius=op.grid.length, mode=mode, fields=fields)
    nodes = frame_nodes(space, sigma, endpoint=endpoint)
    frame = build_frame(space, nodes, sigma=sigma, alpha=alpha, endpoint=endpoint)
    H = probe_sources(op.timegrid, op.n, op.gamma, probes, seed, endpoint)
    table = assemble_wave_table(frame, space, H, np.arange(int(shifts)))
    result = recover_fields(table, free_speed=free_speed)
    result.meta.update(sigma=sigma, alpha=alpha, shifts=int(shifts), probes=H.shape[1], mode=mode)
    return result, frame, table


def truth_on_nodes(A, V, nodes) -> tuple:
    """Sample true fields at the given nodes (grid-aligned nodes required)."""
    grid = A.grid
    idx = np.rint(np.asarray(nodes) / grid.h).astype(int)
    if np.max(np.abs(grid.x[idx] - nodes)) > 1e-9 * grid.length:
        raise ReconError("nodes are not grid-aligned")
    return A.coeff[idx], V.coeff[idx]


def recon_report(result: ReconResult, truth=None, anchor: str = "free") -> dict:
    """Residual/condition summary plus the orbit distance when truth (A, V) is given."""
    acc = result.accepted
    rep = {
        "nodes": int(result.nodes.size),
        "accepted": int(acc.sum()),
        "residual_max": float(np.nanmax(result.residual[acc])) if acc.any() else None,
        "residual_median": float(np.nanmedian(result.residual[acc])) if acc.any() else None,
        "condition_max": float(np.max(result.condition[acc])) if acc.any() else None,
        "hermitian_deviation_max": float(np.max(result.hermitian_deviation[acc])) if acc.any() else None,
    }
    if truth is not None and acc.sum() >= 5:
        x, a, v = result.reported()
        ta, tv = truth if isinstance(truth[0], np.ndarray) else truth_on_nodes(truth[0], truth[1], x)
        if ta.shape[0] != x.size:
            ta, tv = truth_on_nodes(truth[0], truth[1], x)
        d, comps, _, _ = orbit_distance(x, ta, tv, a, v, anchor=anchor)
        rep["orbit_distance"] = float(d)
        rep["orbit_components"] = comps
    return rep


def recon_csv_header(n: int) -> list:
    cols = ["x"]
    for name in ("A", "V"):
        for i in range(n):
            for j in range(n):
                suffix = "" if n == 1 else f"_{i}{j}"
                cols += [f"Re{name}{suffix}", f"Im{name}{suffix}"]
    return cols + ["residual", "cond"]


def write_recon_csv(path, result: ReconResult, only_accepted: bool = True) -> Path:
    path = Path(path)
    n = result.n
    m = result.accepted if only_accepted else np.ones(result.nodes.size, bool)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(recon_csv_header(n))
        for i in np.flatnonzero(m):
            row = [result.nodes[i]]
            for f in (result.A[i], result.V[i]):
                for v in f.ravel():
                    row += [v.real, v.imag]
            row += [result.residual[i], result.condition[i]]
            w.writerow([f"{float(v):.17g}" for v in row])
    return path
