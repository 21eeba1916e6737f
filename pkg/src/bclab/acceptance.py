"""Executable acceptance criteria A-H at desk scale.

Each ``criterion_*`` function runs one check on the default grid (L=1,
nx=201, cfl=0.5, T=1.5 unless noted) and returns a :class:`Criterion`
carrying the measured metrics, the thresholds and a pass flag.  Both the
test suite and the ``accept`` CLI subcommand call these functions.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .blago import BlagoForm
from .bundle import (
    ConnectionField,
    GaugeTransform,
    Grid1D,
    gauge_transform_connection,
    gauge_transform_potential,
)
from .control import (
    ControlSpace,
    build_localizer,
    density_residuals,
    oracle_mass_outside,
    reference_sources,
    smooth_ramp,
)
from .cylinder import TransversalOperator, cylinder_relation_check, dirichlet_spectrum, elliptic_dtn
from .gauge import gauge_equivalent, wilson_line
from .presets import random_connection, random_gauge, random_potential, random_smooth_matrices
from .recon import oracle_wave_table, probe_sources, recon_report, reconstruct, recover_fields
from .wave import BoundarySignal, TimeGrid, bump, energy, propagate, solve_ibvp, synthesize_dtn

DEFAULT = {"length": 1.0, "nx": 201, "cfl": 0.5, "T": 1.5}


@dataclass
class Criterion:
    key: str
    title: str
    passed: bool
    metrics: dict
    thresholds: dict
    seconds: float = 0.0
    notes: list = field(default_factory=list)

    def line(self) -> str:
        shown = ", ".join(f"{k}={_fmt(v)}" for k, v in self.metrics.items() if np.isscalar(v))
        return f"{self.key} {'PASS' if self.passed else 'FAIL'}  {self.title}: {shown}  ({self.seconds:.1f}s)"


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.3e}"


def _grids(nx: int = DEFAULT["nx"], length: float = DEFAULT["length"], T: float = DEFAULT["T"],
           cfl: float = DEFAULT["cfl"]):
    g = Grid1D(length, nx)
    return g, TimeGrid.for_grid(g, T, cfl)


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# --- A: Blagovestchenskii identity ------------------------------------------

def _blago_error(nx: int, n: int, seed: int, pairs: int) -> float:
    g, tg = _grids(nx)
    rng = np.random.default_rng(seed)
    A = random_connection(g, n, rng)
    V = random_potential(g, n, rng)
    op = synthesize_dtn(A, V, "left", tg)
    t = tg.t
    src = np.zeros((tg.nt, n, 2 * pairs), complex)
    for b in range(2 * pairs):
        a0 = rng.uniform(0.05, 1.2)
        w = rng.uniform(0.3, 1.0)
        c = rng.normal(size=n) + 1j * rng.normal(size=n)
        src[:, :, b] = (bump(t, a0, a0 + w) * np.cos(rng.uniform(0, 20) * t))[:, None] * c[None]
    _, st = propagate(A, V, tg, left=src, keep=[tg.mid])
    uT = st[tg.mid]
    F = src.reshape(-1, 2 * pairs)
    f, h = F[:, :pairs], F[:, pairs:]
    data = np.einsum("ip,ip->p", f.conj(), BlagoForm(op).lhs_vectors(h))
    w = g.weights()
    oracle = np.einsum("x,xip,xip->p", w, uT[..., :pairs].conj(), uT[..., pairs:])
    nf = np.sqrt(np.einsum("x,xip->p", w, np.abs(uT[..., :pairs]) ** 2))
    nh = np.sqrt(np.einsum("x,xip->p", w, np.abs(uT[..., pairs:]) ** 2))
    return float(np.max(np.abs(data - oracle) / (nf * nh)))


@_timed
def criterion_a(n: int = 2, seed: int = 1, pairs: int = 20) -> Criterion:
    """Data-only <Wf, Wh> against the interior oracle for random pairs."""
    fine = _blago_error(DEFAULT["nx"], n, seed, pairs)
    coarse = _blago_error((DEFAULT["nx"] + 1) // 2, n, seed, pairs)
    ratio = coarse / fine
    return Criterion("A", "Blagovestchenskii identity", fine <= 1e-2 and ratio >= 3,
                     {"rel_err": fine, "rel_err_coarse": coarse, "ratio": ratio},
                     {"rel_err": 1e-2, "ratio": 3})


# --- B: gauge invariance of the DtN operator ---------------------------------

def _gauge_dtn_error(nx: int, n: int, seed: int) -> float:
    g, tg = _grids(nx)
    rng = np.random.default_rng(seed)
    A = random_connection(g, n, rng)
    V = random_potential(g, n, rng)
    U = random_gauge(g, n, rng)
    B = gauge_transform_connection(A, U)
    VB = gauge_transform_potential(V, U)
    la = synthesize_dtn(A, V, "left", tg).matrix
    lb = synthesize_dtn(B, VB, "left", tg).matrix
    return float(np.linalg.norm(la - lb) / np.linalg.norm(la))


@_timed
def criterion_b(n: int = 2, seed: int = 3) -> Criterion:
    """||Lambda_A - Lambda_B|| / ||Lambda_A|| for a boundary-fixed gauge pair."""
    fine = _gauge_dtn_error(DEFAULT["nx"], n, seed)
    coarse = _gauge_dtn_error((DEFAULT["nx"] + 1) // 2, n, seed)
    ratio = coarse / fine
    return Criterion("B", "gauge invariance of the DtN operator", fine <= 1e-2 and ratio >= 3,
                     {"rel_diff": fine, "rel_diff_coarse": coarse, "ratio": ratio},
                     {"rel_diff": 1e-2, "ratio": 3})


# --- C, D: finite speed and energy -------------------------------------------

@_timed
def criterion_c(n: int = 2, seed: int = 1, start: float = 0.1) -> Criterion:
    """Max |u| outside the light cone x > t - start of a source switched on at start."""
    g, tg = _grids()
    rng = np.random.default_rng(seed)
    A = random_connection(g, n, rng)
    V = random_potential(g, n, rng)
    t = tg.t
    c = rng.normal(size=n) + 1j * rng.normal(size=n)
    f = bump(t, start, tg.horizon - start)[:, None] * c[None]
    u = solve_ibvp(A, V, [BoundarySignal("left", f)], tg)
    X, Tt = np.meshgrid(g.x, t)
    ext = X > Tt - start
    val = float(np.max(np.abs(u.values[ext])))
    return Criterion("C", "finite speed of propagation", val <= 1e-12,
                     {"exterior_max": val, "field_max": float(np.max(np.abs(u.values)))},
                     {"exterior_max": 1e-12})


@_timed
def criterion_d(n: int = 2, seed: int = 1, stop: float = 0.9) -> Criterion:
    """Relative energy drift over a window of length T after the source stops.

    The leapfrog scheme conserves its own discrete energy exactly; the drift
    seen here is the O(h^2 omega^2) quadrature error of the continuum energy
    functional, so it is measured on a pulse resolved by the default grid.
    """
    g, tg = _grids()
    rng = np.random.default_rng(seed)
    A = random_connection(g, n, rng)
    V = random_potential(g, n, rng)
    t = tg.t
    c = rng.normal(size=n) + 1j * rng.normal(size=n)
    f = bump(t, 0.1, stop)[:, None] * c[None]
    u = solve_ibvp(A, V, [BoundarySignal("left", f)], tg)
    off = int(np.ceil(stop / tg.dt)) + 2
    E = np.array([energy(u, A, V, m) for m in range(off, off + tg.mid + 1)])
    drift = float((E.max() - E.min()) / E[0])
    return Criterion("D", "energy conservation after shutoff", drift <= 1e-3,
                     {"drift": drift, "energy": float(E[0])}, {"drift": 1e-3})


# --- E: controllability surrogate and shell localization ---------------------

@_timed
def criterion_e(n: int = 1, seed: int = 2, radius: float = 0.6, x: float = 0.4, k: int = 8) -> Criterion:
    """Tikhonov density residuals along the alpha ladder and shell exterior mass."""
    g, tg = _grids()
    rng = np.random.default_rng(seed)
    A = random_connection(g, n, rng)
    V = random_potential(g, n, rng)
    op = synthesize_dtn(A, V, "left", tg)
    oracle = ControlSpace(op, 2, radius=g.length, mode="oracle", fields=(A, V))
    res = []
    for q in range(5):
        c = rng.normal(size=n) + 1j * rng.normal(size=n)
        prof = np.where(g.x < radius, np.sin(np.pi * (q + 1) * g.x / radius) ** 2, 0.0)
        res.append(density_residuals(oracle, prof[:, None] * c[None], radius))
    res = np.array(res)
    decreasing = bool(np.all(np.diff(res, axis=1) <= 1e-12))
    final = float(res[:, -1].max())
    data = ControlSpace(op, 2, radius=g.length, mode="data")
    locs = build_localizer(data, x, reference_sources(op), schedule=(k,))
    masses = []
    for loc in locs:
        st = loc.steps[0]
        state = oracle.states(oracle.sources(st.coeffs[:, None]))[:, :, 0]
        masses.append(oracle_mass_outside(state, g, st.shell.lo, st.shell.hi))
    mass = float(max(masses))
    ok = decreasing and final <= 0.15 and mass <= 0.10
    return Criterion("E", "approximate controllability and shell localization", ok,
                     {"residual_at_1e-5": final, "ladder_decreasing": decreasing, "exterior_mass_k8": mass},
                     {"residual_at_1e-5": 0.15, "exterior_mass_k8": 0.10},
                     notes=[f"residual ladder per target: {np.round(res, 4).tolist()}"])


# --- F: reconstruction --------------------------------------------------------

def _oracle_recon_error(n: int, seed: int) -> tuple:
    g, tg = _grids()
    rng = np.random.default_rng(seed)
    A = random_connection(g, n, rng)
    V = random_potential(g, n, rng)
    H = probe_sources(tg, n, seed=seed)
    idx = np.arange(10, g.nx - 10)
    tab = oracle_wave_table(A, V, ("left",), tg, H, np.arange(80), idx)
    res = recover_fields(tab)
    m = res.accepted
    ea = float(np.max(np.abs(res.A[m] - A.coeff[idx][m])) / np.max(np.abs(A.coeff)))
    ev = float(np.max(np.abs(res.V[m] - V.coeff[idx][m])) / np.max(np.abs(V.coeff)))
    return ea, ev


def dtn_speedup(workers: int = 8, n: int = 1, nx: int = DEFAULT["nx"]) -> dict:
    """Wall-clock speedup of column-parallel DtN synthesis over one worker."""
    g, tg = _grids(nx)
    rng = np.random.default_rng(0)
    A = random_connection(g, n, rng)
    V = random_potential(g, n, rng)
    t0 = time.perf_counter()
    m1 = synthesize_dtn(A, V, "left", tg, method="columns", workers=1).matrix
    t1 = time.perf_counter() - t0
    t0 = time.perf_counter()
    mw = synthesize_dtn(A, V, "left", tg, method="columns", workers=workers).matrix
    tw = time.perf_counter() - t0
    return {"serial_s": t1, "parallel_s": tw, "speedup": t1 / tw, "cores": os.cpu_count() or 1,
            "max_diff": float(np.max(np.abs(m1 - mw)))}


@_timed
def criterion_f(seed: int = 5, workers: int = 8, speedup: bool = True) -> Criterion:
    """Oracle-table recovery, data-driven orbit distance and synthesis speedup."""
    metrics, ok = {}, True
    t0 = time.perf_counter()
    for n in (1, 2):
        ea, ev = _oracle_recon_error(n, seed)
        metrics[f"oracle_A_err_n{n}"] = ea
        metrics[f"oracle_V_err_n{n}"] = ev
        ok &= ea <= 0.01 and ev <= 0.01
    for n in (1, 2):
        g, tg = _grids()
        rng = np.random.default_rng(seed)
        A = random_connection(g, n, rng)
        V = random_potential(g, n, rng)
        op = synthesize_dtn(A, V, "left", tg)
        res, _, _ = reconstruct(op, seed=seed)
        rep = recon_report(res, (A, V))
        d = rep.get("orbit_distance", np.inf)
        metrics[f"orbit_distance_n{n}"] = d
        metrics[f"accepted_nodes_n{n}"] = rep["accepted"]
        ok &= d <= 0.10
    metrics["pipeline_s"] = time.perf_counter() - t0
    ok &= metrics["pipeline_s"] <= 900
    if speedup:
        sp = dtn_speedup(workers)
        metrics["speedup"] = sp["speedup"]
        metrics["cores"] = sp["cores"]
        ok &= sp["speedup"] >= 3
    return Criterion("F", "end-to-end reconstruction", bool(ok), metrics,
                     {"oracle_err": 0.01, "orbit_distance": 0.10, "pipeline_s": 900, "speedup": 3})


# --- G: gauge decision procedure ---------------------------------------------

@_timed
def criterion_g(n: int = 2, seed: int = 7, count: int = 20) -> Criterion:
    """Equivalent pairs below 1e-3, Wilson-separated pairs above 0.1."""
    g, _ = _grids()
    rng = np.random.default_rng(seed)
    eq, sep = [], []
    for _ in range(count):
        A = random_connection(g, n, rng)
        V = random_potential(g, n, rng)
        U = random_gauge(g, n, rng)
        eq.append(gauge_equivalent(A, V, gauge_transform_connection(A, U),
                                   gauge_transform_potential(V, U)).distance)
        # U(0) = Id, U(L) far from Id: the Wilson line changes
        s0 = random_smooth_matrices(g, n, rng, modes=0)[0]
        s0 = 0.5 * (s0 - s0.conj().T)
        s0 *= 1.5 / max(np.linalg.norm(s0, 2), 1e-12)
        ramp = smooth_ramp(g.x, 0.2 * g.length, 0.8 * g.length)
        W = GaugeTransform(g, np.array([expm(r * s0) for r in ramp]))
        sep.append(gauge_equivalent(A, V, gauge_transform_connection(A, W),
                                    gauge_transform_potential(V, W)).distance)
    c = 0.7
    grid = Grid1D(1.0, DEFAULT["nx"])
    A1 = ConnectionField(grid, np.full((grid.nx, 1, 1), 1j * c))
    werr = float(abs(wilson_line(A1)[0, 0] - np.exp(-1j * c * grid.length)))
    ok = max(eq) <= 1e-3 and min(sep) >= 0.1 and werr <= 1e-8
    return Criterion("G", "gauge decision procedure", ok,
                     {"max_equivalent_distance": max(eq), "min_separated_distance": min(sep),
                      "scalar_wilson_err": werr},
                     {"equivalent": 1e-3, "separated": 0.1, "wilson": 1e-8})


# --- H: cylinder relation -----------------------------------------------------

@_timed
def criterion_h(n: int = 2, seed: int = 4) -> Criterion:
    """Cylinder relation consistency, dual-method DtN, spectrum and closed form."""
    g = Grid1D(np.pi, DEFAULT["nx"])
    P = TransversalOperator(ConnectionField.zero(g, 1))
    lam1 = float(dirichlet_spectrum(P, 1)[0])
    lam_err = abs(lam1 - 1.0)
    neu = elliptic_dtn(P, -1.0, [1.0, 0.0]).values[0].real
    neu_err = abs(neu + np.cosh(np.pi) / np.sinh(np.pi))
    rng = np.random.default_rng(seed)
    gr = Grid1D(1.0, DEFAULT["nx"])
    P2 = TransversalOperator(random_connection(gr, n, rng))
    hvec = rng.normal(size=2 * n) + 1j * rng.normal(size=2 * n)
    l1 = float(dirichlet_spectrum(P2, 1)[0])
    rep = cylinder_relation_check(P2, 0.5 * l1, range(6), hvec,
                                  pairs=[((0.0, 1), (-1.0, 0)), ((0.5 * l1, 2), (0.5 * l1 - 3.0, 1))])
    h2 = g.h ** 2
    ok = (rep["cross_consistency"] <= 1e-10 and rep["relation_error"] <= 1e-10
          and rep["direct_spectral_gap"] <= 1e-8 and lam_err <= 2 * h2 and neu_err <= h2)
    return Criterion("H", "cylinder relation", bool(ok),
                     {"cross_consistency": rep["cross_consistency"], "relation_error": rep["relation_error"],
                      "direct_spectral_gap": rep["direct_spectral_gap"], "lambda1_err": lam_err,
                      "neumann_err": neu_err, "h2": h2,
                      "monotone": rep["monotone_increasing_in_mu"]},
                     {"cross_consistency": 1e-10, "direct_spectral_gap": 1e-8, "lambda1_err": "2 h^2",
                      "neumann_err": "h^2"})


CRITERIA = {
    "A": criterion_a, "B": criterion_b, "C": criterion_c, "D": criterion_d,
    "E": criterion_e, "F": criterion_f, "G": criterion_g, "H": criterion_h,
}


def run_all(keys=None, workers: int = 8, log=print) -> list:
    out = []
    for key in keys or CRITERIA:
        fn = CRITERIA[key]
        crit = fn(workers=workers) if key == "F" else fn()
        if log:
            log(crit.line())
        out.append(crit)
    return out

