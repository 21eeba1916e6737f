"""Command-line orchestration: ``bclab <subcommand> --config run.yaml``.

Configuration is YAML (nested key/value).  Any key can be overridden from
the environment with the ``BCLAB_`` prefix, nesting by double underscores
and values parsed as YAML scalars, e.g. ``BCLAB_GRID__NX=101`` or
``BCLAB_CONTROL__SIGMA=0.04``.  Command-line flags win over both.

Exit codes: 0 ok, 2 configuration/validation error, 3 numerical failure,
4 acceptance failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .blago import BlagoForm, GramError
from .bundle import BundleError, ConnectionField, Grid1D, PotentialField
from .control import (
    ControlError,
    ControlSpace,
    build_frame,
    build_localizer,
    frame_nodes,
    kernel_weights,
    oracle_mass_outside,
    reference_sources,
    write_frame,
)
from .cylinder import CylinderError, TransversalOperator, cylinder_relation_check, dirichlet_spectrum
from .gauge import gauge_equivalent
from .presets import PRESETS, connection_from_spec, potential_from_spec, read_field_csv
from .recon import ReconError, recon_report, reconstruct, write_recon_csv
from .wave import (
    ENDPOINTS,
    TRACES,
    BoundarySignal,
    TimeGrid,
    WaveError,
    bump,
    covariant_neumann_trace,
    read_dtn,
    solve_ibvp,
    source_states,
    synthesize_dtn,
    write_dtn,
)

log = logging.getLogger("bclab")

ENV_PREFIX = "BCLAB_"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ACCEPT = 0, 2, 3, 4
SUBCOMMANDS = ("simulate", "synthesize-dtn", "blago-check", "localize", "reconstruct",
               "gauge-compare", "cylinder-check", "accept")
NUMERIC_ERRORS = (WaveError, GramError, ControlError, ReconError, CylinderError, BundleError,
                  np.linalg.LinAlgError, FloatingPointError)

DEFAULTS = {
    "seed": 0,
    "out": "runs/default",
    "rank": 1,
    "grid": {"length": 1.0, "nx": 201},
    "time": {"T": 1.5, "cfl": 0.5},
    "gamma": ["left"],
    "connection": {"preset": "random_fourier", "modes": 3, "amplitude": 1.0},
    "potential": {"preset": "random_fourier", "modes": 3, "amplitude": 1.0},
    "dtn": {"file": None, "method": "shift", "trace": "flux", "noise": 0.0},
    "basis": {"steps": 2},
    "source": {"endpoint": "left", "start": 0.1, "stop": 0.9, "carrier": 0.0, "fiber": None},
    "simulate": {"stride": 10},
    "blago": {"pairs": 20},
    "control": {"alphas": [1e-1, 1e-2, 1e-3, 1e-4, 1e-5], "k_schedule": [2, 4, 8, 16], "x": 0.4,
                "sigma": 0.05, "alpha": 1e-4},
    "recon": {"shifts": 80, "probes": None, "free_speed": False},
    "gauge": {"a": None, "b": None, "anchor": "boundary", "tol": 1e-3},
    "cylinder": {"length": None, "nx": None, "connection": None, "lambda": None,
                 "k": [0, 1, 2, 3, 4, 5], "h": None},
    "accept": {"only": None},
}


class ConfigError(ValueError):
    """Validation failure naming the offending field."""

    def __init__(self, fieldname: str, msg: str):
        self.field = fieldname
        super().__init__(f"config field '{fieldname}': {msg}")


# --- configuration -----------------------------------------------------------

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and not _is_field_spec(out[k], v):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _is_field_spec(old: dict, new: dict) -> bool:
    # a new preset replaces the whole field description
    return "preset" in new or "table" in new


def env_overrides(environ=None) -> dict:
    """Nested dict from ``BCLAB_A__B=value`` variables."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in key[len(ENV_PREFIX):].split("__") if p]
        if not path:
            continue
        node = out
        for p in path[:-1]:
            node = node.setdefault(p, {})
        node[path[-1]] = yaml.safe_load(raw)
    return out


def load_config(path=None, environ=None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError("--config", f"file {p} not found")
        try:
            user = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError("--config", f"YAML parse error: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("--config", "top level must be a mapping")
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown key")
        cfg = _merge(cfg, user)
    cfg = _merge(cfg, env_overrides(environ))
    cfg = _merge(cfg, overrides or {})
    validate_config(cfg)
    return cfg


def _positive(cfg, dotted, integer=False, minimum=None):
    node = cfg
    for p in dotted.split("."):
        node = node[p]
    try:
        v = int(node) if integer else float(node)
    except (TypeError, ValueError):
        raise ConfigError(dotted, f"expected a number, got {node!r}") from None
    if integer and float(node) != v:
        raise ConfigError(dotted, f"expected an integer, got {node!r}")
    if minimum is not None and v < minimum:
        raise ConfigError(dotted, f"must be >= {minimum}, got {v}")
    if minimum is None and not v > 0:
        raise ConfigError(dotted, f"must be positive, got {v}")
    return v


def _check_field_spec(cfg, key):
    spec = cfg[key]
    if spec is None:
        return
    if not isinstance(spec, dict):
        raise ConfigError(key, "expected a mapping with 'preset' or 'table'")
    if "table" in spec:
        if not Path(spec["table"]).exists():
            raise ConfigError(f"{key}.table", f"file {spec['table']} not found")
        return
    name = spec.get("preset", "zero")
    if name not in PRESETS:
        raise ConfigError(f"{key}.preset", f"unknown preset {name!r}; expected one of {PRESETS}")


def validate_config(cfg: dict):
    _positive(cfg, "grid.length")
    _positive(cfg, "grid.nx", integer=True, minimum=3)
    _positive(cfg, "time.T")
    cfl = _positive(cfg, "time.cfl")
    if cfl > 0.9:
        raise ConfigError("time.cfl", f"must be <= 0.9 for leapfrog stability, got {cfl}")
    _positive(cfg, "rank", integer=True, minimum=1)
    _positive(cfg, "seed", integer=True, minimum=0)
    gamma = cfg["gamma"]
    gamma = [gamma] if isinstance(gamma, str) else gamma
    if not gamma or any(g not in ENDPOINTS for g in gamma):
        raise ConfigError("gamma", f"entries must be in {ENDPOINTS}, got {cfg['gamma']!r}")
    for key in ("connection", "potential"):
        _check_field_spec(cfg, key)
    if cfg["dtn"]["method"] not in ("shift", "columns"):
        raise ConfigError("dtn.method", f"expected 'shift' or 'columns', got {cfg['dtn']['method']!r}")
    if cfg["dtn"]["trace"] not in TRACES:
        raise ConfigError("dtn.trace", f"expected one of {TRACES}, got {cfg['dtn']['trace']!r}")
    if float(cfg["dtn"]["noise"]) < 0:
        raise ConfigError("dtn.noise", "must be nonnegative")
    if cfg["dtn"]["file"] and not Path(cfg["dtn"]["file"]).exists():
        raise ConfigError("dtn.file", f"file {cfg['dtn']['file']} not found")
    _positive(cfg, "basis.steps", integer=True, minimum=1)
    if cfg["source"]["endpoint"] not in ENDPOINTS:
        raise ConfigError("source.endpoint", f"expected one of {ENDPOINTS}")
    if not 0 <= float(cfg["source"]["start"]) < float(cfg["source"]["stop"]):
        raise ConfigError("source.stop", "need 0 <= source.start < source.stop")
    _positive(cfg, "simulate.stride", integer=True, minimum=1)
    _positive(cfg, "blago.pairs", integer=True, minimum=1)
    alphas = cfg["control"]["alphas"]
    if not alphas or any(float(a) <= 0 for a in alphas) or list(alphas) != sorted(alphas, reverse=True):
        raise ConfigError("control.alphas", "must be positive and decreasing")
    if any(int(k) < 1 for k in cfg["control"]["k_schedule"]):
        raise ConfigError("control.k_schedule", "entries must be positive integers")
    _positive(cfg, "control.sigma")
    _positive(cfg, "control.alpha")
    _positive(cfg, "recon.shifts", integer=True, minimum=5)
    if cfg["gauge"]["anchor"] not in ("boundary", "free"):
        raise ConfigError("gauge.anchor", "expected 'boundary' or 'free'")
    only = cfg["accept"]["only"]
    if only is not None:
        from .acceptance import CRITERIA
        keys = only.split(",") if isinstance(only, str) else list(only)
        bad = [k for k in keys if k not in CRITERIA]
        if bad:
            raise ConfigError("accept.only", f"unknown criteria {bad}")


def config_hash(cfg: dict) -> str:
    """SHA-256 of the resolved configuration; the output location is excluded."""
    body = {k: v for k, v in cfg.items() if k != "out"}
    blob = json.dumps(body, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


# --- run bookkeeping ---------------------------------------------------------

@dataclass
class RunManifest:
    config_hash: str
    subcommand: str
    version: str = __version__
    artifacts: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    status: str = "ok"

    def stage(self, name: str):
        manifest = self

        class _Stage:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                manifest.timings[name] = time.perf_counter() - self.t0
                return False

        return _Stage()

    def write(self, out: Path) -> Path:
        """Atomic write of manifest.json into ``out``."""
        out.mkdir(parents=True, exist_ok=True)
        path = out / "manifest.json"
        tmp = out / ".manifest.json.tmp"
        tmp.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True, default=_jsonable))
        tmp.replace(path)
        return path


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, complex):
        return [v.real, v.imag]
    if isinstance(v, Path):
        return str(v)
    raise TypeError(f"not JSON serializable: {type(v)}")


def write_json(path: Path, data) -> Path:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable))
    tmp.replace(path)
    return path


def emit_csv(path, header, rows) -> Path:
    """CSV with a header row and floats printed to 17 significant digits."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(header))
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def read_csv(path):
    """Header list and float array (inverse of :func:`emit_csv` for numeric rows)."""
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    header = rows[0] if rows else []
    body = np.array(rows[1:], dtype=float) if len(rows) > 1 else np.zeros((0, len(header)))
    return header, body


# --- shared setup ------------------------------------------------------------

def _grids(cfg):
    g = Grid1D(float(cfg["grid"]["length"]), int(cfg["grid"]["nx"]))
    return g, TimeGrid.for_grid(g, float(cfg["time"]["T"]), float(cfg["time"]["cfl"]))


def _field_spec(spec, seed: int, offset: int):
    spec = dict(spec or {"preset": "zero"})
    if spec.get("preset") == "random_fourier" and "seed" not in spec:
        spec["seed"] = seed * 1000 + offset
    return spec


def build_fields(cfg, grid=None):
    grid = grid or _grids(cfg)[0]
    n, seed = int(cfg["rank"]), int(cfg["seed"])
    A = connection_from_spec(grid, n, _field_spec(cfg["connection"], seed, 1))
    V = potential_from_spec(grid, n, _field_spec(cfg["potential"], seed, 2))
    return A, V


def _gamma(cfg):
    g = cfg["gamma"]
    return (g,) if isinstance(g, str) else tuple(g)


def _source_signal(cfg, tg, n):
    src = cfg["source"]
    fiber = src.get("fiber")
    if fiber is None:
        fiber = np.zeros(n, complex)
        fiber[0] = 1.0
    fiber = np.asarray([complex(v) for v in fiber])
    if fiber.size != n:
        raise ConfigError("source.fiber", f"expected {n} entries, got {fiber.size}")
    t = tg.t
    prof = bump(t, float(src["start"]), float(src["stop"])) * np.exp(1j * float(src["carrier"]) * t)
    return BoundarySignal(src["endpoint"], prof[:, None] * fiber[None])


def get_dtn(cfg, workers, manifest):
    if cfg["dtn"]["file"]:
        with manifest.stage("read_dtn"):
            op, _ = read_dtn(cfg["dtn"]["file"])
        return op, None
    g, tg = _grids(cfg)
    A, V = build_fields(cfg, g)
    with manifest.stage("synthesize_dtn"):
        op = synthesize_dtn(A, V, _gamma(cfg), tg, method=cfg["dtn"]["method"], workers=workers,
                            noise=float(cfg["dtn"]["noise"]), seed=int(cfg["seed"]),
                            trace=cfg["dtn"]["trace"])
    return op, (A, V)


# --- subcommands -------------------------------------------------------------

def cmd_simulate(cfg, args, out, manifest):
    g, tg = _grids(cfg)
    A, V = build_fields(cfg, g)
    sig = _source_signal(cfg, tg, A.rank)
    with manifest.stage("solve"):
        u = solve_ibvp(A, V, [sig], tg)
    n = A.rank
    stride = int(cfg["simulate"]["stride"])
    header = ["t", "x"] + [f"{p}u_{k}" for k in range(n) for p in ("Re", "Im")]
    rows = []
    for m in range(0, tg.nt, stride):
        for i, x in enumerate(g.x):
            v = u.values[m, i]
            rows.append([tg.t[m], x] + [c for z in v for c in (z.real, z.imag)])
    manifest.artifacts.append(str(emit_csv(out / "field.csv", header, rows)))
    traces = covariant_neumann_trace(u, A)
    th = ["t"] + [f"{p}{e}_{k}" for e in ENDPOINTS for k in range(n) for p in ("Re", "Im")]
    trows = [[tg.t[m]] + [c for s in traces for z in s.samples[m] for c in (z.real, z.imag)]
             for m in range(tg.nt)]
    manifest.artifacts.append(str(emit_csv(out / "traces.csv", th, trows)))
    manifest.metrics["max_abs_u"] = float(np.max(np.abs(u.values)))
    return EXIT_OK


def cmd_synthesize(cfg, args, out, manifest):
    op, _ = get_dtn(cfg, args.workers, manifest)
    path = write_dtn(out / "dtn.bin", op, {"seed": cfg["seed"], "config_hash": manifest.config_hash})
    manifest.artifacts.append(str(path))
    manifest.metrics.update(size=op.size, fro_norm=float(np.linalg.norm(op.matrix)))
    return EXIT_OK


def _random_pairs(op, count, rng):
    tg, n = op.timegrid, op.n
    t = tg.t
    blocks = np.zeros((len(op.gamma), tg.nt, n, 2 * count), complex)
    for b in range(2 * count):
        e = rng.integers(len(op.gamma))
        a0 = rng.uniform(0.05, 0.6 * tg.T)
        w = rng.uniform(0.2, 0.6) * tg.T
        c = rng.normal(size=n) + 1j * rng.normal(size=n)
        blocks[e, :, :, b] = (bump(t, a0, a0 + w) * np.cos(rng.uniform(0, 20) * t))[:, None] * c[None]
    F = blocks.reshape(-1, 2 * count)
    return F[:, :count], F[:, count:]


def cmd_blago(cfg, args, out, manifest):
    op, fields = get_dtn(cfg, args.workers, manifest)
    rng = np.random.default_rng(int(cfg["seed"]))
    f, h = _random_pairs(op, int(cfg["blago"]["pairs"]), rng)
    with manifest.stage("blago"):
        data = np.einsum("ip,ip->p", f.conj(), BlagoForm(op).lhs_vectors(h))
    oracle = None
    if args.oracle:
        if fields is None:
            fields = build_fields(cfg, op.grid)
        A, V = fields
        tg = op.timegrid
        states = source_states(A, V, op.gamma, tg, np.concatenate([f, h], axis=1))[tg.mid]
        w = op.grid.weights()
        P = f.shape[1]
        uf, uh = states[..., :P], states[..., P:]
        oracle = np.einsum("x,xip,xip->p", w, uf.conj(), uh)
        norms = np.sqrt(np.einsum("x,xip->p", w, np.abs(uf) ** 2)
                        * np.einsum("x,xip->p", w, np.abs(uh) ** 2))
    report = []
    for p in range(f.shape[1]):
        row = {"pair": p, "data_value": complex(data[p])}
        if oracle is not None:
            row["oracle_value"] = complex(oracle[p])
            row["rel_err"] = float(abs(data[p] - oracle[p]) / max(norms[p], 1e-300))
        report.append(row)
    manifest.artifacts.append(str(write_json(out / "blago.json", report)))
    if oracle is not None:
        manifest.metrics["max_rel_err"] = max(r["rel_err"] for r in report)
    return EXIT_OK


def cmd_localize(cfg, args, out, manifest):
    op, fields = get_dtn(cfg, args.workers, manifest)
    ctl = cfg["control"]
    steps = int(cfg["basis"]["steps"])
    with manifest.stage("gram"):
        space = ControlSpace(op, steps, radius=op.grid.length)
    sigma = float(ctl["sigma"])
    with manifest.stage("frame"):
        nodes = frame_nodes(space, sigma)
        frame = build_frame(space, nodes, sigma=sigma, alpha=float(ctl["alpha"]))
    manifest.artifacts.append(str(write_frame(out / "frame.bin", frame)))
    with manifest.stage("shell"):
        locs = build_localizer(space, float(ctl["x"]), reference_sources(op),
                               schedule=tuple(int(k) for k in ctl["k_schedule"]),
                               alphas=tuple(float(a) for a in ctl["alphas"]))
    oracle = None
    if args.oracle:
        if fields is None:
            fields = build_fields(cfg, op.grid)
        oracle = ControlSpace(op, steps, radius=op.grid.length, mode="oracle", fields=fields)
    g = op.grid
    per_node = []
    for i, x in enumerate(frame.nodes):
        row = {"x": float(x), "failed": bool(frame.failed[i]),
               "gram_deviation": float(np.max(np.abs(frame.gram[i] - np.eye(frame.n)))),
               "norm": float(np.real(np.trace(frame.gram[i])))}
        if oracle is not None:
            st = oracle.states(oracle.sources(frame.coeffs[i].T))
            ker = kernel_weights(g.x, x, sigma)
            lo, hi = g.x[ker > 0].min(), g.x[ker > 0].max()
            row["oracle_mass_outside"] = max(oracle_mass_outside(st[:, :, l], g, lo, hi)
                                             for l in range(frame.n))
        per_node.append(row)
    shells = []
    for loc in locs:
        for s in loc.steps:
            row = {"reference": loc.reference, "k": s.k, "alpha": s.alpha, "leakage": s.leakage,
                   "norm": s.norm, "shell": [s.shell.lo, s.shell.hi]}
            if oracle is not None:
                st = oracle.states(oracle.sources(s.coeffs[:, None]))[:, :, 0]
                row["oracle_mass_outside"] = oracle_mass_outside(st, g, s.shell.lo, s.shell.hi)
            shells.append(row)
    manifest.artifacts.append(str(write_json(out / "localize.json", {"nodes": per_node, "shells": shells})))
    manifest.metrics.update(nodes=len(per_node), failed=int(frame.failed.sum()))
    return EXIT_OK


def cmd_reconstruct(cfg, args, out, manifest):
    op, fields = get_dtn(cfg, args.workers, manifest)
    ctl, rc = cfg["control"], cfg["recon"]
    with manifest.stage("reconstruct"):
        res, frame, _ = reconstruct(op, sigma=float(ctl["sigma"]), alpha=float(ctl["alpha"]),
                                    shifts=int(rc["shifts"]), probes=rc["probes"], seed=int(cfg["seed"]),
                                    steps=int(cfg["basis"]["steps"]), free_speed=bool(rc["free_speed"]))
    manifest.artifacts.append(str(write_recon_csv(out / "recon.csv", res)))
    truth = fields
    if truth is None and args.oracle:
        truth = build_fields(cfg, op.grid)
    with manifest.stage("report"):
        rep = recon_report(res, truth)
    manifest.artifacts.append(str(write_json(out / "recon.json", rep)))
    manifest.metrics.update({k: v for k, v in rep.items() if np.isscalar(v)})
    return EXIT_OK


def _load_pair(spec, label):
    if not isinstance(spec, dict) or "connection" not in spec:
        raise ConfigError(f"gauge.{label}", "expected {connection: path, potential: path}")
    ga, a = read_field_csv(spec["connection"])
    if spec.get("potential"):
        gv, v = read_field_csv(spec["potential"])
        if gv != ga:
            raise ConfigError(f"gauge.{label}.potential", "grid differs from the connection table")
    else:
        v = np.zeros_like(a)
    return ConnectionField(ga, a), PotentialField(ga, v)


def cmd_gauge(cfg, args, out, manifest):
    gc = cfg["gauge"]
    if gc["a"] is None and gc["b"] is None:
        g, _ = _grids(cfg)
        A, VA = build_fields(cfg, g)
        B, VB = A, VA
    else:
        A, VA = _load_pair(gc["a"], "a")
        B, VB = _load_pair(gc["b"], "b")
    with manifest.stage("compare"):
        verdict = gauge_equivalent(A, VA, B, VB, tol=float(gc["tol"]), anchor=gc["anchor"])
    n = A.rank
    header = ["x"] + [f"{p}U_{i}{j}" for i in range(n) for j in range(n) for p in ("Re", "Im")]
    rows = [[x] + [c for z in u.ravel() for c in (z.real, z.imag)] for x, u in zip(A.grid.x, verdict.witness)]
    manifest.artifacts.append(str(emit_csv(out / "witness.csv", header, rows)))
    data = {"equivalent": verdict.equivalent, "distance": verdict.distance, "components": verdict.components,
            "tol": float(gc["tol"]), "anchor": gc["anchor"]}
    manifest.artifacts.append(str(write_json(out / "gauge.json", data)))
    manifest.metrics.update(distance=verdict.distance, equivalent=verdict.equivalent)
    return EXIT_OK


def cmd_cylinder(cfg, args, out, manifest):
    cc = cfg["cylinder"]
    length = float(cc["length"] if cc["length"] is not None else cfg["grid"]["length"])
    nx = int(cc["nx"] if cc["nx"] is not None else cfg["grid"]["nx"])
    g = Grid1D(length, nx)
    n = int(cfg["rank"])
    spec = cc["connection"] if cc["connection"] is not None else cfg["connection"]
    A0 = connection_from_spec(g, n, _field_spec(spec, int(cfg["seed"]), 1))
    P0 = TransversalOperator(A0)
    lam1 = float(dirichlet_spectrum(P0, 1)[0])
    lam = float(cc["lambda"]) if cc["lambda"] is not None else 0.5 * lam1
    if cc["h"] is None:
        h = np.random.default_rng(int(cfg["seed"])).normal(size=2 * n).astype(complex)
    else:
        h = np.asarray([complex(v) for v in cc["h"]])
    with manifest.stage("cylinder"):
        rep = cylinder_relation_check(P0, lam, [int(k) for k in cc["k"]], h)
    rep["spectrum"] = dirichlet_spectrum(P0, min(5, P0.size)).tolist()
    manifest.artifacts.append(str(write_json(out / "cylinder.json", rep)))
    manifest.metrics.update(lambda_1=lam1, cross_consistency=rep["cross_consistency"],
                            direct_spectral_gap=rep["direct_spectral_gap"])
    return EXIT_OK


def cmd_accept(cfg, args, out, manifest):
    from .acceptance import run_all

    only = cfg["accept"]["only"]
    keys = None if only is None else (only.split(",") if isinstance(only, str) else list(only))
    with manifest.stage("accept"):
        results = run_all(keys, workers=args.workers, log=print)
    rows = [{"criterion": r.key, "title": r.title, "passed": bool(r.passed), "metrics": r.metrics,
             "thresholds": r.thresholds, "seconds": r.seconds, "notes": r.notes} for r in results]
    manifest.artifacts.append(str(write_json(out / "acceptance.json", rows)))
    manifest.metrics.update({r.key: bool(r.passed) for r in results})
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} criteria passed")
    return EXIT_OK if passed == len(results) else EXIT_ACCEPT


COMMANDS = {
    "simulate": cmd_simulate, "synthesize-dtn": cmd_synthesize, "blago-check": cmd_blago,
    "localize": cmd_localize, "reconstruct": cmd_reconstruct, "gauge-compare": cmd_gauge,
    "cylinder-check": cmd_cylinder, "accept": cmd_accept,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bclab", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="YAML configuration file")
    p.add_argument("--out", help="output directory (overrides config 'out')")
    p.add_argument("--seed", type=int, help="seed for all randomized fields and sources")
    p.add_argument("--workers", type=int, default=None, help="worker processes (default: all cores)")
    p.add_argument("--deterministic", action="store_true", help="sequential execution and reductions")
    p.add_argument("--oracle", action="store_true", help="enable interior-field cross-checks")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None, environ=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out:
        over["out"] = args.out
    try:
        cfg = load_config(args.config, environ, over)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    args.workers = 1 if args.deterministic else (args.workers or os.cpu_count() or 1)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config_hash(cfg), args.subcommand)
    write_json(out / "config.resolved.json", cfg)
    try:
        code = COMMANDS[args.subcommand](cfg, args, out, manifest)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        manifest.status = "config-error"
        code = EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        manifest.status = "numerical-failure"
        code = EXIT_NUMERIC
    if code == EXIT_ACCEPT:
        manifest.status = "acceptance-failure"
    manifest.write(out)
    return code


def main():  # pragma: no cover
    sys.exit(run())


if __name__ == "__main__":  # pragma: no cover
    main()
