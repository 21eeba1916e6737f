"""Named analytic field presets, random smooth fields and CSV field tables.

Matrix entries in presets may be given as numbers, ``[re, im]`` pairs or
strings such as ``"0.3-1.2j"``.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .bundle import (
    BundleError,
    ConnectionField,
    GaugeTransform,
    Grid1D,
    PotentialField,
    antihermitian_part,
    hermitian_part,
)

PRESETS = ("zero", "constant", "gaussian_bump", "fourier", "random_fourier")


def parse_complex(v) -> complex:
    if isinstance(v, (list, tuple)):
        if len(v) != 2:
            raise BundleError(f"complex pair must have 2 entries, got {v!r}")
        return complex(float(v[0]), float(v[1]))
    if isinstance(v, str):
        return complex(v.replace(" ", "").replace("i", "j"))
    return complex(v)


def parse_matrix(m, n: int) -> np.ndarray:
    if np.isscalar(m) or isinstance(m, str):
        return parse_complex(m) * np.eye(n, dtype=complex)
    rows = [[parse_complex(v) for v in row] for row in m]
    out = np.array(rows, dtype=complex)
    if out.shape != (n, n):
        raise BundleError(f"matrix has shape {out.shape}, expected ({n}, {n})")
    return out


def matrix_profile(grid: Grid1D, n: int, spec: dict) -> np.ndarray:
    """Evaluate a preset description to raw ``(nx, n, n)`` samples."""
    kind = spec.get("preset", "zero")
    x = grid.x
    if kind == "zero":
        return np.zeros((grid.nx, n, n), complex)
    if kind == "constant":
        m = parse_matrix(spec["value"], n)
        return np.broadcast_to(m, (grid.nx, n, n)).copy()
    if kind == "gaussian_bump":
        m = parse_matrix(spec["amplitude"], n)
        c = float(spec.get("center", 0.5 * grid.length))
        w = float(spec.get("width", 0.1 * grid.length))
        prof = np.exp(-0.5 * ((x - c) / w) ** 2)
        return prof[:, None, None] * m
    if kind == "fourier":
        out = np.zeros((grid.nx, n, n), complex)
        if "mean" in spec:
            out += parse_matrix(spec["mean"], n)
        for k, c in enumerate(spec.get("cos", []), start=1):
            out += np.cos(2 * np.pi * k * x / grid.length)[:, None, None] * parse_matrix(c, n)
        for k, s in enumerate(spec.get("sin", []), start=1):
            out += np.sin(2 * np.pi * k * x / grid.length)[:, None, None] * parse_matrix(s, n)
        return out
    if kind == "random_fourier":
        rng = np.random.default_rng(spec.get("seed", 0))
        return random_smooth_matrices(
            grid, n, rng, modes=int(spec.get("modes", 3)), amplitude=float(spec.get("amplitude", 1.0))
        )
    raise BundleError(f"unknown preset {kind!r}; expected one of {PRESETS}")


def random_smooth_matrices(grid: Grid1D, n: int, rng, modes: int = 3, amplitude: float = 1.0):
    """Random trigonometric matrix field with decaying mode amplitudes."""
    x = grid.x / grid.length
    out = np.zeros((grid.nx, n, n), complex)
    for k in range(modes + 1):
        c = rng.normal(size=(2, n, n)) + 1j * rng.normal(size=(2, n, n))
        c *= amplitude / (1.0 + k) ** 2 / np.sqrt(2 * n)
        out += np.cos(np.pi * k * x)[:, None, None] * c[0]
        if k:
            out += np.sin(np.pi * k * x)[:, None, None] * c[1]
    return out


def random_connection(grid: Grid1D, n: int, rng, modes: int = 3, amplitude: float = 1.0):
    return ConnectionField(grid, antihermitian_part(random_smooth_matrices(grid, n, rng, modes, amplitude)))


def random_potential(grid: Grid1D, n: int, rng, modes: int = 3, amplitude: float = 1.0):
    return PotentialField(grid, hermitian_part(random_smooth_matrices(grid, n, rng, modes, amplitude)))


def random_gauge(grid: Grid1D, n: int, rng, modes: int = 2, amplitude: float = 1.0,
                 boundary_fixed: bool = True) -> GaugeTransform:
    """Random smooth U(x) = expm(S(x)); S vanishes at both ends when boundary-fixed."""
    s = antihermitian_part(random_smooth_matrices(grid, n, rng, modes, amplitude))
    if boundary_fixed:
        s = s * np.sin(np.pi * grid.x / grid.length)[:, None, None]
    u = np.array([expm(m) for m in s])
    if boundary_fixed:
        u[0] = u[-1] = np.eye(n)
    return GaugeTransform(grid, u)


def connection_from_spec(grid: Grid1D, n: int, spec: dict | None) -> ConnectionField:
    spec = spec or {"preset": "zero"}
    if "table" in spec:
        g, raw = read_field_csv(spec["table"])
        if g != grid:
            raise BundleError(f"table grid {g} does not match configured grid {grid}")
        return ConnectionField(grid, raw)
    return ConnectionField(grid, antihermitian_part(matrix_profile(grid, n, spec)))


def potential_from_spec(grid: Grid1D, n: int, spec: dict | None) -> PotentialField:
    spec = spec or {"preset": "zero"}
    if "table" in spec:
        g, raw = read_field_csv(spec["table"])
        if g != grid:
            raise BundleError(f"table grid {g} does not match configured grid {grid}")
        return PotentialField(grid, raw)
    return PotentialField(grid, hermitian_part(matrix_profile(grid, n, spec)))


# --- CSV tables -------------------------------------------------------------

def field_csv_header(n: int) -> list[str]:
    cols = ["x"]
    for i in range(n):
        for j in range(n):
            cols += [f"re_{i}{j}", f"im_{i}{j}"]
    return cols


def write_field_csv(path, grid: Grid1D, coeff: np.ndarray) -> Path:
    """Write a matrix field: columns x, then Re/Im of each entry in row-major order."""
    path = Path(path)
    coeff = np.asarray(coeff)
    n = coeff.shape[1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(field_csv_header(n))
        for x, m in zip(grid.x, coeff):
            row = [x]
            for v in m.ravel():
                row += [v.real, v.imag]
            w.writerow([f"{v:.17g}" for v in row])
    return path


def read_field_csv(path):
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[0] != "x" or (len(header) - 1) % 2:
        raise BundleError(f"{path}: malformed field table header")
    n2 = (len(header) - 1) // 2
    n = int(round(np.sqrt(n2)))
    if n * n != n2:
        raise BundleError(f"{path}: entry count {n2} is not a square")
    data = np.array(body, dtype=float)
    grid = Grid1D.from_points(data[:, 0])
    vals = data[:, 1::2] + 1j * data[:, 2::2]
    return grid, vals.reshape(-1, n, n)
