import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bclab.bundle import (
    BundleError,
    ConnectionField,
    GaugeTransform,
    Grid1D,
    PotentialField,
    SectionField,
    covariant_dx,
    dagger,
    gauge_transform_connection,
    gauge_transform_potential,
    project_structures,
)
from bclab.gauge import wilson_line
from bclab.presets import random_connection, random_gauge, random_potential

G = Grid1D(1.0, 201)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def complex_field(nx, n):
    return st.tuples(arrays(float, (nx, n, n), elements=finite),
                     arrays(float, (nx, n, n), elements=finite)).map(lambda p: p[0] + 1j * p[1])


def test_grid_rejects_nonuniform():
    with pytest.raises(BundleError):
        Grid1D.from_points([0.0, 0.1, 0.3, 0.4])
    assert Grid1D.from_points(np.linspace(0, 2, 11)) == Grid1D(2.0, 11)


def test_identity_gauge_leaves_connection(rng):
    A = random_connection(G, 2, rng)
    B = gauge_transform_connection(A, GaugeTransform.identity(G, 2))
    np.testing.assert_allclose(B.coeff, A.coeff, atol=1e-14)


def _scalar_gauge_error(nx):
    g = Grid1D(1.0, nx)
    x = g.x
    a = np.cos(3 * x)
    theta = 0.7 * np.sin(2 * np.pi * x) + x ** 2
    A = ConnectionField(g, (1j * a)[:, None, None])
    U = GaugeTransform(g, np.exp(1j * theta)[:, None, None])
    B = gauge_transform_connection(A, U)
    dtheta = 1.4 * np.pi * np.cos(2 * np.pi * x) + 2 * x
    return np.abs(B.coeff[:, 0, 0] - 1j * (a + dtheta))


def test_scalar_gauge_formula():
    coarse, fine = _scalar_gauge_error(101), _scalar_gauge_error(201)
    assert fine.max() < 2e-5
    # fourth order away from the one-sided end stencils
    assert coarse[2:-2].max() / fine[::2][2:-2].max() > 12


def test_boundary_fixed_gauge_keeps_wilson_line(rng):
    A = random_connection(G, 2, rng)
    U = random_gauge(G, 2, rng)
    assert U.boundary_fixed
    B = gauge_transform_connection(A, U)
    np.testing.assert_allclose(wilson_line(B), wilson_line(A), atol=1e-6)


def test_potential_transform_examples(rng):
    V = random_potential(G, 2, rng)
    U = random_gauge(G, 2, rng)
    np.testing.assert_allclose(gauge_transform_potential(V, GaugeTransform.identity(G, 2)).coeff, V.coeff)
    zero = gauge_transform_potential(PotentialField.zero(G, 2), U)
    assert np.all(zero.coeff == 0)
    W = gauge_transform_potential(V, U)
    np.testing.assert_allclose(np.linalg.eigvalsh(W.coeff), np.linalg.eigvalsh(V.coeff), atol=1e-12)


def test_covariant_dx_examples():
    A0 = ConnectionField.zero(G, 2)
    const = SectionField(G, np.tile([1.0 + 2j, -0.5], (G.nx, 1)))
    assert np.max(np.abs(covariant_dx(const, A0).values)) < 1e-12
    c = 2.0
    A = ConnectionField(G, np.full((G.nx, 1, 1), 1j * c))
    u = SectionField(G, np.exp(-1j * c * G.x))
    # central differences: error c^3 h^2 / 6 inside, twice that at the ends
    assert np.max(np.abs(covariant_dx(u, A).values)) < c ** 3 * G.h ** 2


def _leibniz_defect(nx, seed=4):
    g = Grid1D(1.0, nx)
    r = np.random.default_rng(seed)
    A = random_connection(g, 2, r)
    x = g.x[:, None]
    u = SectionField(g, np.exp(1j * np.array([1.0, 2.0]) * x) * np.cos(x))
    v = SectionField(g, np.sin(3 * x + np.array([0.0, 1.0])) + 1j * x)
    lhs = np.gradient(np.sum(u.values.conj() * v.values, axis=1), g.h)
    du, dv = covariant_dx(u, A).values, covariant_dx(v, A).values
    rhs = np.sum(du.conj() * v.values + u.values.conj() * dv, axis=1)
    return np.max(np.abs(lhs - rhs)[1:-1])


def test_metric_compatibility_second_order():
    coarse, fine = _leibniz_defect(101), _leibniz_defect(201)
    assert fine < 1e-3
    assert coarse / fine > 3.5


def test_project_structures_examples():
    g = Grid1D(1.0, 5)
    skew = np.tile(np.array([[1j, 2], [-2, -0.5j]]), (5, 1, 1))
    A, V, dA, dV = project_structures(skew, np.zeros_like(skew), g)
    np.testing.assert_array_equal(A.coeff, skew)
    assert dA == 0.0
    eye = np.tile(np.eye(2, dtype=complex), (5, 1, 1))
    A, _, dA, _ = project_structures(eye, eye, g)
    assert np.all(A.coeff == 0)
    assert dA == pytest.approx(np.sqrt(2))


@given(complex_field(4, 2), st.integers(0, 2 ** 31))
def test_projection_is_nearest_skew_hermitian(m, seed):
    g = Grid1D(1.0, 4)
    A, V, _, _ = project_structures(m, m, g)
    np.testing.assert_allclose(A.coeff, 0.5 * (m - dagger(m)), atol=1e-14)
    np.testing.assert_allclose(V.coeff, 0.5 * (m + dagger(m)), atol=1e-14)
    r = np.random.default_rng(seed)
    base = np.linalg.norm(m - A.coeff, axis=(1, 2))
    for _ in range(5):
        p = r.normal(size=m.shape) + 1j * r.normal(size=m.shape)
        other = A.coeff + 1e-2 * (p - dagger(p))
        assert np.all(np.linalg.norm(m - other, axis=(1, 2)) >= base - 1e-12)


@given(complex_field(7, 2), complex_field(7, 2))
def test_structures_hold_after_construction(a, v):
    g = Grid1D(1.0, 7)
    A, V = ConnectionField(g, a), PotentialField(g, v)
    np.testing.assert_allclose(dagger(A.coeff), -A.coeff, atol=1e-12)
    np.testing.assert_allclose(dagger(V.coeff), V.coeff, atol=1e-12)


@given(st.integers(0, 2 ** 31), st.integers(1, 3))
def test_transforms_preserve_structure(seed, n):
    g = Grid1D(1.0, 41)
    r = np.random.default_rng(seed)
    A, V = random_connection(g, n, r), random_potential(g, n, r)
    U = random_gauge(g, n, r, boundary_fixed=False)
    B = gauge_transform_connection(A, U)
    W = gauge_transform_potential(V, U)
    assert np.max(np.abs(dagger(B.coeff) + B.coeff)) <= 1e-12
    assert np.max(np.abs(dagger(W.coeff) - W.coeff)) <= 1e-12


def test_transform_then_inverse_recovers(rng):
    errs = []
    for nx in (101, 201):
        g = Grid1D(1.0, nx)
        r = np.random.default_rng(3)
        A = random_connection(g, 2, r)
        U = random_gauge(g, 2, r)
        back = gauge_transform_connection(gauge_transform_connection(A, U), U.inverse())
        errs.append(np.max(np.abs(back.coeff - A.coeff)))
    # the derivative terms cancel exactly, leaving rounding only
    assert max(errs) < 1e-10


def test_composition_matches_product():
    r = np.random.default_rng(8)
    A = random_connection(G, 2, r)
    U1, U2 = random_gauge(G, 2, r), random_gauge(G, 2, r)
    two = gauge_transform_connection(gauge_transform_connection(A, U1), U2)
    one = gauge_transform_connection(A, U1.compose(U2))
    # the difference is the discrete Leibniz defect of the 4th-order stencil
    assert np.max(np.abs(two.coeff - one.coeff)) < 1e-6


def test_rejects_bad_inputs(rng):
    A = random_connection(G, 2, rng)
    with pytest.raises(BundleError):
        GaugeTransform(G, np.tile(2 * np.eye(2), (G.nx, 1, 1)))
    with pytest.raises(BundleError):
        gauge_transform_connection(A, GaugeTransform.identity(Grid1D(1.0, 11), 2))
    with pytest.raises(BundleError):
        gauge_transform_connection(A, GaugeTransform.identity(G, 3))
