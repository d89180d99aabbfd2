import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vrtdom import Direction, LayerSpec, build_double_gauss_quadrature
from vrtdom.core import isotropic_coeffs, rayleigh_coeffs
from vrtdom.phase import (
    assemble_azimuth_kernel,
    dump_kernel_csv,
    evaluate_phase_matrix,
    fourier_basis,
    kernel_blocks,
    legendre_matrix,
    rotation_phase_matrix,
    scattering_matrix,
    wigner_d,
)

from conftest import synthetic_coeffs


def wigner_factorial_sum(j, mp, m, beta):
    """Closed-form Wigner small-d as a finite sum over factorials."""
    f = math.factorial
    total = 0.0
    c, s = math.cos(beta / 2), math.sin(beta / 2)
    for k in range(0, 2 * j + 1):
        args = (j + m - k, k, mp - m + k, j - mp - k)
        if min(args) < 0:
            continue
        num = (-1) ** (mp - m + k) * math.sqrt(f(j + mp) * f(j - mp) * f(j + m) * f(j - m))
        den = f(args[0]) * f(args[1]) * f(args[2]) * f(args[3])
        total += num / den * c ** (2 * j + m - mp - 2 * k) * s ** (mp - m + 2 * k)
    return total


cosines = st.floats(-1.0, 1.0, allow_nan=False)


class TestWigner:
    @given(cosines)
    def test_matches_factorial_sum(self, x):
        beta = math.acos(x)
        for m in range(0, 4):
            for n in (-2, 0, 2):
                d = wigner_d(10, m, n, x)
                for l in range(11):
                    ref = wigner_factorial_sum(l, m, n, beta) if l >= max(abs(m), abs(n)) else 0.0
                    assert abs(d[l] - ref) < 1e-12

    def test_zero_order_is_legendre(self):
        x = np.linspace(-1, 1, 41)
        d = wigner_d(12, 0, 0, x)
        for l in range(13):
            np.testing.assert_allclose(d[l], np.polynomial.legendre.Legendre.basis(l)(x), atol=1e-13)

    def test_high_order_stays_finite(self):
        d = wigner_d(200, 40, 2, np.linspace(-1, 1, 101))
        assert np.all(np.isfinite(d)) and np.abs(d).max() <= 1.0 + 1e-10

    def test_legendre_matrix_below_order_is_zero(self):
        assert not legendre_matrix(1, 2, 0.3).any()


class TestScatteringMatrix:
    def test_rayleigh_closed_form(self):
        x = np.linspace(-1, 1, 21)
        f = scattering_matrix(rayleigh_coeffs(), x)
        np.testing.assert_allclose(f[:, 0, 0], 0.75 * (1 + x**2), atol=1e-14)
        np.testing.assert_allclose(f[:, 1, 1], 0.75 * (1 + x**2), atol=1e-14)
        np.testing.assert_allclose(f[:, 0, 1], -0.75 * (1 - x**2), atol=1e-14)
        np.testing.assert_allclose(f[:, 2, 2], 1.5 * x, atol=1e-14)
        np.testing.assert_allclose(f[:, 3, 3], 1.5 * x, atol=1e-14)
        assert not f[:, 2, 3].any()

    @pytest.mark.parametrize("coeffs", [isotropic_coeffs(), rayleigh_coeffs(), synthetic_coeffs(12)])
    def test_phase_function_normalized(self, coeffs):
        x, w = np.polynomial.legendre.leggauss(64)
        a1 = scattering_matrix(coeffs, x)[:, 0, 0]
        assert abs(0.5 * np.sum(w * a1) - 1.0) < 1e-12


def directions():
    return st.builds(
        Direction,
        st.floats(-1, 1).filter(lambda v: abs(v) > 1e-3),
        st.floats(0, 2 * math.pi),
    )


class TestPhaseMatrix:
    @settings(max_examples=60, deadline=None)
    @given(directions(), directions())
    def test_fourier_route_matches_rotation_route(self, d_in, d_out):
        for coeffs in (rayleigh_coeffs(), synthetic_coeffs(8)):
            layer = LayerSpec(1.0, 1.0, coeffs)
            a = evaluate_phase_matrix(d_in, d_out, layer).m
            b = rotation_phase_matrix(d_in, d_out, layer).m
            np.testing.assert_allclose(a, b, atol=1e-10)

    def test_forward_scattering_is_f_of_zero_angle(self):
        layer = LayerSpec(1.0, 1.0, synthetic_coeffs(8))
        d = Direction(0.4, 1.0)
        f0 = scattering_matrix(layer.coeffs, 1.0)
        np.testing.assert_allclose(evaluate_phase_matrix(d, d, layer).m, f0, atol=1e-10)

    def test_fourier_basis_orders(self):
        f1, f2 = fourier_basis(0, 0.7)
        np.testing.assert_array_equal(f1, np.diag([1.0, 1.0, 0.0, 0.0]))
        np.testing.assert_array_equal(f2, np.diag([0.0, 0.0, 1.0, 1.0]))
        f1, f2 = fourier_basis(2, 0.3)
        c, s = math.cos(0.6), math.sin(0.6)
        np.testing.assert_allclose(np.diag(f1), [2 * c, 2 * c, 2 * s, 2 * s])
        np.testing.assert_allclose(np.diag(f2), [-2 * s, -2 * s, 2 * c, 2 * c])


class TestKernel:
    @pytest.mark.parametrize("m", [0, 1, 3])
    def test_parity_blocks_match_direct_evaluation(self, m):
        layer = LayerSpec(0.9, 1.0, synthetic_coeffs(6))
        q = build_double_gauss_quadrature(5)
        k = assemble_azimuth_kernel(m, layer, q)
        mu = q.nodes
        np.testing.assert_allclose(k.pp, kernel_blocks(m, layer.coeffs, mu, mu), atol=1e-13)
        np.testing.assert_allclose(k.pm, kernel_blocks(m, layer.coeffs, mu, -mu), atol=1e-13)
        np.testing.assert_allclose(k.mp, kernel_blocks(m, layer.coeffs, -mu, mu), atol=1e-13)
        np.testing.assert_allclose(k.mm, kernel_blocks(m, layer.coeffs, -mu, -mu), atol=1e-13)

    def test_orders_beyond_expansion_vanish(self):
        layer = LayerSpec(0.9, 1.0, rayleigh_coeffs())
        q = build_double_gauss_quadrature(3)
        assert assemble_azimuth_kernel(3, layer, q).is_zero()

    def test_csv_dump_shape(self):
        layer = LayerSpec(0.9, 1.0, rayleigh_coeffs())
        text = dump_kernel_csv(assemble_azimuth_kernel(1, layer, build_double_gauss_quadrature(3)))
        lines = text.strip().splitlines()
        assert lines[0].startswith("m,i,j,sign_i,sign_j,a00")
        assert len(lines) == 1 + 4 * 9


def test_low_degree_legendre_matrices():
    np.testing.assert_allclose(legendre_matrix(0, 0, 0.7), np.diag([1.0, 0.0, 0.0, 1.0]), atol=1e-15)
    np.testing.assert_allclose(legendre_matrix(1, 0, 0.3), np.diag([0.3, 0.0, 0.0, 0.3]), atol=1e-15)
    assert not legendre_matrix(2, 3, 0.3).any()


def test_isotropic_kernel_has_one_entry():
    mu = np.array([0.2, -0.5, 0.9])
    k0 = kernel_blocks(0, isotropic_coeffs(), mu, mu)
    expected = np.zeros((4, 4))
    expected[0, 0] = 1.0
    np.testing.assert_allclose(k0, np.broadcast_to(expected, k0.shape), atol=1e-15)
    assert not kernel_blocks(1, isotropic_coeffs(), mu, mu).any()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 3), st.floats(-1, 1), st.floats(-1, 1))
def test_kernel_parity(m, a, b):
    d = np.diag([1.0, 1.0, -1.0, -1.0])
    coeffs = rayleigh_coeffs()
    direct = kernel_blocks(m, coeffs, [-a], [-b])[0, 0]
    np.testing.assert_allclose(direct, d @ kernel_blocks(m, coeffs, [a], [b])[0, 0] @ d, atol=1e-13)
