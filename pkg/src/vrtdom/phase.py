"""Generalized spherical functions, azimuthal kernels and phase matrices.

The associated Legendre matrices are built from Wigner d-functions
``d^l_{mn}(theta)`` with ``mu = cos(theta)``::

    P_l^m = d^l_{m,0}
    R_l^m = -(d^l_{m,2} + d^l_{m,-2}) / 2
    T_l^m = -(d^l_{m,2} - d^l_{m,-2}) / 2

    Pi_l^m(mu) = [[P, 0,  0, 0],
                  [0, R, -T, 0],
                  [0,-T,  R, 0],
                  [0, 0,  0, P]]

``d^l_{mn}`` is generated by the three-term recurrence in ``l``
(s = l, starting at s_min = max(|m|, |n|))::

    s sqrt((s+1)^2 - m^2) sqrt((s+1)^2 - n^2) d^{s+1}
        = (2s+1) (s(s+1) x - m n) d^s - (s+1) sqrt(s^2 - m^2) sqrt(s^2 - n^2) d^{s-1}

    d^{s_min} = xi 2^{-s_min} sqrt((2 s_min)! / (|m-n|! |m+n|!))
                (1 - x)^{|m-n|/2} (1 + x)^{|m+n|/2}

with ``xi = 1`` for ``n >= m`` and ``(-1)^(m-n)`` otherwise.

With this layout the phase matrix expands as::

    P(mu, phi; mu', phi') = sum_m sum_k Phi_k^m(phi - phi') A^m(mu, mu') D_k
    A^m(mu, mu') = sum_{l>=m} Pi_l^m(mu) B_l Pi_l^m(mu')

where ``(mu', phi')`` is the incoming and ``(mu, phi)`` the scattered
propagation direction.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .core import Direction, LayerSpec, Quadrature, MuellerMatrix, cos_scattering_angle

D_PARITY = np.diag([1.0, 1.0, -1.0, -1.0])
D1 = np.diag([1.0, 1.0, 0.0, 0.0])
D2 = np.diag([0.0, 0.0, 1.0, 1.0])


def wigner_d(lmax: int, m: int, n: int, mu) -> np.ndarray:
    """``d^l_{mn}(arccos mu)`` for ``l = 0..lmax``; shape ``(lmax + 1,) + mu.shape``."""
    x = np.asarray(mu, dtype=float)
    out = np.zeros((lmax + 1,) + x.shape)
    smin = max(abs(m), abs(n))
    if lmax < smin:
        return out
    xi = 1.0 if n >= m else (-1.0) ** (m - n)
    logc = 0.5 * (math.lgamma(2 * smin + 1) - math.lgamma(abs(m - n) + 1) - math.lgamma(abs(m + n) + 1))
    pref = xi * math.exp(logc - smin * math.log(2.0))
    one_m = np.clip(1.0 - x, 0.0, 2.0)
    one_p = np.clip(1.0 + x, 0.0, 2.0)
    out[smin] = pref * one_m ** (abs(m - n) / 2.0) * one_p ** (abs(m + n) / 2.0)
    if smin == 0 and lmax >= 1:
        out[1] = x
        start = 1
    else:
        start = smin
    for s in range(start, lmax):
        a = (2 * s + 1) * (s * (s + 1) * x - m * n)
        b = (s + 1) * math.sqrt(max(s * s - m * m, 0)) * math.sqrt(max(s * s - n * n, 0))
        c = s * math.sqrt((s + 1) ** 2 - m * m) * math.sqrt((s + 1) ** 2 - n * n)
        prev = out[s - 1] if s >= 1 else 0.0
        out[s + 1] = (a * out[s] - b * prev) / c
    return out


def legendre_matrices(lmax: int, m: int, mu) -> np.ndarray:
    """Stack of ``Pi_l^m(mu)`` for ``l = 0..lmax``; shape ``(lmax + 1,) + mu.shape + (4, 4)``.

    Rows with ``l < m`` are zero.
    """
    mu = np.asarray(mu, dtype=float)
    out = np.zeros((lmax + 1,) + mu.shape + (4, 4))
    if m > lmax:
        return out
    p = wigner_d(lmax, m, 0, mu)
    dp = wigner_d(lmax, m, 2, mu)
    dm = wigner_d(lmax, m, -2, mu)
    r = -0.5 * (dp + dm)
    t = -0.5 * (dp - dm)
    out[..., 0, 0] = p
    out[..., 3, 3] = p
    out[..., 1, 1] = r
    out[..., 2, 2] = r
    out[..., 1, 2] = -t
    out[..., 2, 1] = -t
    return out


def legendre_matrix(l: int, m: int, mu: float) -> np.ndarray:
    """Single ``Pi_l^m(mu)``; the zero matrix when ``m > l``."""
    if m > l:
        return np.zeros((4, 4))
    return legendre_matrices(l, m, np.asarray(mu, dtype=float))[l]


def kernel_blocks(m: int, coeffs: np.ndarray, mu_out, mu_in) -> np.ndarray:
    """``A^m(mu_out[a], mu_in[b])`` for all pairs; shape ``(len(mu_out), len(mu_in), 4, 4)``."""
    coeffs = np.asarray(coeffs, dtype=float)
    n_terms = coeffs.shape[0]
    mu_out = np.atleast_1d(np.asarray(mu_out, dtype=float))
    mu_in = np.atleast_1d(np.asarray(mu_in, dtype=float))
    if m >= n_terms:
        return np.zeros((len(mu_out), len(mu_in), 4, 4))
    pa = legendre_matrices(n_terms - 1, m, mu_out)[m:]
    pb = legendre_matrices(n_terms - 1, m, mu_in)[m:]
    return np.einsum("lapq,lqr,lbrs->abps", pa, coeffs[m:], pb, optimize=True)


@dataclass(frozen=True, eq=False)
class AzimuthKernel:
    """Signed-node blocks of ``A^m``: ``pp[i,j] = A(mu_i, mu_j)``, ``pm[i,j] = A(mu_i, -mu_j)``,
    ``mp[i,j] = A(-mu_i, mu_j)``, ``mm[i,j] = A(-mu_i, -mu_j)``."""

    m: int
    pp: np.ndarray
    pm: np.ndarray
    mp: np.ndarray
    mm: np.ndarray

    @property
    def n(self) -> int:
        return self.pp.shape[0]

    def is_zero(self) -> bool:
        return not (self.pp.any() or self.pm.any())


def assemble_azimuth_kernel(m: int, layer: LayerSpec, quad: Quadrature) -> AzimuthKernel:
    """Kernel blocks on the quadrature nodes; downward blocks come from the parity identity."""
    coeffs = layer.coeffs
    n_terms = coeffs.shape[0]
    mu = quad.nodes
    n = len(mu)
    if m >= n_terms:
        z = np.zeros((n, n, 4, 4))
        return AzimuthKernel(m, z, z, z, z)
    pi = legendre_matrices(n_terms - 1, m, mu)[m:]
    sign = np.array([(-1.0) ** (l - m) for l in range(m, n_terms)])
    b = coeffs[m:]
    pp = np.einsum("lapq,lqr,lbrs->abps", pi, b, pi, optimize=True)
    # A(mu, -mu') = sum_l (-1)^(l-m) Pi(mu) B D Pi(mu') D
    bd = np.einsum("l,lqr,rs->lqs", sign, b, D_PARITY)
    pm = np.einsum("lapq,lqr,lbrs,st->abpt", pi, bd, pi, D_PARITY, optimize=True)
    mp = np.einsum("pq,abqr,rs->abps", D_PARITY, pm, D_PARITY)
    mm = np.einsum("pq,abqr,rs->abps", D_PARITY, pp, D_PARITY)
    return AzimuthKernel(m, pp, pm, mp, mm)


def dump_kernel_csv(kernel: AzimuthKernel) -> str:
    """CSV rows ``m,i,j,sign_i,sign_j,a00..a33`` for every signed node pair."""
    buf = io.StringIO()
    buf.write("m,i,j,sign_i,sign_j," + ",".join(f"a{p}{q}" for p in range(4) for q in range(4)) + "\n")
    blocks = {(1, 1): kernel.pp, (1, -1): kernel.pm, (-1, 1): kernel.mp, (-1, -1): kernel.mm}
    for (si, sj), blk in blocks.items():
        for i in range(kernel.n):
            for j in range(kernel.n):
                vals = ",".join(f"{v:.17g}" for v in blk[i, j].ravel())
                buf.write(f"{kernel.m},{i},{j},{si},{sj},{vals}\n")
    return buf.getvalue()


def fourier_basis(m: int, phi: float) -> tuple[np.ndarray, np.ndarray]:
    """``(Phi_1^m(phi), Phi_2^m(phi))``."""
    f = 1.0 if m == 0 else 2.0
    c, s = math.cos(m * phi), math.sin(m * phi)
    return f * np.diag([c, c, s, s]), f * np.diag([-s, -s, c, c])


def evaluate_phase_matrix(d_in: Direction, d_out: Direction, layer: LayerSpec) -> MuellerMatrix:
    """Phase matrix from the azimuthal Fourier series (incoming ``d_in``, scattered ``d_out``)."""
    coeffs = layer.coeffs
    out = np.zeros((4, 4))
    for m in range(coeffs.shape[0]):
        a = kernel_blocks(m, coeffs, [d_out.mu], [d_in.mu])[0, 0]
        f1, f2 = fourier_basis(m, d_out.phi - d_in.phi)
        out += f1 @ a @ D1 + f2 @ a @ D2
    return MuellerMatrix(out)


# ------------------------------------------------------------ direct route


def scattering_matrix(coeffs: np.ndarray, cos_theta) -> np.ndarray:
    """Scattering-plane matrix ``F(Theta)`` summed directly from the Greek coefficients.

    Returns shape ``cos_theta.shape + (4, 4)`` with the layout
    ``[[a1, b1, 0, 0], [b1, a2, 0, 0], [0, 0, a3, b2], [0, 0, -b2, a4]]``.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    x = np.clip(np.asarray(cos_theta, dtype=float), -1.0, 1.0)
    lmax = coeffs.shape[0] - 1
    beta, alpha, gamma = coeffs[:, 0, 0], coeffs[:, 1, 1], coeffs[:, 0, 1]
    delta, eps, zeta = coeffs[:, 3, 3], coeffs[:, 3, 2], coeffs[:, 2, 2]
    d00 = wigner_d(lmax, 0, 0, x)
    d22 = wigner_d(lmax, 2, 2, x)
    d2m2 = wigner_d(lmax, 2, -2, x)
    d02 = wigner_d(lmax, 0, 2, x)
    a1 = np.tensordot(beta, d00, 1)
    a4 = np.tensordot(delta, d00, 1)
    s = np.tensordot(alpha + zeta, d22, 1)
    d = np.tensordot(alpha - zeta, d2m2, 1)
    b1 = -np.tensordot(gamma, d02, 1)
    b2 = np.tensordot(eps, d02, 1)
    f = np.zeros(x.shape + (4, 4))
    f[..., 0, 0] = a1
    f[..., 0, 1] = f[..., 1, 0] = b1
    f[..., 1, 1] = 0.5 * (s + d)
    f[..., 2, 2] = 0.5 * (s - d)
    f[..., 2, 3] = b2
    f[..., 3, 2] = -b2
    f[..., 3, 3] = a4
    return f


def meridian_basis(d: Direction) -> tuple[np.ndarray, np.ndarray]:
    """``(e_theta, e_phi)`` for a propagation direction; ``e_theta x e_phi = n``."""
    ct = d.mu
    st = math.sqrt(max(0.0, 1.0 - ct * ct))
    cp, sp = math.cos(d.phi), math.sin(d.phi)
    return np.array([ct * cp, ct * sp, -st]), np.array([-sp, cp, 0.0])


def frame_rotation(e1, e2, f1) -> np.ndarray:
    """Mueller matrix taking Stokes parameters in basis ``(e1, e2)`` to basis ``(f1, f2)``.

    Both bases are orthonormal, transverse to the same propagation direction and
    share its handedness, so the change is a rotation by ``psi``.
    """
    psi = math.atan2(float(np.dot(f1, e2)), float(np.dot(f1, e1)))
    c, s = math.cos(2.0 * psi), math.sin(2.0 * psi)
    return np.array([[1.0, 0, 0, 0], [0, c, s, 0], [0, -s, c, 0], [0, 0, 0, 1.0]])


def rotation_phase_matrix(d_in: Direction, d_out: Direction, layer: LayerSpec) -> MuellerMatrix:
    """Phase matrix by rotating Stokes frames into and out of the scattering plane."""
    ni, ns = d_in.unit_vector(), d_out.unit_vector()
    perp = np.cross(ni, ns)
    norm = np.linalg.norm(perp)
    ti, pi_ = meridian_basis(d_in)
    ts, ps = meridian_basis(d_out)
    if norm < 1e-12:
        # forward/backward: F commutes with rotations, any plane containing ni works
        perp = pi_
    else:
        perp = perp / norm
    e_in = np.cross(perp, ni)
    e_out = np.cross(perp, ns)
    into_plane = frame_rotation(ti, pi_, e_in)
    out_of_plane = frame_rotation(e_out, perp, ts)
    f = scattering_matrix(layer.coeffs, cos_scattering_angle(d_in, d_out))
    return MuellerMatrix(out_of_plane @ f @ into_plane)
