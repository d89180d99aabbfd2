"""Homogeneous discrete-ordinate solution for one Fourier order.

Stream vectors are node-major (``index = 4 * i + stokes``).  With
``M = diag(mu_i) (x) I_4`` and the scattering blocks

    S11[i, j] = (omega / 2) alpha_j A(mu_i, mu_j)
    T12[i, j] = (omega / 2) alpha_j A(mu_i, -mu_j) D

the half-size operators are

    E = (I - S11 - T12) M^-1,      F = (I - S11 + T12) M^-1

and ``F E X = lambda X``.  For ``nu = lambda^{-1/2}`` (``Re nu > 0``) the mode
decaying downward as ``exp(-tau / nu)`` has upward streams ``phi_minus`` and
downward streams ``Delta phi_plus`` where

    phi_plus  = M^-1 (I + nu E) X / 2
    phi_minus = M^-1 (I - nu E) X / 2

and ``Delta = I_N (x) diag(1, 1, -1, -1)``.  The mirrored mode anchored at the
bottom (``exp(-(tau0 - tau) / nu)``) has upward ``phi_plus`` and downward
``Delta phi_minus``.

``F E`` carries ``1 / mu_min^2`` scaling, so eigenvectors from the half-size
problem lose digits for fine quadratures.  Modes whose full-size residual
exceeds ``REFINE_TOL`` get one or two steps of shifted inverse iteration on the
8N operator.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .core import LayerSpec, NumericalError, Quadrature
from .phase import AzimuthKernel, D_PARITY, legendre_matrices

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-9
REFINE_TOL = 1e-11
NU_CLAMP = 1e12
CONSERVATIVE_TOL = 1e-12
_STOKES_SIGN = np.array([1.0, 1.0, -1.0, -1.0])


def flip(v: np.ndarray) -> np.ndarray:
    """Apply ``Delta`` to stream vector(s) along the last axis."""
    shape = v.shape
    return (v.reshape(shape[:-1] + (-1, 4)) * _STOKES_SIGN).reshape(shape)


def blocks_to_matrix(blocks: np.ndarray) -> np.ndarray:
    """``(N, N, 4, 4)`` node blocks to a dense ``(4N, 4N)`` matrix."""
    n = blocks.shape[0]
    return blocks.transpose(0, 2, 1, 3).reshape(4 * n, 4 * blocks.shape[1])


@dataclass(frozen=True, eq=False)
class ReducedOperators:
    m: int
    omega: float
    mu: np.ndarray
    weights: np.ndarray
    e: np.ndarray
    f: np.ndarray
    s11: np.ndarray
    s12: np.ndarray
    s21: np.ndarray
    s22: np.ndarray

    @property
    def m_diag(self) -> np.ndarray:
        return np.repeat(self.mu, 4)

    @property
    def w_diag(self) -> np.ndarray:
        return np.repeat(self.weights, 4)

    @property
    def size(self) -> int:
        return self.e.shape[0]

    def full_operator(self) -> np.ndarray:
        """``M8^-1 (S - I)`` of the unreduced 8N stream system (upward streams first)."""
        n4 = self.size
        s = np.block([[self.s11, self.s12], [self.s21, self.s22]])
        m8 = np.concatenate([self.m_diag, -self.m_diag])
        return (s - np.eye(2 * n4)) / m8[:, None]


def build_reduced_operators(
    m: int, layer: LayerSpec, quad: Quadrature, kernel: AzimuthKernel
) -> ReducedOperators:
    """E and F from the signed kernel blocks."""
    half = 0.5 * layer.omega
    w = quad.weights[None, :, None, None]
    s11 = blocks_to_matrix(half * kernel.pp * w)
    s12 = blocks_to_matrix(half * kernel.pm * w)
    s21 = blocks_to_matrix(half * kernel.mp * w)
    s22 = blocks_to_matrix(half * kernel.mm * w)
    t12 = blocks_to_matrix(half * np.einsum("abpq,qr->abpr", kernel.pm, D_PARITY) * w)
    eye = np.eye(s11.shape[0])
    inv_m = 1.0 / np.repeat(quad.nodes, 4)
    e = (eye - s11 - t12) * inv_m[None, :]
    f = (eye - s11 + t12) * inv_m[None, :]
    return ReducedOperators(m, layer.omega, quad.nodes, quad.weights, e, f, s11, s12, s21, s22)


def reduced_operators_from_legendre(m: int, layer: LayerSpec, quad: Quadrature) -> tuple[np.ndarray, np.ndarray]:
    """E and F summed directly over ``Pi_l B_l [I +/- (-1)^(l-m) D] Pi_l^T W``."""
    n4 = 4 * quad.n
    eye = np.eye(n4)
    inv_m = 1.0 / np.repeat(quad.nodes, 4)
    coeffs = layer.coeffs
    if m >= coeffs.shape[0]:
        return eye * inv_m, eye * inv_m
    pi = legendre_matrices(coeffs.shape[0] - 1, m, quad.nodes)
    plus = np.zeros((n4, n4))
    minus = np.zeros((n4, n4))
    for l in range(m, coeffs.shape[0]):
        stack = pi[l].reshape(n4, 4)  # Pi(mu_i) stacked by rows
        sgn = (-1.0) ** (l - m)
        bp = coeffs[l] @ (np.eye(4) + sgn * D_PARITY)
        bm = coeffs[l] @ (np.eye(4) - sgn * D_PARITY)
        right = pi[l].transpose(1, 0, 2).reshape(4, n4) * np.repeat(quad.weights, 4)[None, :]
        plus += stack @ bp @ right
        minus += stack @ bm @ right
    half = 0.5 * layer.omega
    return (eye - half * plus) * inv_m, (eye - half * minus) * inv_m


@dataclass(frozen=True, eq=False)
class EigenModeSet:
    """Separation constants and stream vectors of one order (rows are modes)."""

    m: int
    lam: np.ndarray
    nu: np.ndarray
    phi_plus: np.ndarray
    phi_minus: np.ndarray
    residuals: np.ndarray
    conservative: Optional[int] = None
    # conservative pair: constant field x0 and linear partner (t - t_ref) x0 + h
    x0: Optional[np.ndarray] = None
    h_up: Optional[np.ndarray] = None
    h_down: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return len(self.nu)

    @property
    def inv_nu(self) -> np.ndarray:
        """``1/nu`` with exact zero for the conservative mode."""
        out = 1.0 / self.nu
        if self.conservative is not None:
            out[self.conservative] = 0.0
        return out


def solve_homogeneous(ops: ReducedOperators) -> EigenModeSet:
    """Eigen-decompose ``F E`` and expand each eigenvector to full stream vectors."""
    n4 = ops.size
    fe = ops.f @ ops.e
    if not np.all(np.isfinite(fe)):
        raise NumericalError("non-finite reduced operator", order=ops.m)
    lam, vecs = scipy.linalg.eig(fe, overwrite_a=False, check_finite=False)
    if not np.all(np.isfinite(lam)):
        raise NumericalError("non-finite eigenvalues", order=ops.m, condition=np.linalg.cond(fe))
    lam = lam.astype(complex)
    # deterministic order: by real part, then imaginary part
    order = np.lexsort((np.round(lam.imag, 14), np.round(lam.real, 14)))
    lam, vecs = lam[order], vecs[:, order].astype(complex)

    conservative = None
    if ops.m == 0 and ops.omega >= 1.0 - CONSERVATIVE_TOL:
        if _conserves_flux(ops):
            conservative = int(np.argmin(np.abs(lam)))
        else:
            # too few nodes for the expansion: the discrete kernel is not lossless
            log.warning("quadrature does not integrate the m=0 kernel exactly; no conservative pair")

    nu = np.empty(n4, dtype=complex)
    for j, lj in enumerate(lam):
        if j == conservative:
            nu[j] = np.inf
        elif abs(lj) < NU_CLAMP**-2:
            nu[j] = NU_CLAMP
        else:
            nu[j] = 1.0 / np.sqrt(lj)
            if nu[j].real < 0:
                nu[j] = -nu[j]

    inv_m = 1.0 / ops.m_diag
    phi_plus = np.empty((n4, n4), dtype=complex)
    phi_minus = np.empty((n4, n4), dtype=complex)
    x0 = h_up = h_down = None
    for j in range(n4):
        if j == conservative:
            continue
        x = vecs[:, j]
        ex = nu[j] * (ops.e @ x)
        pp = 0.5 * inv_m * (x + ex)
        pm = 0.5 * inv_m * (x - ex)
        scale = max(np.abs(pp).max(), np.abs(pm).max())
        phi_plus[j] = pp / scale
        phi_minus[j] = pm / scale
    if conservative is not None:
        x0, h_up, h_down = _conservative_pair(ops)
        phi_plus[conservative] = x0
        phi_minus[conservative] = x0

    modes = EigenModeSet(ops.m, lam, nu, phi_plus, phi_minus, np.zeros(n4), conservative, x0, h_up, h_down)
    res = mode_residuals(ops, modes)
    if np.any(res > REFINE_TOL):
        _refine(ops, modes, res)
        res = mode_residuals(ops, modes)
    object.__setattr__(modes, "residuals", res)
    if np.any(res > RESIDUAL_TOL):
        j = int(np.argmax(res))
        raise NumericalError(
            f"eigenmode residual {res[j]:.3e} exceeds {RESIDUAL_TOL:g} (mode {j})",
            order=ops.m,
            condition=float(np.linalg.cond(vecs)),
        )
    return modes


def _refine(ops: ReducedOperators, modes: EigenModeSet, res: np.ndarray) -> None:
    """Shifted inverse iteration on the full operator, in place, for inaccurate modes."""
    full = ops.full_operator()
    n4 = ops.size
    eye = np.eye(2 * n4)
    for j in np.flatnonzero(res > REFINE_TOL):
        if j == modes.conservative:
            continue
        v = np.concatenate([modes.phi_minus[j], flip(modes.phi_plus[j])])
        # a slightly offset shift keeps the factorization nonsingular
        shift = (1.0 / modes.nu[j]) * (1.0 + 1e-11)
        lu = scipy.linalg.lu_factor(full - shift * eye, check_finite=False)
        for _ in range(2):
            v = scipy.linalg.lu_solve(lu, v, check_finite=False)
            v = v / np.abs(v).max()
            inv_nu = (v.conj() @ (full @ v)) / (v.conj() @ v)
            if np.abs(full @ v - inv_nu * v).max() <= 0.1 * REFINE_TOL:
                break
        nu = 1.0 / inv_nu
        modes.nu[j] = nu
        modes.lam[j] = inv_nu * inv_nu
        modes.phi_minus[j] = v[:n4]
        modes.phi_plus[j] = flip(v[n4:])


def _conserves_flux(ops: ReducedOperators) -> bool:
    """Whether the isotropic field is an exact null vector of the discrete m = 0 operator."""
    n4 = ops.size
    x0 = np.zeros(2 * n4)
    x0[0::4] = 1.0
    s = np.block([[ops.s11, ops.s12], [ops.s21, ops.s22]])
    return float(np.abs(s @ x0 - x0).max()) < 1e-10


def _conservative_pair(ops: ReducedOperators):
    """Constant isotropic field and its linear-in-depth partner for lossless m = 0."""
    n4 = ops.size
    x0 = np.zeros(n4, dtype=complex)
    x0[0::4] = 1.0
    s = np.block([[ops.s11, ops.s12], [ops.s21, ops.s22]])
    m8 = np.concatenate([ops.m_diag, -ops.m_diag])
    x0_full = np.concatenate([x0.real, x0.real])
    # M8 d/dtau [(tau - t) x0 + h] = (I - S) [(tau - t) x0 + h]  =>  (I - S) h = M8 x0
    h, *_ = np.linalg.lstsq(np.eye(2 * n4) - s, m8 * x0_full, rcond=None)
    h = h - x0_full * (x0_full @ h) / (x0_full @ x0_full)
    return x0, h[:n4].astype(complex), h[n4:].astype(complex)


def mode_residuals(ops: ReducedOperators, modes: EigenModeSet) -> np.ndarray:
    """Relative residual of ``M8^-1 (S - I) v = v / nu`` per mode (decaying form)."""
    full = ops.full_operator()
    inv_nu = modes.inv_nu
    v = np.concatenate([modes.phi_minus, flip(modes.phi_plus)], axis=1)  # (modes, 8N)
    r = v @ full.T - inv_nu[:, None] * v
    res = np.abs(r).max(axis=1) / np.abs(v).max(axis=1)
    if modes.conservative is not None:
        j = modes.conservative
        lin = np.concatenate([modes.h_up, modes.h_down])
        x0_full = np.concatenate([modes.x0, modes.x0])
        # the linear partner satisfies M8^-1 (S - I) h = -x0
        r2 = full @ lin + x0_full
        res[j] = max(res[j], np.abs(r2).max() / max(np.abs(lin).max(), 1.0))
    return res


def dump_eigen_csv(modes: EigenModeSet) -> str:
    buf = io.StringIO()
    buf.write("m,j,lambda_re,lambda_im,nu_re,nu_im,residual\n")
    for j in range(modes.size):
        lam, nu = modes.lam[j], modes.nu[j]
        buf.write(
            f"{modes.m},{j},{lam.real:.17g},{lam.imag:.17g},{nu.real:.17g},{nu.imag:.17g},{modes.residuals[j]:.3e}\n"
        )
    return buf.getvalue()
