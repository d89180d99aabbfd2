"""Particular solution driven by the attenuated direct beam.

In Fourier mode ``(m, k)`` the beam source is ``X(mu) exp(-tau / mu0)`` with

    X(mu) = (omega / 2 pi) A^m(mu, -mu0) D_k I0

(the factor ``1 / 2 pi`` rather than ``1 / 4 pi`` because each mode carries
twice the physical azimuthal component).  Writing ``Z^- = Delta Psi`` and
``X^- = Delta Xi``, the 8N system reduces with ``g = M (Z^+ + Psi)`` to

    (F E - 1 / mu0^2) g = F (X^+ + Xi) - (X^+ - Xi) / mu0
    h = -mu0 (E g - (X^+ + Xi))
    Z^+ = M^-1 (g + h) / 2,    Psi = M^-1 (g - h) / 2
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .core import LayerSpec, NumericalError, Quadrature
from .homogeneous import ReducedOperators, flip
from .phase import D1, D2, kernel_blocks

log = logging.getLogger(__name__)

RESONANCE_TOL = 1e-8
DITHER = 1e-7


@dataclass(frozen=True, eq=False)
class BeamSourceTerm:
    m: int
    k: int
    mu0: float
    x_plus: np.ndarray
    x_minus: np.ndarray
    # kept so a resonant beam can be rebuilt at a dithered mu0
    layer: Optional[LayerSpec] = None
    quad: Optional[Quadrature] = None
    stokes: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class ParticularVectors:
    z_plus: np.ndarray
    z_minus: np.ndarray
    g: np.ndarray
    mu0: float


def build_beam_source(
    m: int, k: int, layer: LayerSpec, quad: Quadrature, mu0: float, stokes
) -> BeamSourceTerm:
    """Stream vectors of the beam source for mode ``(m, k)`` at unit attenuation."""
    stokes = np.asarray(stokes, dtype=float)
    dk = D1 if k == 1 else D2
    src = dk @ stokes
    scale = layer.omega / (2.0 * math.pi)
    n = quad.n
    if scale == 0.0 or not src.any() or m >= layer.n_terms:
        z = np.zeros(4 * n)
        return BeamSourceTerm(m, k, mu0, z, z.copy(), layer, quad, stokes)
    up = kernel_blocks(m, layer.coeffs, quad.nodes, [-mu0])[:, 0]
    down = kernel_blocks(m, layer.coeffs, -quad.nodes, [-mu0])[:, 0]
    x_plus = scale * (up @ src).reshape(4 * n)
    x_minus = scale * (down @ src).reshape(4 * n)
    return BeamSourceTerm(m, k, mu0, x_plus, x_minus, layer, quad, stokes)


def is_resonant(mu0: float, lam) -> bool:
    lam = np.asarray(lam)
    target = 1.0 / mu0**2
    return bool(np.any(np.abs(target - lam) < RESONANCE_TOL * np.maximum(np.abs(lam), 1e-300)))


def solve_particular(
    ops: ReducedOperators, src: BeamSourceTerm, lam: Optional[np.ndarray] = None
) -> ParticularVectors:
    """Reduced 4N solve for ``Z^+`` and ``Z^-`` (natural, non-flipped streams).

    When eigenvalues ``lam`` are supplied and ``1/mu0^2`` sits on one of them the
    beam is rebuilt at ``mu0 + 1e-7`` (or ``mu0 - 1e-7`` at normal incidence).
    """
    n4 = ops.size
    if not (src.x_plus.any() or src.x_minus.any()):
        z = np.zeros(n4)
        return ParticularVectors(z, z.copy(), z.copy(), src.mu0)
    if lam is not None and is_resonant(src.mu0, lam):
        if src.layer is None:
            raise NumericalError("beam resonant with an eigenmode", order=ops.m, mu0=src.mu0)
        new_mu0 = src.mu0 + DITHER if src.mu0 + DITHER <= 1.0 else src.mu0 - DITHER
        log.warning("mu0=%.17g resonant at order %d; dithering to %.17g", src.mu0, ops.m, new_mu0)
        src = build_beam_source(ops.m, src.k, src.layer, src.quad, new_mu0, src.stokes)
        if is_resonant(src.mu0, lam):
            raise NumericalError("beam still resonant after dithering", order=ops.m, mu0=src.mu0)

    mu0 = src.mu0
    xs = src.x_plus + flip(src.x_minus)
    xd = src.x_plus - flip(src.x_minus)
    lhs = ops.f @ ops.e - np.eye(n4) / mu0**2
    rhs = ops.f @ xs - xd / mu0
    try:
        g = scipy.linalg.solve(lhs, rhs, check_finite=False)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"particular system singular: {exc}", order=ops.m, mu0=mu0) from exc
    if not np.all(np.isfinite(g)):
        raise NumericalError("particular system singular", order=ops.m, mu0=mu0)
    h = -mu0 * (ops.e @ g - xs)
    inv_m = 1.0 / ops.m_diag
    z_plus = 0.5 * inv_m * (g + h)
    z_minus = flip(0.5 * inv_m * (g - h))
    return ParticularVectors(z_plus, z_minus, g, mu0)


def particular_residual(ops: ReducedOperators, src: BeamSourceTerm, part: ParticularVectors) -> float:
    """Relative residual of the unreduced particular equations."""
    n4 = ops.size
    s = np.block([[ops.s11, ops.s12], [ops.s21, ops.s22]])
    m8 = np.concatenate([ops.m_diag, -ops.m_diag])
    z = np.concatenate([part.z_plus, part.z_minus])
    x = np.concatenate([src.x_plus, src.x_minus])
    r = (np.eye(2 * n4) - s) @ z + m8 * z / part.mu0 - x
    scale = max(np.abs(x).max(), np.abs(z).max(), 1e-300)
    return float(np.abs(r).max() / scale)
