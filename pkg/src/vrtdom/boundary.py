"""Boundary-value problem for the mode coefficients of one Fourier order.

Inside layer ``l`` (local depth ``t`` in ``[0, tau_l]``, cumulative depth of the
layer top ``T_l``) the streams are

    I(t) = sum_j A_j exp(-t / nu_j) [phi-_j ; D phi+_j]
         + sum_j B_j exp(-(tau_l - t) / nu_j) [phi+_j ; D phi-_j]
         + exp(-(T_l + t) / mu0) [Z+ ; Z-]

with upward streams listed first.  Every exponent is non-positive.  The lossless
m = 0 pair replaces its two columns by the constant field ``x0`` and the linear
field ``(t - tau_l / 2) x0 + h``.

Conditions: no diffuse downward radiance at the top, continuity of all 8N
streams at every interface, and at the base

    I_up(tau) = R_diffuse I_down(tau) + R_beam D_k I0 exp(-tau / mu0)

where ``R_diffuse[i, j] = alpha_j mu_j R(mu_i, -mu_j)`` and
``R_beam = R(mu_i, -mu0) mu0 / pi``.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.linalg import lapack

from .core import BlackBase, LambertianBase, MuellerTableBase, NumericalError, Quadrature, ValidationError
from .homogeneous import EigenModeSet, flip
from .particular import ParticularVectors

COND_LIMIT = 1e14


def mode_vectors(modes: EigenModeSet, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Unattenuated ``8N x 4N`` stream columns of the decaying and bottom-anchored modes."""
    vdec = np.concatenate([modes.phi_minus.T, flip(modes.phi_plus).T], axis=0)
    vgrow = np.concatenate([modes.phi_plus.T, flip(modes.phi_minus).T], axis=0)
    c = modes.conservative
    if c is not None:
        x0 = np.concatenate([modes.x0, modes.x0])
        vdec[:, c] = x0
        # value of the linear partner at t = 0; its slope is x0
        vgrow[:, c] = np.concatenate([modes.h_up, modes.h_down]) - 0.5 * tau * x0
    return vdec, vgrow


def mode_fields(modes: EigenModeSet, tau: float, t) -> tuple[np.ndarray, np.ndarray]:
    """Upward and downward stream matrices (``4N x 8N``) at local depth ``t``.

    Columns ``0..4N-1`` multiply ``A``, the rest multiply ``B``.
    """
    t = float(t)
    inv_nu = modes.inv_nu
    vdec, vgrow = mode_vectors(modes, tau)
    full = np.concatenate([vdec * np.exp(-t * inv_nu), vgrow * np.exp(-(tau - t) * inv_nu)], axis=1)
    c = modes.conservative
    if c is not None:
        n4 = modes.size
        full[:, n4 + c] += t * np.concatenate([modes.x0, modes.x0])
    n4 = modes.size
    return full[:n4], full[n4:]


@dataclass(frozen=True, eq=False)
class PropagatorBlock:
    """Mode stream matrices at the top and bottom of one layer."""

    tau: float
    top_up: np.ndarray
    top_down: np.ndarray
    bottom_up: np.ndarray
    bottom_down: np.ndarray


def build_propagators(modes: EigenModeSet, tau: float) -> PropagatorBlock:
    tu, td = mode_fields(modes, tau, 0.0)
    bu, bd = mode_fields(modes, tau, tau)
    return PropagatorBlock(tau, tu, td, bu, bd)


@dataclass(frozen=True, eq=False)
class BaseReflection:
    """Reflection operators of the base for one order.

    ``diffuse`` is ``4N x 4N``; ``beam`` is ``4N x 4`` and still has to be applied
    to ``D_k I0``.  ``beam`` is None when it was not requested.
    """

    m: int
    kind: str
    diffuse: np.ndarray
    beam: Optional[np.ndarray]

    @property
    def is_zero(self) -> bool:
        return not self.diffuse.any() and (self.beam is None or not self.beam.any())


def build_base_reflection(base, m: int, quad: Quadrature, mu0: Optional[float] = None) -> BaseReflection:
    """Base reflection matrices for order ``m``; the beam part only when ``mu0`` is given."""
    n = quad.n
    diffuse = np.zeros((4 * n, 4 * n))
    beam = None if mu0 is None else np.zeros((4 * n, 4))
    wmu = quad.weights * quad.nodes

    if isinstance(base, BlackBase):
        return BaseReflection(m, base.kind, diffuse, beam)

    if isinstance(base, LambertianBase):
        if m == 0 and base.albedo != 0.0:
            # one row of node blocks, copied to every output node
            row = np.zeros((4, 4 * n))
            row[0, 0::4] = 2.0 * base.albedo * wmu
            diffuse = np.tile(row, (n, 1))
            if beam is not None:
                beam[0::4, 0] = 2.0 * base.albedo * mu0 / math.pi
        return BaseReflection(m, base.kind, diffuse, beam)

    if isinstance(base, MuellerTableBase):
        if base.nodes.shape != quad.nodes.shape or not np.allclose(base.nodes, quad.nodes, rtol=0, atol=1e-12):
            raise ValidationError(
                f"base table has {base.nodes.size} nodes; quadrature needs the {quad.n} solver nodes"
            )
        if base.matrices.shape[1:] != (n, n, 4, 4):
            raise ValidationError(f"base table matrices have shape {base.matrices.shape}, expected (orders, {n}, {n}, 4, 4)")
        if m >= base.matrices.shape[0]:
            return BaseReflection(m, base.kind, diffuse, beam)
        table = base.matrices[m]
        blocks = table * wmu[None, :, None, None]
        diffuse = blocks.transpose(0, 2, 1, 3).reshape(4 * n, 4 * n)
        if beam is not None:
            # R(mu_i, -mu0) interpolated linearly in the incidence cosine
            flat = table.transpose(1, 0, 2, 3).reshape(n, -1)
            col = np.array([np.interp(mu0, base.nodes, flat[:, c]) for c in range(flat.shape[1])])
            beam = col.reshape(n, 4, 4).reshape(4 * n, 4) * (mu0 / math.pi)
        return BaseReflection(m, base.kind, diffuse, beam)

    raise ValidationError(f"unknown base reflector {base!r}")


@dataclass(frozen=True, eq=False)
class BoundaryFactorization:
    """LU factors of the global boundary matrix of one order (reused for every beam)."""

    m: int
    n_layers: int
    lhs: np.ndarray
    lu: np.ndarray
    piv: np.ndarray
    rcond: float

    @property
    def condition(self) -> float:
        return math.inf if self.rcond == 0 else 1.0 / self.rcond


def assemble_boundary_lhs(props: Sequence[PropagatorBlock], refl: BaseReflection) -> np.ndarray:
    n8 = props[0].top_up.shape[1]
    n4 = n8 // 2
    nl = len(props)
    lhs = np.zeros((n8 * nl, n8 * nl), dtype=complex)
    lhs[:n4, :n8] = props[0].top_down
    row = n4
    for l in range(nl - 1):
        a, b = props[l], props[l + 1]
        lhs[row : row + n4, l * n8 : (l + 1) * n8] = a.bottom_up
        lhs[row + n4 : row + n8, l * n8 : (l + 1) * n8] = a.bottom_down
        lhs[row : row + n4, (l + 1) * n8 : (l + 2) * n8] = -b.top_up
        lhs[row + n4 : row + n8, (l + 1) * n8 : (l + 2) * n8] = -b.top_down
        row += n8
    last = props[-1]
    lhs[row:, (nl - 1) * n8 :] = last.bottom_up - refl.diffuse @ last.bottom_down
    return lhs


def factor_boundary(m: int, props: Sequence[PropagatorBlock], refl: BaseReflection) -> BoundaryFactorization:
    lhs = assemble_boundary_lhs(props, refl)
    if not np.all(np.isfinite(lhs)):
        raise NumericalError("non-finite boundary matrix", order=m)
    lu, piv = scipy.linalg.lu_factor(lhs, check_finite=False)
    anorm = np.abs(lhs).sum(axis=0).max()
    rcond, info = lapack.zgecon(lu, anorm, norm="1")
    rcond = float(rcond) if info == 0 else 0.0
    if rcond == 0.0 or 1.0 / rcond > COND_LIMIT:
        cond = math.inf if rcond == 0.0 else 1.0 / rcond
        raise NumericalError("boundary system is singular or ill-conditioned", order=m, condition=cond)
    return BoundaryFactorization(m, len(props), lhs, lu, piv, rcond)


def boundary_rhs(
    parts: Sequence[ParticularVectors],
    tops: Sequence[float],
    taus: Sequence[float],
    refl: BaseReflection,
    beam_stokes: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Right-hand side for one beam; ``beam_stokes`` is ``D_k I0`` (None if no base beam term)."""
    n4 = parts[0].z_plus.size
    n8 = 2 * n4
    nl = len(parts)
    rhs = np.zeros(n8 * nl)
    rhs[:n4] = -parts[0].z_minus * math.exp(-tops[0] / parts[0].mu0)
    row = n4
    for l in range(nl - 1):
        a, b = parts[l], parts[l + 1]
        fa = math.exp(-(tops[l] + taus[l]) / a.mu0)
        fb = math.exp(-tops[l + 1] / b.mu0)
        rhs[row : row + n4] = fb * b.z_plus - fa * a.z_plus
        rhs[row + n4 : row + n8] = fb * b.z_minus - fa * a.z_minus
        row += n8
    last = parts[-1]
    fl = math.exp(-(tops[-1] + taus[-1]) / last.mu0)
    bottom = -fl * (last.z_plus - refl.diffuse @ last.z_minus)
    if beam_stokes is not None and refl.beam is not None:
        bottom = bottom + math.exp(-(tops[-1] + taus[-1]) / last.mu0) * (refl.beam @ beam_stokes)
    rhs[row:] = bottom
    return rhs


@dataclass(frozen=True, eq=False)
class BoundarySystem:
    m: int
    rhs: np.ndarray
    c: np.ndarray
    residual: float
    condition: float
    n_layers: int = 1

    def layer_coefficients(self, layer: int) -> np.ndarray:
        n8 = self.c.size // self.n_layers
        return self.c[layer * n8 : (layer + 1) * n8]


def solve_boundary(fact: BoundaryFactorization, rhs: np.ndarray) -> BoundarySystem:
    # the getrs wrapper shifts the pivot array in place, so concurrent solves need their own copy
    c = scipy.linalg.lu_solve((fact.lu, fact.piv.copy()), rhs.astype(complex), check_finite=False)
    r = fact.lhs @ c - rhs
    scale = max(np.abs(rhs).max(), 1e-300)
    res = float(np.abs(r).max() / scale) if rhs.any() else float(np.abs(r).max())
    return BoundarySystem(fact.m, rhs, c, res, fact.condition, fact.n_layers)


def assemble_and_solve_boundary(
    m: int,
    modes: Sequence[EigenModeSet],
    taus: Sequence[float],
    parts: Sequence[ParticularVectors],
    refl: BaseReflection,
    beam_stokes: Optional[np.ndarray] = None,
) -> BoundarySystem:
    """One-shot assembly and solve (the solver itself reuses the factorization)."""
    props = [build_propagators(md, tau) for md, tau in zip(modes, taus)]
    fact = factor_boundary(m, props, refl)
    tops = np.concatenate([[0.0], np.cumsum(taus)[:-1]])
    return solve_boundary(fact, boundary_rhs(parts, tops, taus, refl, beam_stokes))


def dump_boundary_csv(rows: Sequence[tuple]) -> str:
    """``(m, k, mu0, condition, residual)`` rows as CSV."""
    buf = io.StringIO()
    buf.write("m,k,mu0,condition,residual\n")
    for m, k, mu0, cond, res in rows:
        buf.write(f"{m},{k},{mu0:.17g},{cond:.6e},{res:.3e}\n")
    return buf.getvalue()
