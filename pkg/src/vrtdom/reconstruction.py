"""Radiance at arbitrary depth and direction from a solved Fourier block.

Off-node directions use source-function integration.  In layer ``l`` the source
function of mode ``(m, k)`` at cosine ``mu`` decomposes exactly as

    S(t, mu) = sum_j a_j exp(-t / nu_j) + sum_j b_j exp(-(tau_l - t) / nu_j)
             + c exp(-t / mu0) + p1 t

(``p1`` is nonzero only for the lossless m = 0 pair), so the transfer integrals
along ``mu`` have closed forms.  They are written with

    E0(L, s)   = int_0^L exp(-s u) du
    H(L, p, q) = int_0^L exp(-(L - u) p) exp(-u q) du
    U(L, s)    = int_0^L u exp(-s u) du

all evaluated through ``phi1(z) = (exp(z) - 1) / z`` so that ``p = q`` (an output
cosine equal to a separation constant or to ``mu0``) needs no special case.

The full Stokes vector is ``I = 1/2 sum_m sum_k Phi_k^m(phi - phi0) I_k^m``.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import BlackBase, LambertianBase, LayerSpec, MuellerTableBase, NumericalError, Quadrature, clamp_mu
from .homogeneous import EigenModeSet
from .boundary import mode_fields, mode_vectors
from .particular import ParticularVectors
from .phase import fourier_basis, kernel_blocks

IMAG_TOL = 1e-9
_SERIES_CUT = 1e-3


# ------------------------------------------------------------ exponential integrals


def phi1(z):
    """``(exp(z) - 1) / z`` with the removable singularity filled in."""
    z = np.asarray(z)
    small = np.abs(z) < _SERIES_CUT
    safe = np.where(small, 1.0, z)
    out = np.expm1(safe) / safe
    series = 1.0 + z / 2.0 + z * z / 6.0 + z**3 / 24.0 + z**4 / 120.0
    return np.where(small, series, out)


def exp_integral(length, s):
    """``E0(L, s) = (1 - exp(-L s)) / s``."""
    length = np.asarray(length, dtype=float)
    return length * phi1(-length * s)


def exp_convolution(length, p, q):
    """``H(L, p, q) = (exp(-L q) - exp(-L p)) / (p - q)``, symmetric in ``p, q``."""
    length = np.asarray(length, dtype=float)
    p, q = np.broadcast_arrays(np.asarray(p), np.asarray(q))
    swap = np.real(p) > np.real(q)
    lo = np.where(swap, q, p)
    hi = np.where(swap, p, q)
    return length * np.exp(-length * lo) * phi1(length * (lo - hi))


def linear_exp_integral(length, s):
    """``U(L, s) = (1 - exp(-s L)(1 + s L)) / s^2`` (real ``s >= 0``)."""
    length = np.asarray(length, dtype=float)
    x = np.asarray(s * length, dtype=float)
    small = np.abs(x) < 0.1
    xs = np.where(small, 1.0, x)
    direct = -(np.expm1(-xs) + xs * np.exp(-xs)) / (xs * xs)
    series = np.zeros_like(x)
    term_fact = 1.0
    for n in range(2, 14):
        term_fact *= n
        series = series + (-1.0) ** n * (n - 1) / term_fact * x ** (n - 2)
    return length * length * np.where(small, series, direct)


# ------------------------------------------------------------ solved block


@dataclass(frozen=True, eq=False)
class FourierBlockSolution:
    """Everything needed to evaluate mode ``(m, k)`` of one beam anywhere in the stack.

    ``coefs[l]`` holds ``[A; B]`` of layer ``l``.
    """

    m: int
    k: int
    quad: Quadrature
    layers: tuple
    taus: np.ndarray
    tops: np.ndarray
    modes: tuple
    coefs: tuple
    parts: tuple
    beam_stokes: np.ndarray  # D_k I0
    base: object
    residuals: dict = field(default_factory=dict)

    @property
    def total_tau(self) -> float:
        return float(self.tops[-1] + self.taus[-1])

    def locate(self, tau: float) -> tuple[int, float]:
        """Layer index and local depth for a global depth (interfaces go to the upper layer)."""
        if tau < -1e-12 or tau > self.total_tau * (1 + 1e-12) + 1e-12:
            raise ValueError(f"depth {tau} outside [0, {self.total_tau}]")
        tau = min(max(tau, 0.0), self.total_tau)
        bottoms = self.tops + self.taus
        idx = int(np.searchsorted(bottoms, tau, side="left"))
        idx = min(idx, len(self.layers) - 1)
        return idx, min(max(tau - self.tops[idx], 0.0), self.taus[idx])


def _real(x: np.ndarray, scale: float, what: str, m: int) -> np.ndarray:
    imag = np.abs(np.imag(x)).max() if np.iscomplexobj(x) and x.size else 0.0
    if imag > IMAG_TOL * max(scale, 1.0):
        raise NumericalError(f"{what}: imaginary residue {imag:.3e}", order=m)
    return np.real(x).astype(float)


def layer_streams(sol: FourierBlockSolution, layer: int, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Complex upward and downward streams (length 4N each) at local depth ``t``."""
    modes = sol.modes[layer]
    up, down = mode_fields(modes, sol.taus[layer], t)
    part = sol.parts[layer]
    att = math.exp(-(sol.tops[layer] + t) / part.mu0)
    c = sol.coefs[layer]
    return up @ c + att * part.z_plus, down @ c + att * part.z_minus


def nodal_field(sol: FourierBlockSolution, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Diffuse mode streams at the quadrature nodes: ``(up, down)`` each ``(N, 4)``."""
    layer, t = sol.locate(tau)
    up, down = layer_streams(sol, layer, t)
    scale = max(np.abs(up).max(), np.abs(down).max()) if up.size else 0.0
    up = _real(up, scale, "nodal field", sol.m)
    down = _real(down, scale, "nodal field", sol.m)
    return up.reshape(-1, 4), down.reshape(-1, 4)


# ------------------------------------------------------------ source function


def _scatter_rows(sol: FourierBlockSolution, layer: int, mu: np.ndarray) -> np.ndarray:
    """``(omega/2) [alpha_j A(mu, mu_j) | alpha_j A(mu, -mu_j)]`` as ``(M, 4, 8N)``."""
    spec: LayerSpec = sol.layers[layer]
    quad = sol.quad
    n = quad.n
    half = 0.5 * spec.omega
    w = quad.weights[None, :, None, None]
    kp = half * kernel_blocks(sol.m, spec.coeffs, mu, quad.nodes) * w
    km = half * kernel_blocks(sol.m, spec.coeffs, mu, -quad.nodes) * w
    kp = kp.transpose(0, 2, 1, 3).reshape(len(mu), 4, 4 * n)
    km = km.transpose(0, 2, 1, 3).reshape(len(mu), 4, 4 * n)
    return np.concatenate([kp, km], axis=2)


def beam_source_rows(sol: FourierBlockSolution, layer: int, mu: np.ndarray) -> np.ndarray:
    """``X(mu) = (omega / 2 pi) A(mu, -mu0) D_k I0`` as ``(M, 4)`` (unit attenuation)."""
    spec: LayerSpec = sol.layers[layer]
    mu0 = sol.parts[layer].mu0
    if spec.omega == 0.0 or not sol.beam_stokes.any():
        return np.zeros((len(mu), 4))
    a = kernel_blocks(sol.m, spec.coeffs, mu, [-mu0])[:, 0]
    return spec.omega / (2.0 * math.pi) * (a @ sol.beam_stokes)


@dataclass(frozen=True, eq=False)
class SourceFunctionCoefficients:
    """Closed-form source function of one layer at cosines ``mu``.

    ``a``, ``b``: ``(M, 4, 4N)``; ``c``, ``p1``: ``(M, 4)``.  ``c`` already carries
    the beam attenuation to the layer top.
    """

    mu: np.ndarray
    tau: float
    inv_nu: np.ndarray
    inv_mu0: float
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    p1: np.ndarray

    def evaluate(self, t: float) -> np.ndarray:
        dec = np.exp(-t * self.inv_nu)
        grow = np.exp(-(self.tau - t) * self.inv_nu)
        s = self.a @ dec + self.b @ grow + self.c * math.exp(-t * self.inv_mu0) + self.p1 * t
        return s


def source_coefficients(sol: FourierBlockSolution, layer: int, mu) -> SourceFunctionCoefficients:
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    modes: EigenModeSet = sol.modes[layer]
    tau = float(sol.taus[layer])
    rows = _scatter_rows(sol, layer, mu)
    n4 = modes.size
    inv_nu = modes.inv_nu
    vdec, vgrow = mode_vectors(modes, tau)
    coef = sol.coefs[layer]
    a = (rows @ vdec) * coef[:n4]
    p1 = np.zeros((len(mu), 4), dtype=complex)
    cons = modes.conservative
    if cons is not None:
        p1 = (rows @ np.concatenate([modes.x0, modes.x0])) * coef[n4 + cons]
    b = (rows @ vgrow) * coef[n4:]
    part: ParticularVectors = sol.parts[layer]
    att = math.exp(-sol.tops[layer] / part.mu0)
    c = (rows @ np.concatenate([part.z_plus, part.z_minus]) + beam_source_rows(sol, layer, mu)) * att
    return SourceFunctionCoefficients(mu, tau, inv_nu, 1.0 / part.mu0, a, b, c, p1)


def source_direct(sol: FourierBlockSolution, layer: int, mu, t: float) -> np.ndarray:
    """Source function summed from the nodal streams (reference for the decomposition)."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    up, down = layer_streams(sol, layer, t)
    rows = _scatter_rows(sol, layer, mu)
    att = math.exp(-(sol.tops[layer] + t) / sol.parts[layer].mu0)
    return rows @ np.concatenate([up, down]) + beam_source_rows(sol, layer, mu) * att


def integrate_source(coeffs: SourceFunctionCoefficients, t: float, boundary: np.ndarray) -> np.ndarray:
    """Transfer along each ``mu`` to local depth ``t``.

    Upward cosines start from ``boundary`` at the layer bottom, downward ones from
    ``boundary`` at the layer top.  Returns complex ``(M, 4)``.
    """
    mu = coeffs.mu
    out = np.zeros((len(mu), 4), dtype=complex)
    inv_nu = coeffs.inv_nu
    for idx, mu_i in enumerate(mu):
        amu = abs(mu_i)
        q = 1.0 / amu
        if mu_i > 0:
            length = coeffs.tau - t
            ga = np.exp(-t * inv_nu) * exp_integral(length, inv_nu + q)
            gb = exp_convolution(length, inv_nu, q)
            gc = math.exp(-t * coeffs.inv_mu0) * exp_integral(length, coeffs.inv_mu0 + q)
            gp = t * exp_integral(length, q) + linear_exp_integral(length, q)
        else:
            length = t
            ga = exp_convolution(length, inv_nu, q)
            gb = np.exp(-(coeffs.tau - t) * inv_nu) * exp_integral(length, inv_nu + q)
            gc = exp_convolution(length, coeffs.inv_mu0, q)
            gp = t * exp_integral(length, q) - linear_exp_integral(length, q)
        integral = coeffs.a[idx] @ ga + coeffs.b[idx] @ gb + coeffs.c[idx] * gc + coeffs.p1[idx] * gp
        out[idx] = boundary[idx] * math.exp(-length * q) + integral * q
    return out


# ------------------------------------------------------------ multi-layer transport


def base_rows(base, m: int, quad: Quadrature, mu_out: np.ndarray, mu0: Optional[float]):
    """Base reflection at output cosines: diffuse ``(M, 4, 4N)``, beam ``(M, 4, 4)``.

    Tables are interpolated linearly in both cosines between the solver nodes.
    """
    n = quad.n
    mcount = len(mu_out)
    diffuse = np.zeros((mcount, 4, 4 * n))
    beam = np.zeros((mcount, 4, 4))
    if isinstance(base, BlackBase):
        return diffuse, beam
    wmu = quad.weights * quad.nodes
    if isinstance(base, LambertianBase):
        if m == 0 and base.albedo != 0.0:
            diffuse[:, 0, 0::4] = 2.0 * base.albedo * wmu
            if mu0 is not None:
                beam[:, 0, 0] = 2.0 * base.albedo * mu0 / math.pi
        return diffuse, beam
    if isinstance(base, MuellerTableBase):
        if m >= base.matrices.shape[0]:
            return diffuse, beam
        table = base.matrices[m]  # (i_out, j_in, 4, 4)
        flat = table.reshape(n, -1)
        rows = np.stack([np.interp(mu_out, base.nodes, flat[:, c]) for c in range(flat.shape[1])], axis=1)
        rows = rows.reshape(mcount, n, 4, 4)
        diffuse = (rows * wmu[None, :, None, None]).transpose(0, 2, 1, 3).reshape(mcount, 4, 4 * n)
        if mu0 is not None:
            r2 = rows.transpose(1, 0, 2, 3).reshape(n, -1)
            col = np.array([np.interp(mu0, base.nodes, r2[:, c]) for c in range(r2.shape[1])])
            beam = col.reshape(mcount, 4, 4) * (mu0 / math.pi)
        return diffuse, beam
    raise ValueError(f"unknown base {base!r}")


def radiance_mode(sol: FourierBlockSolution, tau: float, mu) -> np.ndarray:
    """Mode ``I_k^m(tau, mu)`` for signed cosines ``mu``; returns real ``(M, 4)``."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    out = np.zeros((len(mu), 4), dtype=complex)
    layer, t = sol.locate(tau)
    nl = len(sol.layers)
    upm = mu > 0
    if upm.any():
        mus = mu[upm]
        last = nl - 1
        _, down = layer_streams(sol, last, sol.taus[last])
        diffuse, beam = base_rows(sol.base, sol.m, sol.quad, mus, sol.parts[last].mu0)
        att = math.exp(-sol.total_tau / sol.parts[last].mu0)
        val = diffuse @ down + (beam @ sol.beam_stokes) * att
        for l in range(last, layer, -1):
            val = integrate_source(source_coefficients(sol, l, mus), 0.0, val)
        out[upm] = integrate_source(source_coefficients(sol, layer, mus), t, val)
    dnm = ~upm
    if dnm.any():
        mus = mu[dnm]
        val = np.zeros((len(mus), 4), dtype=complex)
        for l in range(layer):
            val = integrate_source(source_coefficients(sol, l, mus), float(sol.taus[l]), val)
        out[dnm] = integrate_source(source_coefficients(sol, layer, mus), t, val)
    scale = np.abs(out).max() if out.size else 0.0
    return _real(out, scale, "reconstructed radiance", sol.m)


def azimuthal_assemble(mode_values: dict, phi, phi0: float) -> np.ndarray:
    """``1/2 sum Phi_k^m(phi - phi0) I_k^m``.

    ``mode_values[(m, k)]`` are arrays ``(..., 4)``; ``phi`` is a sequence of azimuths.
    Returns ``(len(phi), ..., 4)``.
    """
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    keys = sorted(mode_values)
    first = mode_values[keys[0]]
    out = np.zeros((len(phi),) + first.shape)
    for a, ph in enumerate(phi):
        for m, k in keys:
            f1, f2 = fourier_basis(m, ph - phi0)
            basis = f1 if k == 1 else f2
            out[a] += 0.5 * mode_values[(m, k)] @ basis.T
    return out


# ------------------------------------------------------------ field container


@dataclass(frozen=True, eq=False)
class RadianceField:
    """Stokes vectors on a ``(tau, mu, phi)`` grid; ``stokes`` has shape ``(T, M, P, 4)``."""

    tau: np.ndarray
    mu: np.ndarray
    phi: np.ndarray
    stokes: np.ndarray
    n_orders: int
    n_nodes: int

    def physical_violation(self, tol: float = 1e-9) -> float:
        """Largest violation of ``I >= 0`` and ``I^2 >= Q^2 + U^2 + V^2`` (relative)."""
        i = self.stokes[..., 0]
        pol2 = (self.stokes[..., 1:] ** 2).sum(axis=-1)
        scale = max(np.abs(i).max(), 1e-300)
        neg = np.maximum(-i, 0.0).max() / scale
        over = np.maximum(pol2 - i * i, 0.0).max() / scale**2
        return float(max(neg, over))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("tau,mu,phi,I,Q,U,V\n")
        for a, tau in enumerate(self.tau):
            for b, mu in enumerate(self.mu):
                for c, phi in enumerate(self.phi):
                    s = self.stokes[a, b, c]
                    buf.write(f"{tau:.17g},{mu:.17g},{phi:.17g},{s[0]:.17g},{s[1]:.17g},{s[2]:.17g},{s[3]:.17g}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, n_orders: int = 0, n_nodes: int = 0) -> "RadianceField":
        data = np.loadtxt(io.StringIO(text), delimiter=",", skiprows=1, ndmin=2)
        tau = _unique_in_order(data[:, 0])
        mu = _unique_in_order(data[:, 1])
        phi = _unique_in_order(data[:, 2])
        stokes = data[:, 3:7].reshape(len(tau), len(mu), len(phi), 4)
        return cls(tau, mu, phi, stokes, n_orders, n_nodes)


def _unique_in_order(x: np.ndarray) -> np.ndarray:
    _, idx = np.unique(x, return_index=True)
    return x[np.sort(idx)]


def default_zenith_grid(count: int = 11) -> np.ndarray:
    """Upward cosines for zenith angles uniform on [0, 90] degrees (grazing clamped)."""
    theta = np.linspace(0.0, 0.5 * math.pi, count)
    return np.array([clamp_mu(math.cos(t)) for t in theta])


def default_azimuth_grid(count: int = 19) -> np.ndarray:
    """Azimuths uniform on [0, pi]."""
    return np.linspace(0.0, math.pi, count)
