"""Subsurface BRDF Mueller tables.

For each incidence cosine the transfer problem is solved for a basis of incident
Stokes vectors ``S_b``.  Stacking the exiting radiances ``I_b`` and the incident
irradiances ``E_b = mu_in S_b`` column-wise gives

    F_r = [I_1 ... I_n] [E_1 ... E_n]^+

(a plain inverse for the default four-vector basis).
"""

from __future__ import annotations

import io
import logging
import math
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import ValidationError, as_stokes
from .reconstruction import azimuthal_assemble
from .solver import VrteSolver, solve_vrte

log = logging.getLogger(__name__)

DEFAULT_BASIS = (
    (1.0, 0.0, 0.0, 0.0),
    (1.0, 1.0, 0.0, 0.0),
    (1.0, 0.0, 1.0, 0.0),
    (1.0, 0.0, 0.0, 1.0),
)
BASIS_COND_LIMIT = 1e3
NEG_TOL = 1e-9
MAGIC = b"VRTBRDF1"

__all__ = [
    "BrdfTable",
    "compute_brdf",
    "default_dphi_grid",
    "directional_hemispherical_reflectance",
    "solve_vrte",
]


def default_dphi_grid(count: int = 19) -> np.ndarray:
    """Uniform azimuth differences on ``[0, 2 pi)``."""
    return 2.0 * math.pi * np.arange(count) / count


@dataclass(frozen=True, eq=False)
class BrdfTable:
    """Mueller matrices ``m[i_in, i_out, i_phi]`` with ``dphi = phi_out - phi_in``.

    ``dphi = pi`` is the backscatter half-plane.
    """

    mu_in: np.ndarray
    mu_out: np.ndarray
    dphi: np.ndarray
    m: np.ndarray
    n_nodes: int
    n_orders: int
    material_hash: str
    clamped: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = ",".join(f"m{r}{c}" for r in range(4) for c in range(4))
        buf.write(f"mu_in,mu_out,dphi,{names}\n")
        for a, mi in enumerate(self.mu_in):
            for b, mo in enumerate(self.mu_out):
                for c, ph in enumerate(self.dphi):
                    vals = ",".join(f"{v:.17g}" for v in self.m[a, b, c].ravel())
                    buf.write(f"{mi:.17g},{mo:.17g},{ph:.17g},{vals}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, n_nodes: int = 0, n_orders: int = 0, material_hash: str = "") -> "BrdfTable":
        data = np.loadtxt(io.StringIO(text), delimiter=",", skiprows=1, ndmin=2)

        def uniq(x):
            _, idx = np.unique(x, return_index=True)
            return x[np.sort(idx)]

        mu_in, mu_out, dphi = uniq(data[:, 0]), uniq(data[:, 1]), uniq(data[:, 2])
        m = data[:, 3:].reshape(len(mu_in), len(mu_out), len(dphi), 4, 4)
        return cls(mu_in, mu_out, dphi, m, n_nodes, n_orders, material_hash)

    def to_bytes(self) -> bytes:
        """Little-endian binary form.

        Layout: 8-byte magic ``VRTBRDF1``; five ``uint32`` (n_in, n_out, n_phi,
        N, L); 16 ASCII bytes of material hash; ``float64`` arrays mu_in,
        mu_out, dphi; then ``float64`` Mueller entries in C order
        ``(n_in, n_out, n_phi, 4, 4)``.
        """
        head = MAGIC + struct.pack(
            "<5I", len(self.mu_in), len(self.mu_out), len(self.dphi), self.n_nodes, self.n_orders
        )
        head += self.material_hash.encode("ascii")[:16].ljust(16, b" ")
        body = b"".join(
            np.ascontiguousarray(a, dtype="<f8").tobytes() for a in (self.mu_in, self.mu_out, self.dphi, self.m)
        )
        return head + body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "BrdfTable":
        if raw[:8] != MAGIC:
            raise ValidationError("not a BRDF table file")
        n_in, n_out, n_phi, nn, nl = struct.unpack("<5I", raw[8:28])
        hsh = raw[28:44].decode("ascii").strip()
        arr = np.frombuffer(raw[44:], dtype="<f8")
        o = 0
        mu_in = arr[o : o + n_in].copy(); o += n_in
        mu_out = arr[o : o + n_out].copy(); o += n_out
        dphi = arr[o : o + n_phi].copy(); o += n_phi
        m = arr[o:].copy().reshape(n_in, n_out, n_phi, 4, 4)
        return cls(mu_in, mu_out, dphi, m, nn, nl, hsh)


def _basis_matrix(basis: Sequence) -> np.ndarray:
    mat = np.array([as_stokes(b) for b in basis], dtype=float).T  # (4, n)
    if mat.shape[1] < 4:
        raise ValidationError(f"incident basis needs at least 4 Stokes vectors, got {mat.shape[1]}")
    sv = np.linalg.svd(mat, compute_uv=False)
    cond = math.inf if sv[-1] == 0 else sv[0] / sv[-1]
    if cond >= BASIS_COND_LIMIT:
        raise ValidationError(f"incident basis is ill-conditioned (cond {cond:.3g})")
    return mat


def compute_brdf(
    spec_or_solver,
    mu_in: Sequence[float],
    quad=16,
    n_orders: Optional[int] = None,
    basis: Sequence = DEFAULT_BASIS,
    dphi: Optional[Sequence[float]] = None,
    mu_out: Optional[Sequence[float]] = None,
    threads: int = 1,
) -> BrdfTable:
    """Mueller BRDF table over ``mu_in x mu_out x dphi``.

    ``mu_out`` defaults to the quadrature nodes, where the exiting radiance is
    read straight from the nodal solution.  Other cosines go through
    source-function integration.
    """
    stokes_basis = _basis_matrix(basis)
    solver: VrteSolver = (
        spec_or_solver if isinstance(spec_or_solver, VrteSolver) else solve_vrte(spec_or_solver, quad, n_orders, threads)
    )
    dphi = default_dphi_grid() if dphi is None else np.asarray(dphi, dtype=float)
    on_nodes = mu_out is None
    mu_out = solver.quad.nodes.copy() if on_nodes else np.asarray(mu_out, dtype=float)
    if np.any(mu_out <= 0):
        raise ValidationError("BRDF output cosines must be positive")
    mu_in = np.asarray(mu_in, dtype=float)
    if np.any((mu_in <= 0) | (mu_in > 1)):
        raise ValidationError("incidence cosines must lie in (0, 1]")

    out = np.zeros((len(mu_in), len(mu_out), len(dphi), 4, 4))
    for a, mu0 in enumerate(mu_in):
        exits = []
        for col in stokes_basis.T:
            beam = solver.solve_beam(float(mu0), 0.0, col)
            if on_nodes:
                with solver.timer.step("reconstruction"):
                    nod = beam.nodal_modes(0.0)
                    field = azimuthal_assemble({k: v[0] for k, v in nod.items()}, dphi, 0.0)
            else:
                field = solver.radiance(beam, [0.0], mu_out, dphi).stokes[0].transpose(1, 0, 2)
            exits.append(field)  # (P, M, 4)
        with solver.timer.step("reconstruction"):
            rad = np.stack(exits, axis=-1)  # (P, M, 4, n)
            irr = float(mu0) * stokes_basis
            out[a] = (rad @ np.linalg.pinv(irr)).transpose(1, 0, 2, 3)

    with solver.timer.step("reconstruction"):
        m00 = out[..., 0, 0]
        if np.any(m00 < -NEG_TOL * max(np.abs(m00).max(), 1.0)):
            log.warning("BRDF m00 below -%g at %d entries", NEG_TOL, int(np.sum(m00 < -NEG_TOL)))
        neg = m00 < 0
        clamped = int(neg.sum())
        if clamped:
            log.info("clamped %d negative m00 entries to zero", clamped)
            out[..., 0, 0] = np.where(neg, 0.0, m00)
        digest = solver.spec.digest()
    return BrdfTable(mu_in, mu_out, dphi, out, solver.quad.n, solver.n_orders, digest, clamped)


def directional_hemispherical_reflectance(table: BrdfTable, index: int = 0, weights=None) -> np.ndarray:
    """``int int F_r[:, 0] mu dmu dphi`` for incidence ``table.mu_in[index]``.

    Uses the quadrature weights for ``mu`` (``weights`` defaults to the
    double-Gauss weights of the table's node count) and the rectangle rule in
    ``dphi``, which requires a uniform grid on ``[0, 2 pi)``.
    """
    from .core import build_double_gauss_quadrature

    if weights is None:
        quad = build_double_gauss_quadrature(table.n_nodes)
        if quad.n != len(table.mu_out) or not np.allclose(quad.nodes, table.mu_out, atol=1e-14):
            raise ValidationError("reflectance needs a table on the quadrature nodes")
        weights = quad.weights
    n_phi = len(table.dphi)
    if not np.allclose(table.dphi, default_dphi_grid(n_phi), atol=1e-12):
        raise ValidationError("reflectance needs a uniform azimuth grid on [0, 2 pi)")
    col = table.m[index, :, :, :, 0]  # (M, P, 4)
    per_mu = col.sum(axis=1) * (2.0 * math.pi / n_phi)
    return (np.asarray(weights) * table.mu_out) @ per_mu
