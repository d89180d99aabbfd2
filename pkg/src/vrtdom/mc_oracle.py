"""Polarized Monte Carlo photon tracer for plane-parallel slabs.

Independent of the discrete-ordinate machinery: it only shares the scattering
matrix ``F(Theta)`` summed directly from the Greek coefficients and the frame
conventions of :func:`vrtdom.phase.rotation_phase_matrix`.

Photon state is the depth ``tau``, direction ``n``, a reference vector ``e1``
transverse to ``n`` (with ``e2 = n x e1``) and the Stokes weight in that frame.
At a collision the frame is rotated about ``n`` by a uniform ``psi``; the new
``e1`` spans the scattering plane with ``n``, so the update is

    S <- omega F(Theta) L(psi) S / (2 p(cos Theta) (1 + rho r))

where ``p`` is the tabulated density of ``cos Theta`` and ``(1 + rho r)`` the
polarization-dependent factor of the joint ``(cos Theta, psi)`` rejection draw
(``rho = b1 / a1``, ``r = Q' / I`` in the rotated frame).  This keeps the
intensity weight factor near ``omega`` and avoids the heavy-tailed weights that
intensity-only sampling produces after many polarizing scatterings.  Exiting
photons are rotated into the meridian frame and tallied per
``(hemisphere, mu bin, phi - phi0 bin)``.  Each photon contributes to at most one
bin, so per-bin standard errors follow from sums and sums of squares.

Photons are processed in batches with seeds derived from ``(seed, batch)``;
batch tallies are summed in batch order, so results do not depend on the number
of worker threads.
"""

from __future__ import annotations

import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .core import BlackBase, LambertianBase, MaterialSpec, ValidationError, as_stokes, validate_material
from .phase import scattering_matrix
from .reconstruction import azimuthal_assemble, radiance_mode

N_CELLS = 2048
N_TABLE = 8193
UNIFORM_MIX = 0.01
ROULETTE_LEVEL = 1e-4
ROULETTE_SURVIVAL = 10.0
MAX_EVENTS = 100000
DEFAULT_BATCH = 50000

# ------------------------------------------------------------ numba kernel

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


@numba.njit(cache=True)
def _splitmix(state):
    state = state + _GOLDEN
    z = state
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    z = z ^ (z >> np.uint64(31))
    return state, z


@numba.njit(cache=True)
def _uniform(rng):
    """Uniform on (0, 1); ``rng`` is a one-element uint64 array."""
    st, z = _splitmix(rng[0])
    rng[0] = st
    return ((z >> np.uint64(11)).item() + 0.5) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True)
def _rotate_stokes(s, c2, s2):
    q = s[1]
    u = s[2]
    s[1] = c2 * q + s2 * u
    s[2] = -s2 * q + c2 * u


@numba.njit(cache=True)
def _to_frame(s, e1, e2, f1):
    """Rotate ``s`` from basis ``(e1, e2)`` to ``(f1, n x f1)`` about the same ``n``."""
    x = f1[0] * e1[0] + f1[1] * e1[1] + f1[2] * e1[2]
    y = f1[0] * e2[0] + f1[1] * e2[1] + f1[2] * e2[2]
    r2 = x * x + y * y
    if r2 <= 0.0:
        return
    # cos 2psi, sin 2psi without trig
    _rotate_stokes(s, (x * x - y * y) / r2, 2.0 * x * y / r2)


@numba.njit(cache=True)
def _meridian(n, et, ep):
    ct = n[2]
    st = math.sqrt(max(0.0, 1.0 - ct * ct))
    if st > 1e-12:
        cp = n[0] / st
        sp = n[1] / st
    else:
        cp = 1.0
        sp = 0.0
    et[0] = ct * cp
    et[1] = ct * sp
    et[2] = -st
    ep[0] = -sp
    ep[1] = cp
    ep[2] = 0.0


@numba.njit(cache=True)
def _cross(a, b, out):
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


@numba.njit(cache=True)
def _tally(s, n, e1, e2, phi0, nmu, nphi, hemi, sums, sumsq, hits):
    et = np.empty(3)
    ep = np.empty(3)
    _meridian(n, et, ep)
    _to_frame(s, e1, e2, et)
    amu = abs(n[2])
    im = min(int(amu * nmu), nmu - 1)
    phi = math.atan2(n[1], n[0]) - phi0
    phi = phi - 2.0 * math.pi * math.floor(phi / (2.0 * math.pi))
    ip = min(int(phi / (2.0 * math.pi) * nphi), nphi - 1)
    for c in range(4):
        sums[hemi, im, ip, c] += s[c]
        sumsq[hemi, im, ip, c] += s[c] * s[c]
    hits[hemi, im, ip] += 1


@numba.njit(cache=True, nogil=True)
def _trace_batch(
    n_photons, seed, mu0, phi0, stokes, bounds, omegas, ftab, cdf, pdf, guide, rhomax,
    base_kind, albedo, nmu, nphi, sums, sumsq, hits, roulette,
):
    rng = np.empty(1, dtype=np.uint64)
    rng[0] = seed
    nl = omegas.shape[0]
    total = bounds[nl]
    n_tab = ftab.shape[1]
    n_cell = pdf.shape[1]
    dx_tab = 2.0 / (n_tab - 1)
    dx_cell = 2.0 / n_cell
    level = roulette * stokes[0]
    n = np.empty(3)
    e1 = np.empty(3)
    e2 = np.empty(3)
    f1 = np.empty(3)
    s = np.empty(4)
    t = np.empty(4)
    st0 = math.sqrt(max(0.0, 1.0 - mu0 * mu0))
    for _ in range(n_photons):
        n[0] = st0 * math.cos(phi0)
        n[1] = st0 * math.sin(phi0)
        n[2] = -mu0
        _meridian(n, e1, e2)
        for c in range(4):
            s[c] = stokes[c]
        tau = 0.0
        scattered = False
        for _event in range(MAX_EVENTS):
            path = -math.log(_uniform(rng))
            tau_new = tau - n[2] * path
            if tau_new <= 0.0:
                if scattered:
                    _tally(s, n, e1, e2, phi0, nmu, nphi, 0, sums, sumsq, hits)
                break
            if tau_new >= total:
                if base_kind == 1 and albedo > 0.0:
                    # Lambertian: depolarize, cosine-weighted upward direction
                    tau = total
                    ui = s[0]
                    s[0] = albedo * ui
                    s[1] = 0.0
                    s[2] = 0.0
                    s[3] = 0.0
                    mu = math.sqrt(_uniform(rng))
                    ph = 2.0 * math.pi * _uniform(rng)
                    sn = math.sqrt(max(0.0, 1.0 - mu * mu))
                    n[0] = sn * math.cos(ph)
                    n[1] = sn * math.sin(ph)
                    n[2] = mu
                    _meridian(n, e1, e2)
                    scattered = True
                else:
                    if scattered and base_kind == 0:
                        _tally(s, n, e1, e2, phi0, nmu, nphi, 1, sums, sumsq, hits)
                    break
            else:
                tau = tau_new
                layer = 0
                while layer < nl - 1 and tau > bounds[layer + 1]:
                    layer += 1
                # joint draw of (cos Theta, psi): x from the tabulated density,
                # psi uniform, accepted with probability
                # (1 + rho r) / (1 + rho_max P) where rho = b1 / a1, r is the
                # linear polarization along the new scattering plane and P its
                # bound over psi; r averages to zero over psi, so the accepted
                # pair has density p(x) (1 + rho r) / (2 pi)
                inv_i = 1.0 / s[0]
                pol = min(1.0, math.sqrt(s[1] * s[1] + s[2] * s[2]) * inv_i)
                rmax = rhomax[layer]
                bound = 1.0 + rmax * pol
                while True:
                    u = _uniform(rng)
                    lo = guide[layer, min(int(u * n_cell), n_cell - 1)]
                    while lo < n_cell - 1 and cdf[layer, lo + 1] <= u:
                        lo += 1
                    x = -1.0 + (lo + _uniform(rng)) * dx_cell
                    if x > 1.0:
                        x = 1.0
                    psi = 2.0 * math.pi * _uniform(rng)
                    cp = math.cos(psi)
                    sp = math.sin(psi)
                    c2 = cp * cp - sp * sp
                    s2 = 2.0 * sp * cp
                    g = (x + 1.0) / dx_tab
                    k = min(int(g), n_tab - 2)
                    w = g - k
                    a1 = (1 - w) * ftab[layer, k, 0] + w * ftab[layer, k + 1, 0]
                    b1 = (1 - w) * ftab[layer, k, 4] + w * ftab[layer, k + 1, 4]
                    if rmax == 0.0 or pol == 0.0:
                        factor = 1.0
                        break
                    rho = b1 / a1 if a1 > 0.0 else 0.0
                    rho = min(rmax, max(-rmax, rho))
                    r = min(pol, max(-pol, (c2 * s[1] + s2 * s[2]) * inv_i))
                    factor = 1.0 + rho * r
                    if _uniform(rng) * bound < factor:
                        break
                p = pdf[layer, lo] * factor
                # rotate the frame into the scattering plane
                for c in range(3):
                    f1[c] = cp * e1[c] + sp * e2[c]
                _rotate_stokes(s, c2, s2)
                _cross(n, f1, e2)
                sint = math.sqrt(max(0.0, 1.0 - x * x))
                for c in range(3):
                    nn = x * n[c] + sint * f1[c]
                    e1[c] = x * f1[c] - sint * n[c]
                    n[c] = nn
                # remaining F(Theta) entries by linear interpolation of the table
                a2 = (1 - w) * ftab[layer, k, 1] + w * ftab[layer, k + 1, 1]
                a3 = (1 - w) * ftab[layer, k, 2] + w * ftab[layer, k + 1, 2]
                a4 = (1 - w) * ftab[layer, k, 3] + w * ftab[layer, k + 1, 3]
                b2 = (1 - w) * ftab[layer, k, 5] + w * ftab[layer, k + 1, 5]
                scale = omegas[layer] / (2.0 * p)
                t[0] = scale * (a1 * s[0] + b1 * s[1])
                t[1] = scale * (b1 * s[0] + a2 * s[1])
                t[2] = scale * (a3 * s[2] + b2 * s[3])
                t[3] = scale * (-b2 * s[2] + a4 * s[3])
                for c in range(4):
                    s[c] = t[c]
                n2 = math.sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2])
                for c in range(3):
                    n[c] /= n2
                d = e1[0] * n[0] + e1[1] * n[1] + e1[2] * n[2]
                for c in range(3):
                    e1[c] -= d * n[c]
                d = math.sqrt(e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2])
                for c in range(3):
                    e1[c] /= d
                _cross(n, e1, e2)
                scattered = True
            if s[0] <= 0.0:
                break
            if s[0] < level:
                if _uniform(rng) * ROULETTE_SURVIVAL < 1.0:
                    for c in range(4):
                        s[c] *= ROULETTE_SURVIVAL
                else:
                    break


# ------------------------------------------------------------ python side


def _batch_seed(seed: int, batch: int) -> np.uint64:
    """Independent 64-bit seed per batch (one splitmix step of a mixed key)."""
    mask = (1 << 64) - 1
    z = (seed * 0x9E3779B97F4A7C15 + (batch + 1) * 0xD1B54A32D192ED03) & mask
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
    return np.uint64(z ^ (z >> 31))


def phase_tables(coeffs: np.ndarray, n_table: int = N_TABLE, n_cells: int = N_CELLS):
    """``F`` table ``(n_table, 6)`` as ``a1 a2 a3 a4 b1 b2`` plus sampling ``cdf``/``pdf`` over cells."""
    x = np.linspace(-1.0, 1.0, n_table)
    f = scattering_matrix(coeffs, x)
    tab = np.stack([f[:, 0, 0], f[:, 1, 1], f[:, 2, 2], f[:, 3, 3], f[:, 0, 1], f[:, 2, 3]], axis=1)
    # cell masses from a fine midpoint rule on a1
    sub = 8
    xs = -1.0 + (np.arange(n_cells * sub) + 0.5) * (2.0 / (n_cells * sub))
    a1 = np.maximum(scattering_matrix(coeffs, xs)[:, 0, 0], 0.0).reshape(n_cells, sub).mean(axis=1)
    mass = a1 / a1.sum() if a1.sum() > 0 else np.full(n_cells, 1.0 / n_cells)
    mass = (1.0 - UNIFORM_MIX) * mass + UNIFORM_MIX / n_cells
    cdf = np.concatenate([[0.0], np.cumsum(mass)])
    cdf[-1] = 1.0
    pdf = mass / (2.0 / n_cells)
    return tab, cdf, pdf


def _guide_table(cdf: np.ndarray) -> np.ndarray:
    """Largest cell index with ``cdf[i] <= j / n`` for each of ``n`` equal slices of ``u``."""
    n = cdf.size - 1
    return np.clip(np.searchsorted(cdf, np.arange(n) / n, side="right") - 1, 0, n - 1).astype(np.int64)


def _rho_bound(tab: np.ndarray) -> float:
    a1, b1 = tab[:, 0], tab[:, 4]
    ratio = np.where(a1 > 0, np.abs(b1) / np.where(a1 > 0, a1, 1.0), 0.0)
    return float(min(1.0, ratio.max()))


@dataclass(frozen=True, eq=False)
class TallyGrid:
    """Exiting Stokes tallies; hemisphere 0 is upward at the top, 1 downward at the bottom.

    ``mu`` bins are uniform on ``(0, 1]`` in ``|mu|`` and ``phi`` bins uniform on
    ``[0, 2 pi)`` in ``phi - phi0``.
    """

    sums: np.ndarray  # (2, nmu, nphi, 4)
    sumsq: np.ndarray
    n_photons: int
    mu0: float
    total_tau: float
    hits: Optional[np.ndarray] = None  # (2, nmu, nphi) photon counts

    @property
    def nmu(self) -> int:
        return self.sums.shape[1]

    @property
    def nphi(self) -> int:
        return self.sums.shape[2]

    @property
    def mu_edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.nmu + 1)

    @property
    def phi_edges(self) -> np.ndarray:
        return np.linspace(0.0, 2.0 * math.pi, self.nphi + 1)

    def _scale(self) -> np.ndarray:
        me, pe = self.mu_edges, self.phi_edges
        area = 0.5 * (me[1:] ** 2 - me[:-1] ** 2)[:, None] * np.diff(pe)[None, :]
        return self.mu0 / (self.n_photons * area)

    def radiance(self) -> np.ndarray:
        """Bin-averaged (projected-solid-angle weighted) radiance."""
        return self.sums * self._scale()[None, :, :, None]

    def stderr(self) -> np.ndarray:
        n = self.n_photons
        mean = self.sums / n
        var = np.maximum(self.sumsq / n - mean * mean, 0.0) / max(n - 1, 1)
        return np.sqrt(var) * n * self._scale()[None, :, :, None]

    def flux(self, hemisphere: int = 0) -> tuple[float, float]:
        """Exiting I-flux per unit area with its standard error (units of ``mu0 I0``)."""
        tot = self.sums[hemisphere, ..., 0].sum()
        # photons reach at most one bin, so the total is itself a per-photon sum
        sq = self.sumsq[hemisphere, ..., 0].sum()
        n = self.n_photons
        mean = tot / n
        var = max(sq / n - mean * mean, 0.0) / max(n - 1, 1)
        return float(mean * self.mu0), float(math.sqrt(var) * self.mu0)

    def to_csv(self) -> str:
        """Radiance schema plus standard errors; ``mu`` is the signed bin centre."""
        rad, err = self.radiance(), self.stderr()
        mc = 0.5 * (self.mu_edges[1:] + self.mu_edges[:-1])
        pc = 0.5 * (self.phi_edges[1:] + self.phi_edges[:-1])
        buf = io.StringIO()
        buf.write("tau,mu,phi,I,Q,U,V,sI,sQ,sU,sV\n")
        for h, (tau, sign) in enumerate(((0.0, 1.0), (self.total_tau, -1.0))):
            for a in range(self.nmu):
                for b in range(self.nphi):
                    vals = ",".join(f"{v:.17g}" for v in np.concatenate([rad[h, a, b], err[h, a, b]]))
                    buf.write(f"{tau:.17g},{sign * mc[a]:.17g},{pc[b]:.17g},{vals}\n")
        return buf.getvalue()


def mc_trace(
    spec: MaterialSpec,
    photons: int,
    seed: int = 0,
    bins: tuple = (10, 12),
    batch_size: int = DEFAULT_BATCH,
    threads: int = 1,
    roulette: float = ROULETTE_LEVEL,
) -> TallyGrid:
    """Trace ``photons`` packets of the beam in ``spec.source`` through the slab."""
    spec = validate_material(spec)
    if photons < 1:
        raise ValidationError("photon count must be at least 1")
    base = spec.base
    if isinstance(base, BlackBase):
        base_kind, albedo = 0, 0.0
    elif isinstance(base, LambertianBase):
        base_kind, albedo = 1, float(base.albedo)
    else:
        raise ValidationError("the Monte Carlo oracle supports black and Lambertian bases only")
    nmu, nphi = int(bins[0]), int(bins[1])
    tabs = [phase_tables(layer.coeffs) for layer in spec.layers]
    ftab = np.ascontiguousarray(np.stack([t[0] for t in tabs]))
    cdf = np.ascontiguousarray(np.stack([t[1] for t in tabs]))
    pdf = np.ascontiguousarray(np.stack([t[2] for t in tabs]))
    guide = np.ascontiguousarray(np.stack([_guide_table(t[1]) for t in tabs]))
    rhomax = np.array([_rho_bound(t[0]) for t in tabs])
    omegas = np.array([layer.omega for layer in spec.layers])
    bounds = np.concatenate([[0.0], np.cumsum([layer.tau for layer in spec.layers])])
    stokes = as_stokes(spec.source.stokes).copy()
    mu0, phi0 = float(spec.source.mu0), float(spec.source.phi0)

    sizes = [batch_size] * (photons // batch_size)
    if photons % batch_size:
        sizes.append(photons % batch_size)

    def run(b):
        sums = np.zeros((2, nmu, nphi, 4))
        sumsq = np.zeros((2, nmu, nphi, 4))
        hits = np.zeros((2, nmu, nphi), dtype=np.int64)
        _trace_batch(
            sizes[b], _batch_seed(seed, b), mu0, phi0, stokes, bounds, omegas, ftab, cdf, pdf, guide, rhomax,
            base_kind, albedo, nmu, nphi, sums, sumsq, hits, roulette,
        )
        return sums, sumsq, hits

    if threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, range(len(sizes))))
    else:
        parts = [run(b) for b in range(len(sizes))]
    sums = np.zeros((2, nmu, nphi, 4))
    sumsq = np.zeros((2, nmu, nphi, 4))
    hits = np.zeros((2, nmu, nphi), dtype=np.int64)
    for a, b, c in parts:
        sums += a
        sumsq += b
        hits += c
    return TallyGrid(sums, sumsq, int(photons), mu0, float(bounds[-1]), hits)


# ------------------------------------------------------------ comparison


def bin_averaged_dom(solver, beam, grid: TallyGrid, points: int = 4) -> np.ndarray:
    """Discrete-ordinate radiance averaged over each tally bin with weight ``mu``.

    Gauss-Legendre rules with ``points`` nodes per bin in ``mu`` and ``phi``.
    Returns ``(2, nmu, nphi, 4)``.
    """
    gx, gw = np.polynomial.legendre.leggauss(points)
    me, pe = grid.mu_edges, grid.phi_edges
    mus = (0.5 * (me[1:] - me[:-1])[:, None] * (gx[None, :] + 1.0) + me[:-1, None]).ravel()
    wmu = (0.5 * (me[1:] - me[:-1])[:, None] * gw[None, :]).ravel() * mus
    phis = (0.5 * (pe[1:] - pe[:-1])[:, None] * (gx[None, :] + 1.0) + pe[:-1, None]).ravel()
    wphi = (0.5 * (pe[1:] - pe[:-1])[:, None] * gw[None, :]).ravel()
    out = np.zeros((2, grid.nmu, grid.nphi, 4))
    for h, (tau, sign) in enumerate(((0.0, 1.0), (grid.total_tau, -1.0))):
        modes = {key: radiance_mode(sol, tau, sign * mus) for key, sol in sorted(beam.blocks.items())}
        # assemble at phi0 + phi so the bins are relative to the beam azimuth
        field = azimuthal_assemble(modes, phis + beam.phi0, beam.phi0)  # (P*g, M*g, 4)
        wf = field * wphi[:, None, None] * wmu[None, :, None]
        wf = wf.reshape(grid.nphi, points, grid.nmu, points, 4).sum(axis=(1, 3))
        norm = (wphi.reshape(grid.nphi, points).sum(1)[:, None]) * (wmu.reshape(grid.nmu, points).sum(1)[None, :])
        out[h] = (wf / norm[..., None]).transpose(1, 0, 2)
    return out


@dataclass(frozen=True)
class Agreement:
    fraction: float
    n_bins: int
    n_within: int
    worst_z: float
    n_excluded: int = 0


def compare_with_dom(
    dom: np.ndarray,
    grid: TallyGrid,
    k_sigma: float = 3.0,
    hemispheres=(0, 1),
    floor: Optional[float] = None,
    min_hits: int = 0,
) -> Agreement:
    """Fraction of bin entries with ``|dom - mc| <= k sigma + floor``.

    ``floor`` defaults to ``1e-9`` times the largest MC intensity; it only
    matters for entries that are exactly zero in both estimates.  Bins reached
    by fewer than ``min_hits`` photons are left out, since their sample standard
    error is itself unreliable.
    """
    mc, err = grid.radiance(), grid.stderr()
    hemispheres = list(hemispheres)
    d = np.abs(dom[hemispheres] - mc[hemispheres])
    e = err[hemispheres]
    if floor is None:
        floor = 1e-9 * max(np.abs(mc[..., 0]).max(), 1e-300)
    keep = np.ones(d.shape[:-1], dtype=bool)
    if min_hits > 0 and grid.hits is not None:
        keep = grid.hits[hemispheres] >= min_hits
    keep4 = np.broadcast_to(keep[..., None], d.shape)
    ok = (d <= k_sigma * e + floor) & keep4
    z = np.where(e > 0, d / np.where(e > 0, e, 1.0), np.where(d > floor, np.inf, 0.0))
    z = np.where(keep4, z, 0.0)
    n_bins = int(keep4.sum())
    frac = float(ok.sum() / n_bins) if n_bins else 1.0
    return Agreement(frac, n_bins, int(ok.sum()), float(z.max()), int((~keep).sum()))
