"""End-to-end acceptance checks; each records a one-line verdict for the summary."""

import itertools
import json
import math
import time

import numpy as np
import pytest

from vrtdom import (
    BlackBase,
    LambertianBase,
    LayerSpec,
    MaterialSpec,
    Source,
    StokesVector,
    VrteSolver,
    build_double_gauss_quadrature,
)
from vrtdom.boundary import build_propagators
from vrtdom.brdf import compute_brdf, default_dphi_grid, directional_hemispherical_reflectance
from vrtdom.cli import main as cli_main
from vrtdom.core import isotropic_coeffs, material_to_dict, rayleigh_coeffs
from vrtdom.homogeneous import build_reduced_operators, solve_homogeneous
from vrtdom.mc_oracle import bin_averaged_dom, compare_with_dom, mc_trace
from vrtdom.particular import build_beam_source, is_resonant, solve_particular
from vrtdom.phase import assemble_azimuth_kernel
from vrtdom.reconstruction import nodal_field, radiance_mode

from conftest import ACCEPTANCE_RESULTS, random_material, synthetic_coeffs
from oracles import expm_streams, single_scattering_top, unreduced_particular

# largest eigenmode residual of every solver built here
EIGEN_RESIDUALS: list = []


def record(key, ok, detail):
    ACCEPTANCE_RESULTS[key] = (bool(ok), detail)
    assert ok, f"criterion {key}: {detail}"


def build(spec, n, orders=None):
    solver = VrteSolver(spec, n, orders)
    EIGEN_RESIDUALS.append(solver.max_eigen_residual())
    return solver


# -------------------------------------------------------------------- 1


def test_criterion_01_vacuum_absorber():
    spec = MaterialSpec([LayerSpec(0.0, 1.0, synthetic_coeffs(4))], BlackBase())
    t0 = time.perf_counter()
    solver = build(spec, 8, 4)
    worst = 0.0
    for mu0, stokes in [(0.6, (1, 0, 0, 0)), (1.0, (1, 0.5, -0.3, 0.2))]:
        beam = solver.solve_beam(mu0, 0.2, stokes)
        field = solver.radiance(beam, [0.0, 0.5, 1.0])
        worst = max(worst, np.abs(field.stokes).max())
    table = compute_brdf(solver, [0.3, 1.0])
    worst = max(worst, np.abs(table.m).max())
    elapsed = time.perf_counter() - t0
    record(1, worst < 1e-12 and elapsed < 1.0, f"max |entry| {worst:.1e}, {elapsed:.2f} s")


# -------------------------------------------------------------------- 2


def _single_scattering_error(omega, n=16):
    layer = LayerSpec(omega, 0.01, rayleigh_coeffs())
    solver = build(MaterialSpec([layer], BlackBase()), n)
    mu = np.linspace(0.1, 1.0, 19)
    phi = np.linspace(0.0, math.pi, 19)
    got = solver.radiance(solver.solve_beam(0.6, 0.0), [0.0], mu, phi).stokes[0]
    ref = single_scattering_top(layer, 0.6, mu, phi)
    err_i = np.abs(got[..., 0] - ref[..., 0]) / ref[..., 0]
    # Q crosses zero, so it is measured against its largest magnitude at each mu
    err_q = np.abs(got[..., 1] - ref[..., 1]) / np.abs(ref[..., 1]).max(axis=1, keepdims=True)
    return float(err_i.max()), float(err_q.max())


def test_criterion_02_single_scattering():
    # the residual is second-order scattering, proportional to omega
    t0 = time.perf_counter()
    err_i, err_q = _single_scattering_error(0.2)
    elapsed = time.perf_counter() - t0
    half_i, _ = _single_scattering_error(0.1)
    slope = err_i / half_i
    ok = err_i < 0.01 and err_q < 0.02 and elapsed < 10.0 and 1.8 < slope < 2.2
    record(2, ok, f"I {100 * err_i:.2f}%, Q {100 * err_q:.2f}% at omega=0.2; error ratio 0.2/0.1 = {slope:.2f}; {elapsed:.2f} s")


# -------------------------------------------------------------------- 3


def test_criterion_03_flux_conservation():
    t0 = time.perf_counter()
    devs = []
    for tau0 in (1.0, 10.0, 100.0):
        spec = MaterialSpec([LayerSpec(1.0, tau0, synthetic_coeffs(12))], LambertianBase(1.0))
        solver = build(spec, 24, 12)
        table = compute_brdf(solver, [0.2, 0.6, 1.0], dphi=default_dphi_grid(19))
        for idx in range(3):
            devs.append(abs(directional_hemispherical_reflectance(table, idx)[0] - 1.0))
    elapsed = time.perf_counter() - t0
    record(3, max(devs) <= 1e-3 and elapsed < 60.0, f"max |DHR - 1| {max(devs):.1e}, {elapsed:.1f} s")


# -------------------------------------------------------------------- 4


def _particular_deviation(rng):
    worst = 0.0
    for _ in range(40):
        n = int(rng.integers(2, 9))
        m = int(rng.integers(0, 6))
        layer = LayerSpec(float(rng.uniform(0.1, 0.99)), 1.0, synthetic_coeffs(6, g=float(rng.uniform(0, 0.8))))
        q = build_double_gauss_quadrature(n)
        ops = build_reduced_operators(m, layer, q, assemble_azimuth_kernel(m, layer, q))
        mu0 = float(rng.uniform(0.05, 1.0))
        if is_resonant(mu0, solve_homogeneous(ops).lam):
            continue
        for k in (1, 2):
            src = build_beam_source(m, k, layer, q, mu0, [1.0, 0.4, -0.3, 0.2])
            part = solve_particular(ops, src)
            zp, zm = unreduced_particular(ops, src)
            scale = max(np.abs(zp).max(), np.abs(zm).max(), 1e-300)
            worst = max(worst, np.abs(part.z_plus - zp).max() / scale, np.abs(part.z_minus - zm).max() / scale)
    return worst


BOUNDARY_CASES = [
    (MaterialSpec([LayerSpec(0.9, 1.0, rayleigh_coeffs())], LambertianBase(0.4)), 6, (0, 1)),
    (MaterialSpec([LayerSpec(0.9, 1.0, rayleigh_coeffs())], LambertianBase(0.4)), 8, (1, 2)),
    (MaterialSpec([LayerSpec(0.7, 0.6, synthetic_coeffs(5)), LayerSpec(1.0, 0.5, rayleigh_coeffs())], BlackBase()), 4, (0, 1)),
    (MaterialSpec([LayerSpec(0.7, 0.6, synthetic_coeffs(5)), LayerSpec(0.95, 0.5, synthetic_coeffs(5))], LambertianBase(0.8)), 5, (2, 2)),
]


def _boundary_deviation():
    worst_field, worst_coef = 0.0, 0.0
    stokes, mu0 = [1.0, 0.3, -0.4, 0.2], 0.55
    for spec, n, (m, k) in BOUNDARY_CASES:
        solver = build(spec, n)
        sol = solver.solve_beam(mu0, 0.0, stokes).blocks[(m, k)]
        levels = expm_streams(solver.spec, solver.quad, m, k, mu0, stokes)
        depths = np.concatenate([[0.0], np.cumsum(sol.taus)])
        scale = max(np.abs(y).max() for y in levels)
        for depth, ref in zip(depths, levels):
            up, down = nodal_field(sol, depth)
            worst_field = max(worst_field, np.abs(np.concatenate([up.ravel(), down.ravel()]) - ref).max() / scale)
        for l, md in enumerate(sol.modes):
            props = build_propagators(md, sol.taus[l])
            part = sol.parts[l]
            basis = np.concatenate([props.top_up, props.top_down, props.bottom_up, props.bottom_down])
            zp = np.concatenate([part.z_plus, part.z_minus])
            a_top = math.exp(-sol.tops[l] / mu0)
            a_bot = math.exp(-(sol.tops[l] + sol.taus[l]) / mu0)
            target = np.concatenate([levels[l] - a_top * zp, levels[l + 1] - a_bot * zp])
            ref = np.linalg.lstsq(basis, target, rcond=None)[0]
            worst_coef = max(worst_coef, np.abs(sol.coefs[l] - ref).max() / np.abs(ref).max())
    return worst_field, worst_coef


def test_criterion_04_reduced_and_direct_solves():
    part = _particular_deviation(np.random.default_rng(2024))
    field, coef = _boundary_deviation()
    ok = part < 1e-10 and field < 1e-9 and coef < 1e-9
    record(4, ok, f"particular {part:.1e}, boundary streams {field:.1e}, coefficients {coef:.1e}")


# -------------------------------------------------------------------- 5, 10


def _node_consistency(n, n_terms, seed, orders=None):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(5):
        spec = random_material(rng, n_terms)
        solver = build(spec, n, orders)
        beam = solver.solve_beam(spec.source.mu0, spec.source.phi0, spec.source.stokes)
        mu = np.concatenate([solver.quad.nodes, -solver.quad.nodes])
        total = solver.spec.total_tau
        for tau in (0.0, float(rng.uniform(0, total)), total):
            for sol in beam.blocks.values():
                up, down = nodal_field(sol, tau)
                ref = np.concatenate([up, down])
                scale = max(np.abs(ref).max(), 1e-300)
                worst = max(worst, np.abs(radiance_mode(sol, tau, mu) - ref).max() / scale)
    return worst


def test_criterion_05_node_consistency():
    worst = _node_consistency(12, 8, seed=5)
    record(5, worst < 1e-8, f"max relative deviation {worst:.1e} over 5 random stacks")


# -------------------------------------------------------------------- 6


SPLIT_CASES = [
    (0.9, 2.0, BlackBase(), rayleigh_coeffs()),
    (1.0, 3.0, LambertianBase(0.7), rayleigh_coeffs()),
    (0.5, 5.0, LambertianBase(0.2), isotropic_coeffs()),
    (0.95, 1.5, LambertianBase(0.4), synthetic_coeffs(8)),
]


def test_criterion_06_layer_splitting():
    worst = 0.0
    mu = np.array([0.9, 0.4, 0.05, -0.3, -0.95])
    phi = np.linspace(0, 2 * math.pi, 7)
    for omega, tau, base, coeffs in SPLIT_CASES:
        ref = None
        for k in (1, 2, 3, 4):
            solver = build(MaterialSpec([LayerSpec(omega, tau / k, coeffs)] * k, base), 8)
            beam = solver.solve_beam(0.7, 0.0, [1, 0.3, 0.1, -0.2])
            f = solver.radiance(beam, [0.0, tau], mu, phi).stokes
            if ref is None:
                ref = f
            else:
                worst = max(worst, np.abs(f - ref).max() / np.abs(ref).max())
    record(6, worst < 1e-8, f"max relative change {worst:.1e} for k = 2..4")


# -------------------------------------------------------------------- 7

MC_PHOTONS = 10_000_000
MC_MIN_HITS = 20


def test_criterion_07_monte_carlo():
    t0 = time.perf_counter()
    fractions = []
    for coeffs, omega, tau, mu0 in itertools.product(
        (isotropic_coeffs(), rayleigh_coeffs()), (0.5, 0.9), (1.0, 10.0), (0.6, 1.0)
    ):
        spec = MaterialSpec([LayerSpec(omega, tau, coeffs)], BlackBase(), Source(mu0, 0.0, StokesVector(1.0)))
        grid = mc_trace(spec, MC_PHOTONS, seed=1)
        solver = build(spec, 24)
        dom = bin_averaged_dom(solver, solver.solve_beam(mu0, 0.0), grid)
        fractions.append(compare_with_dom(dom, grid, min_hits=MC_MIN_HITS).fraction)
    elapsed = time.perf_counter() - t0
    ok = min(fractions) >= 0.95 and elapsed < 600.0
    record(7, ok, f"lowest in-3-sigma fraction {min(fractions):.4f} over 16 configurations, {elapsed:.0f} s")


# -------------------------------------------------------------------- 9


def _write_material(path, spec):
    path.write_text(json.dumps(material_to_dict(spec)))
    return path


def test_criterion_09_thread_determinism(tmp_path):
    runs = [
        (MaterialSpec([LayerSpec(0.0, 1.0, synthetic_coeffs(4))]), ["--mode", "radiance", "--quadrature", "8", "--orders", "4", "--tau-levels", "0,1"]),
        (MaterialSpec([LayerSpec(0.2, 0.01, rayleigh_coeffs())]), ["--mode", "radiance", "--quadrature", "16", "--tau-levels", "0,0.01"]),
    ]
    for tau0 in (1.0, 10.0, 100.0):
        spec = MaterialSpec([LayerSpec(1.0, tau0, synthetic_coeffs(12))], LambertianBase(1.0))
        runs.append((spec, ["--mode", "brdf", "--quadrature", "24", "--orders", "12", "--incident", "0.2;0.6;1.0"]))
    identical = 0
    for idx, (spec, args) in enumerate(runs):
        mat = _write_material(tmp_path / f"m{idx}.json", spec)
        outputs = []
        for threads in ("1", "max", "4"):
            out = tmp_path / f"o{idx}_{threads}.csv"
            assert cli_main(["--material", str(mat), "--out", str(out), "--threads", threads, *args]) == 0
            outputs.append(out.read_bytes())
        identical += all(o == outputs[0] for o in outputs)
    record(9, identical == len(runs), f"{identical}/{len(runs)} configurations byte-identical for threads 1, max, 4")


# -------------------------------------------------------------------- 10


def test_criterion_10_benchmark_size():
    t0 = time.perf_counter()
    start = len(EIGEN_RESIDUALS)
    worst = _node_consistency(30, 12, seed=10, orders=12)
    residual = max(EIGEN_RESIDUALS[start:])
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-8 and residual <= 1e-9
    record(10, ok, f"N=30, L=12: node deviation {worst:.1e}, eigen residual {residual:.1e}, {elapsed:.1f} s")


# -------------------------------------------------------------------- 8 (after the others)


def test_criterion_08_eigen_residuals():
    if len(EIGEN_RESIDUALS) < 10:
        pytest.skip("needs the other acceptance runs in the same session")
    worst = max(EIGEN_RESIDUALS)
    record(8, worst <= 1e-9, f"max residual {worst:.1e} over {len(EIGEN_RESIDUALS)} solver builds")
