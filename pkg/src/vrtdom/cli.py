"""Command-line entry point.

Modes
-----
``radiance``
    Stokes field on a zenith x azimuth grid at the requested depths.
``brdf``
    Mueller BRDF table for a list of incidence cosines.
``mc-validate``
    Monte Carlo tallies next to bin-averaged discrete-ordinate values.

Exit status is 0 on success, 2 for invalid input and 3 for a numerical failure.
A timing report ``<out stem>.timing.csv`` is written next to the result unless
the run was rejected during validation.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .boundary import dump_boundary_csv
from .core import BlackBase, MaterialSpec, NumericalError, ValidationError, load_material
from .reconstruction import default_azimuth_grid, default_zenith_grid
from .solver import StepTimer, VrteSolver, report_timings

log = logging.getLogger("vrtdom")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3
MODES = ("radiance", "brdf", "mc-validate")
MC_MIN_HITS = 20


@dataclass
class RunConfig:
    mode: str
    material: Path
    quadrature: int = 40
    orders: Optional[int] = None
    incident: list = field(default_factory=list)  # [(mu0, phi0)], empty -> material source
    tau_levels: list = field(default_factory=lambda: [0.0])
    out_zenith: int = 11
    out_azimuth: int = 19
    threads: int = 1
    seed: int = 0
    photons: int = 1_000_000
    compare_serial: bool = False
    dump_eigen: bool = False
    dump_boundary: bool = False
    out: Path = Path("vrte_out.csv")

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ValidationError(f"unknown mode {self.mode!r}")
        if self.quadrature < 1:
            raise ValidationError("--quadrature must be at least 1")
        if self.orders is not None and self.orders < 1:
            raise ValidationError("--orders must be at least 1")
        if self.threads < 1:
            raise ValidationError("--threads must be at least 1")
        if self.out_zenith < 2 or self.out_azimuth < 1:
            raise ValidationError("output grid needs at least 2 zenith and 1 azimuth angles")
        if self.photons < 1:
            raise ValidationError("--photons must be at least 1")
        for mu0, _ in self.incident:
            if not 0.0 < mu0 <= 1.0:
                raise ValidationError(f"incidence cosine {mu0} outside (0, 1]")
        if any(t < 0 for t in self.tau_levels):
            raise ValidationError("--tau-levels must be non-negative")
        return self

    def sidecar(self, tag: str) -> Path:
        return self.out.with_name(f"{self.out.stem}.{tag}.csv")


def parse_incident(text: str) -> list:
    out = []
    for item in text.split(";"):
        item = item.strip()
        if not item:
            continue
        parts = [p.strip() for p in item.split(",")]
        if len(parts) not in (1, 2):
            raise ValidationError(f"bad incident direction {item!r}; expected 'mu0,phi0'")
        try:
            mu0 = float(parts[0])
            phi0 = float(parts[1]) if len(parts) == 2 else 0.0
        except ValueError as exc:
            raise ValidationError(f"bad incident direction {item!r}") from exc
        out.append((mu0, phi0))
    return out


def parse_floats(text: str) -> list:
    try:
        return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError as exc:
        raise ValidationError(f"bad number list {text!r}") from exc


def resolve_threads(arg: Optional[str]) -> int:
    raw = arg if arg is not None else os.environ.get("VRTE_THREADS", "1")
    if str(raw).strip().lower() == "max":
        return os.cpu_count() or 1
    try:
        return int(raw)
    except ValueError as exc:
        raise ValidationError(f"bad thread count {raw!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vrtdom", description="Polarized discrete-ordinate radiative transfer")
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--material", required=True, help="JSON material description")
    p.add_argument("--quadrature", type=int, default=40, help="nodes per hemisphere (default 40)")
    p.add_argument("--orders", type=int, default=None, help="Fourier order cap")
    p.add_argument("--incident", default=None, help="'mu0,phi0[;mu0,phi0...]' (default: material source)")
    p.add_argument("--tau-levels", default="0", help="comma-separated output depths")
    p.add_argument("--out-zenith", type=int, default=11)
    p.add_argument("--out-azimuth", type=int, default=19)
    p.add_argument("--threads", default=None, help="worker count or 'max' (env VRTE_THREADS)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--photons", type=int, default=1_000_000)
    p.add_argument("--compare-serial", action="store_true", help="also time a one-thread run")
    p.add_argument("--dump-eigen", action="store_true")
    p.add_argument("--dump-boundary", action="store_true")
    p.add_argument("--out", default="vrte_out.csv", help="result file (.bin for binary BRDF)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    return RunConfig(
        mode=ns.mode,
        material=Path(ns.material),
        quadrature=ns.quadrature,
        orders=ns.orders,
        incident=parse_incident(ns.incident) if ns.incident else [],
        tau_levels=parse_floats(ns.tau_levels),
        out_zenith=ns.out_zenith,
        out_azimuth=ns.out_azimuth,
        threads=resolve_threads(ns.threads),
        seed=ns.seed,
        photons=ns.photons,
        compare_serial=ns.compare_serial,
        dump_eigen=ns.dump_eigen,
        dump_boundary=ns.dump_boundary,
        out=Path(ns.out),
    ).validate()


# ------------------------------------------------------------------ modes


def _incidents(cfg: RunConfig, spec: MaterialSpec) -> list:
    return cfg.incident or [(spec.source.mu0, spec.source.phi0)]


def _numbered(path: Path, idx: int, count: int) -> Path:
    return path if count == 1 else path.with_name(f"{path.stem}_{idx}{path.suffix}")


def _run_radiance(cfg: RunConfig, spec: MaterialSpec, solver: VrteSolver) -> tuple[dict, list]:
    up = default_zenith_grid(cfg.out_zenith)
    mu = np.concatenate([up, -up])
    phi = default_azimuth_grid(cfg.out_azimuth)
    if any(t > spec.total_tau + 1e-12 for t in cfg.tau_levels):
        raise ValidationError(f"--tau-levels exceed the slab depth {spec.total_tau}")
    incs = _incidents(cfg, spec)
    files, rows = {}, []
    for idx, (mu0, phi0) in enumerate(incs):
        beam = solver.solve_beam(mu0, phi0, spec.source.stokes)
        rows.extend(beam.boundary_rows)
        field = solver.radiance(beam, cfg.tau_levels, mu, phi)
        with solver.timer.step("reconstruction"):
            files[_numbered(cfg.out, idx, len(incs))] = field.to_csv()
    return files, rows


def _run_brdf(cfg: RunConfig, spec: MaterialSpec, solver: VrteSolver) -> tuple[dict, list]:
    from .brdf import compute_brdf, default_dphi_grid

    mu_in = [mu0 for mu0, _ in _incidents(cfg, spec)]
    table = compute_brdf(solver, mu_in, dphi=default_dphi_grid(cfg.out_azimuth), threads=cfg.threads)
    with solver.timer.step("reconstruction"):
        payload = table.to_bytes() if cfg.out.suffix == ".bin" else table.to_csv()
    return {cfg.out: payload}, []


def _run_mc(cfg: RunConfig, spec: MaterialSpec, solver: VrteSolver) -> tuple[dict, list]:
    # importing numba is part of the Monte Carlo cost
    with solver.timer.step("monte_carlo"):
        from .mc_oracle import bin_averaged_dom, compare_with_dom, mc_trace

    incs = _incidents(cfg, spec)
    files, rows = {}, []
    for idx, (mu0, phi0) in enumerate(incs):
        beam_spec = spec.with_source(mu0=mu0, phi0=phi0)
        with solver.timer.step("monte_carlo"):
            grid = mc_trace(beam_spec, cfg.photons, cfg.seed, threads=cfg.threads)
        beam = solver.solve_beam(mu0, phi0, spec.source.stokes)
        rows.extend(beam.boundary_rows)
        with solver.timer.step("reconstruction"):
            dom = bin_averaged_dom(solver, beam, grid)
        # an opaque floor tallies nothing below the slab
        hemis = (0, 1) if isinstance(spec.base, BlackBase) else (0,)
        with solver.timer.step("monte_carlo"):
            agree = compare_with_dom(dom, grid, hemispheres=hemis, min_hits=MC_MIN_HITS)
            files[_numbered(cfg.out, idx, len(incs))] = _mc_csv(grid, dom)
        print(
            f"mu0={mu0:g} phi0={phi0:g}: {agree.n_within}/{agree.n_bins} entries within 3 sigma "
            f"({100 * agree.fraction:.2f}%), {agree.n_excluded} sparse bins skipped"
        )
    return files, rows


def _mc_csv(grid, dom: np.ndarray) -> str:
    mc_lines = grid.to_csv().splitlines()
    out = [mc_lines[0] + ",hits,dI,dQ,dU,dV"]
    k = 1
    for h in range(2):
        for a in range(grid.nmu):
            for b in range(grid.nphi):
                vals = ",".join(f"{v:.17g}" for v in dom[h, a, b])
                hits = int(grid.hits[h, a, b]) if grid.hits is not None else -1
                out.append(f"{mc_lines[k]},{hits},{vals}")
                k += 1
    return "\n".join(out) + "\n"


RUNNERS = {"radiance": _run_radiance, "brdf": _run_brdf, "mc-validate": _run_mc}


def execute(cfg: RunConfig, spec: MaterialSpec, threads: int) -> tuple[dict, list, VrteSolver, StepTimer]:
    solver = VrteSolver(spec, cfg.quadrature, cfg.orders, threads)
    files, rows = RUNNERS[cfg.mode](cfg, spec, solver)
    return files, rows, solver, solver.finish()


def run(cfg: RunConfig) -> int:
    """Run one configuration; returns the process exit status."""
    try:
        spec = load_material(cfg.material)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        serial = None
        if cfg.compare_serial:
            *_, serial = execute(cfg, spec, 1)
        files, rows, solver, timer = execute(cfg, spec, cfg.threads)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL

    cfg.out.parent.mkdir(parents=True, exist_ok=True)
    for path, payload in files.items():
        if isinstance(payload, bytes):
            path.write_bytes(payload)
        else:
            path.write_text(payload)
    if cfg.dump_eigen:
        cfg.sidecar("eigen").write_text(solver.eigen_csv())
    if cfg.dump_boundary:
        cfg.sidecar("boundary").write_text(dump_boundary_csv(rows))
    csv, human = report_timings(timer, serial)
    cfg.sidecar("timing").write_text(csv)
    sys.stdout.write(human)
    worst = solver.max_eigen_residual()
    if worst > 1e-9:
        log.warning("largest eigen residual %.3e", worst)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(ns)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
