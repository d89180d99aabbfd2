"""Orchestration: per-order homogeneous state once, then particular, boundary and
reconstruction work per incident beam.

Work items run on a thread pool but results are always merged by key order, so
output does not depend on the number of workers.
"""

from __future__ import annotations

import io
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .boundary import (
    BaseReflection,
    BoundaryFactorization,
    build_base_reflection,
    build_propagators,
    boundary_rhs,
    factor_boundary,
    solve_boundary,
)
from .core import MaterialSpec, NumericalError, Quadrature, as_stokes, build_double_gauss_quadrature, validate_material
from .homogeneous import build_reduced_operators, dump_eigen_csv, solve_homogeneous
from .particular import DITHER, build_beam_source, is_resonant, solve_particular, particular_residual
from .phase import D1, D2, assemble_azimuth_kernel
from .reconstruction import (
    FourierBlockSolution,
    RadianceField,
    azimuthal_assemble,
    nodal_field,
    radiance_mode,
)

log = logging.getLogger(__name__)

STEPS = ("homogeneous", "particular", "boundary", "reconstruction")


class StepTimer:
    """Accumulates wall time per named step."""

    def __init__(self):
        self.seconds = {name: 0.0 for name in STEPS}
        self.total = 0.0
        self._start = time.perf_counter()

    @contextmanager
    def step(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] = self.seconds.get(name, 0.0) + time.perf_counter() - t0

    def stop(self) -> None:
        self.total = time.perf_counter() - self._start


def report_timings(timer: StepTimer, serial: Optional[StepTimer] = None) -> tuple[str, str]:
    """Timing table as ``(csv, human)``; speedups only when a serial run is supplied."""
    total = timer.total or sum(timer.seconds.values())
    csv = io.StringIO()
    csv.write("step,seconds,fraction" + (",speedup" if serial else "") + "\n")
    lines = [f"{'step':<16}{'seconds':>12}{'fraction':>10}" + (f"{'speedup':>10}" if serial else "")]
    for name in list(timer.seconds) + ["total"]:
        sec = total if name == "total" else timer.seconds[name]
        frac = sec / total if total > 0 else 0.0
        row = f"{name},{sec:.6f},{frac:.4f}"
        line = f"{name:<16}{sec:>12.4f}{frac:>10.3f}"
        if serial:
            ref = serial.total if name == "total" else serial.seconds.get(name, 0.0)
            sp = ref / sec if sec > 0 else float("nan")
            row += f",{sp:.3f}"
            line += f"{sp:>10.2f}"
        csv.write(row + "\n")
        lines.append(line)
    return csv.getvalue(), "\n".join(lines) + "\n"


@dataclass(frozen=True, eq=False)
class OrderState:
    """Incident-independent data of one Fourier order."""

    m: int
    ops: tuple
    modes: tuple
    refl: BaseReflection
    fact: BoundaryFactorization


@dataclass(eq=False)
class BeamSolution:
    """Solved Fourier blocks of one incident beam."""

    mu0: float
    phi0: float
    stokes: np.ndarray
    blocks: dict  # (m, k) -> FourierBlockSolution
    boundary_rows: list = field(default_factory=list)

    def mode_radiance(self, tau: float, mu) -> dict:
        return {key: radiance_mode(sol, tau, mu) for key, sol in sorted(self.blocks.items())}

    def nodal_modes(self, tau: float) -> dict:
        """``(m, k) -> (up, down)`` nodal streams."""
        return {key: nodal_field(sol, tau) for key, sol in sorted(self.blocks.items())}


def _map(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


class VrteSolver:
    """Discrete-ordinate solver bound to one material, quadrature and order count.

    Parameters
    ----------
    spec : MaterialSpec
        Layer stack and base; the source entry is only a default beam.
    n_nodes : int or Quadrature
        Half-range quadrature size (or a ready quadrature).
    n_orders : int, optional
        Number of Fourier orders; defaults to the coefficient count.
    threads : int
        Worker count for order- and mode-level parallelism.
    """

    def __init__(self, spec: MaterialSpec, n_nodes=16, n_orders: Optional[int] = None, threads: int = 1):
        self.spec = validate_material(spec)
        self.quad = n_nodes if isinstance(n_nodes, Quadrature) else build_double_gauss_quadrature(int(n_nodes))
        self.n_orders = self.spec.n_terms if n_orders is None else int(n_orders)
        if self.n_orders < 1:
            raise ValueError("at least one Fourier order is required")
        self.threads = max(1, int(threads))
        self.timer = StepTimer()
        self.taus = np.array([layer.tau for layer in self.spec.layers])
        self.tops = np.concatenate([[0.0], np.cumsum(self.taus)[:-1]])
        self.orders: list[OrderState] = []
        self.homogeneous_calls = 0
        self._prepare()

    # -------------------------------------------------------------- homogeneous

    def _prepare_order(self, m: int) -> OrderState:
        ops, modes, props = [], [], []
        for layer in self.spec.layers:
            kernel = assemble_azimuth_kernel(m, layer, self.quad)
            op = build_reduced_operators(m, layer, self.quad, kernel)
            md = solve_homogeneous(op)
            ops.append(op)
            modes.append(md)
            props.append(build_propagators(md, layer.tau))
        refl = build_base_reflection(self.spec.base, m, self.quad)
        fact = factor_boundary(m, props, refl)
        return OrderState(m, tuple(ops), tuple(modes), refl, fact)

    def _prepare(self) -> None:
        with self.timer.step("homogeneous"):
            self.orders = _map(self._prepare_order, list(range(self.n_orders)), self.threads)
        self.homogeneous_calls += 1

    def eigen_csv(self) -> str:
        parts = []
        for state in self.orders:
            for idx, md in enumerate(state.modes):
                text = dump_eigen_csv(md)
                lines = text.splitlines()
                body = [f"{idx},{line}" for line in lines[1:]]
                if not parts:
                    parts.append("layer," + lines[0])
                parts.extend(body)
        return "\n".join(parts) + "\n"

    def max_eigen_residual(self) -> float:
        return float(max(md.residuals.max() for st in self.orders for md in st.modes))

    # -------------------------------------------------------------- per beam

    def _global_mu0(self, mu0: float) -> float:
        """Shift ``mu0`` off every eigenvalue of every order and layer."""
        lams = [md.lam for st in self.orders for md in st.modes]
        if not any(is_resonant(mu0, lam) for lam in lams):
            return mu0
        new = mu0 + DITHER if mu0 + DITHER <= 1.0 else mu0 - DITHER
        log.warning("mu0=%.17g resonant with an eigenmode; dithering to %.17g", mu0, new)
        if any(is_resonant(new, lam) for lam in lams):
            raise NumericalError("beam still resonant after dithering", mu0=new)
        return new

    def solve_beam(self, mu0: float, phi0: float = 0.0, stokes=(1.0, 0.0, 0.0, 0.0)) -> BeamSolution:
        """Particular and boundary stages for one beam (homogeneous state is reused)."""
        if not 0.0 < mu0 <= 1.0:
            raise ValueError(f"mu0 must lie in (0, 1], got {mu0}")
        stokes = as_stokes(stokes)
        with self.timer.step("particular"):
            mu0_eff = self._global_mu0(float(mu0))
        keys = [(m, k) for m in range(self.n_orders) for k in (1, 2) if ((D1 if k == 1 else D2) @ stokes).any()]
        if not keys:
            keys = [(0, 1)]

        def particular(key):
            m, k = key
            st = self.orders[m]
            out = []
            for idx, layer in enumerate(self.spec.layers):
                src = build_beam_source(m, k, layer, self.quad, mu0_eff, stokes)
                part = solve_particular(st.ops[idx], src)
                out.append((part, particular_residual(st.ops[idx], src, part)))
            return out

        with self.timer.step("particular"):
            parts = _map(particular, keys, self.threads)

        def boundary(item):
            (m, k), layer_parts = item
            st = self.orders[m]
            refl = build_base_reflection(self.spec.base, m, self.quad, mu0_eff)
            beam_stokes = (D1 if k == 1 else D2) @ stokes
            rhs = boundary_rhs([p for p, _ in layer_parts], self.tops, self.taus, refl, beam_stokes)
            sys = solve_boundary(st.fact, rhs)
            coefs = tuple(sys.layer_coefficients(i) for i in range(len(self.spec.layers)))
            sol = FourierBlockSolution(
                m,
                k,
                self.quad,
                self.spec.layers,
                self.taus,
                self.tops,
                st.modes,
                coefs,
                tuple(p for p, _ in layer_parts),
                beam_stokes,
                self.spec.base,
                {"particular": max(r for _, r in layer_parts), "boundary": sys.residual},
            )
            return sol, (m, k, mu0_eff, sys.condition, sys.residual)

        with self.timer.step("boundary"):
            solved = _map(boundary, list(zip(keys, parts)), self.threads)
        blocks = {key: sol for key, (sol, _) in zip(keys, solved)}
        return BeamSolution(float(mu0), float(phi0), stokes, blocks, [row for _, row in solved])

    # -------------------------------------------------------------- outputs

    def radiance(
        self,
        beam: BeamSolution,
        tau_levels: Iterable[float] = (0.0,),
        mu: Optional[Sequence[float]] = None,
        phi: Optional[Sequence[float]] = None,
    ) -> RadianceField:
        """Full Stokes field on a grid; ``mu`` are signed cosines."""
        from .reconstruction import default_azimuth_grid, default_zenith_grid

        if mu is None:
            up = default_zenith_grid()
            mu = np.concatenate([up, -up])
        if phi is None:
            phi = default_azimuth_grid()
        mu = np.asarray(mu, dtype=float)
        phi = np.asarray(phi, dtype=float)
        taus = np.atleast_1d(np.asarray(list(tau_levels), dtype=float))
        keys = sorted(beam.blocks)

        def work(item):
            tau, key = item
            return radiance_mode(beam.blocks[key], tau, mu)

        items = [(t, key) for t in taus for key in keys]
        with self.timer.step("reconstruction"):
            values = _map(work, items, self.threads)
            out = np.zeros((len(taus), len(mu), len(phi), 4))
            for a, tau in enumerate(taus):
                modes = {key: values[a * len(keys) + b] for b, key in enumerate(keys)}
                out[a] = azimuthal_assemble(modes, phi, beam.phi0).transpose(1, 0, 2)
        return RadianceField(taus, mu, phi, out, self.n_orders, self.quad.n)

    def nodal_radiance(self, beam: BeamSolution, tau: float, phi) -> tuple[np.ndarray, np.ndarray]:
        """Assembled Stokes vectors at the nodes: ``(up, down)`` each ``(P, N, 4)``."""
        nod = beam.nodal_modes(tau)
        up = azimuthal_assemble({k: v[0] for k, v in nod.items()}, phi, beam.phi0)
        down = azimuthal_assemble({k: v[1] for k, v in nod.items()}, phi, beam.phi0)
        return up, down

    def finish(self) -> StepTimer:
        self.timer.stop()
        return self.timer


def solve_vrte(spec: MaterialSpec, quad=16, n_orders: Optional[int] = None, threads: int = 1) -> VrteSolver:
    """Build the solver (homogeneous stage runs here, once per order)."""
    return VrteSolver(spec, quad, n_orders, threads)
