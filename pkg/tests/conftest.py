import math

import numpy as np
import pytest

from vrtdom import BlackBase, LambertianBase, LayerSpec, MaterialSpec, Source, StokesVector
from vrtdom.core import coefficients_to_matrix, isotropic_coeffs, rayleigh_coeffs

# criterion number -> (passed, detail); filled by the acceptance module
ACCEPTANCE_RESULTS: dict = {}


def synthetic_coeffs(n_terms: int, g: float = 0.6, mix: float = 0.3) -> np.ndarray:
    """Rayleigh / forward-peaked mixture with all six Greek coefficients populated."""
    ray = np.zeros((n_terms, 4, 4))
    r = rayleigh_coeffs()
    ray[: min(3, n_terms)] = r[: min(3, n_terms)]
    rows = []
    for l in range(n_terms):
        hg = (2 * l + 1) * g**l
        pol = hg if l >= 2 else 0.0
        rows.append((hg, 0.8 * pol, -0.1 * pol, 0.7 * hg, 0.05 * pol, 0.75 * pol))
    hg = np.array([coefficients_to_matrix(*row) for row in rows])
    out = mix * ray + (1.0 - mix) * hg
    out[0, 0, 0] = 1.0
    return out


def slab(omega, tau, coeffs=None, base=None, mu0=0.6, phi0=0.0, stokes=(1.0, 0.0, 0.0, 0.0)) -> MaterialSpec:
    coeffs = rayleigh_coeffs() if coeffs is None else coeffs
    return MaterialSpec(
        [LayerSpec(omega, tau, coeffs)],
        BlackBase() if base is None else base,
        Source(mu0, phi0, StokesVector(*stokes)),
    )


def random_material(rng: np.random.Generator, n_terms: int = 5) -> MaterialSpec:
    n_layers = int(rng.integers(1, 4))
    layers = [
        LayerSpec(
            float(rng.uniform(0.2, 1.0)),
            float(rng.uniform(0.1, 3.0)),
            synthetic_coeffs(n_terms, g=float(rng.uniform(0.0, 0.8)), mix=float(rng.uniform(0.1, 0.9))),
        )
        for _ in range(n_layers)
    ]
    base = BlackBase() if rng.random() < 0.5 else LambertianBase(float(rng.uniform(0.0, 1.0)))
    src = Source(float(rng.uniform(0.2, 1.0)), float(rng.uniform(0.0, 2 * math.pi)), StokesVector(1.0, 0.3, -0.2, 0.1))
    return MaterialSpec(layers, base, src)


@pytest.fixture
def rayleigh():
    return rayleigh_coeffs()


@pytest.fixture
def isotropic():
    return isotropic_coeffs()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"criterion {key:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
