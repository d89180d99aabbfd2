"""Polarization types, directions, double-Gauss quadrature and material specs.

Conventions used throughout the package:

* Stokes vectors are ``[I, Q, U, V]`` referred to the meridian plane of the
  propagation direction (basis ``e_theta, e_phi``).
* ``mu > 0`` is an upward direction, ``mu < 0`` a downward one.  Optical depth
  ``tau`` is measured downward from the top of the stack.
* The incident beam of a :class:`Source` propagates along ``(-mu0, phi0)``;
  ``I0`` is the Stokes flux carried by the beam per unit area normal to it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np

MU_FLOOR = 1e-6
PHASE_NORM_TOL = 1e-6

# Entries that must vanish for randomly oriented particles (2+2 block structure).
_OFF_BLOCK = [(0, 2), (0, 3), (1, 2), (1, 3), (2, 0), (3, 0), (2, 1), (3, 1)]


class ValidationError(ValueError):
    """Raised when a material description or run configuration is invalid."""


class NumericalError(RuntimeError):
    """Raised when a numerical stage fails; carries order/beam context."""

    def __init__(self, message, *, order=None, mu0=None, condition=None):
        self.order = order
        self.mu0 = mu0
        self.condition = condition
        ctx = []
        if order is not None:
            ctx.append(f"m={order}")
        if mu0 is not None:
            ctx.append(f"mu0={mu0:.17g}")
        if condition is not None:
            ctx.append(f"cond~{condition:.3e}")
        super().__init__(message + (f" [{', '.join(ctx)}]" if ctx else ""))


@dataclass(frozen=True)
class StokesVector:
    i: float
    q: float = 0.0
    u: float = 0.0
    v: float = 0.0

    @classmethod
    def from_array(cls, a) -> "StokesVector":
        a = np.asarray(a, dtype=float).reshape(4)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def as_array(self) -> np.ndarray:
        return np.array([self.i, self.q, self.u, self.v], dtype=float)

    def is_physical(self, rtol: float = 1e-9) -> bool:
        """``I >= 0`` and ``I^2 >= Q^2 + U^2 + V^2`` up to ``rtol * I^2``."""
        pol2 = self.q**2 + self.u**2 + self.v**2
        scale = max(self.i**2, pol2)
        return self.i >= -rtol * math.sqrt(scale) and self.i**2 - pol2 >= -rtol * scale


@dataclass(frozen=True, eq=False)
class MuellerMatrix:
    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=float).reshape(4, 4)
        if not np.all(np.isfinite(m)):
            raise ValidationError("Mueller matrix has non-finite entries")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    def __matmul__(self, other):
        if isinstance(other, MuellerMatrix):
            return MuellerMatrix(self.m @ other.m)
        if isinstance(other, StokesVector):
            return StokesVector.from_array(self.m @ other.as_array())
        return self.m @ np.asarray(other)


@dataclass(frozen=True)
class Direction:
    mu: float
    phi: float = 0.0

    def __post_init__(self):
        if not (0.0 < abs(self.mu) <= 1.0):
            raise ValidationError(f"direction cosine must satisfy 0 < |mu| <= 1, got {self.mu!r}")
        object.__setattr__(self, "phi", float(self.phi) % (2.0 * math.pi))

    @classmethod
    def clamped(cls, mu: float, phi: float = 0.0) -> "Direction":
        """Build a direction, pushing grazing ``mu == 0`` requests to ``MU_FLOOR``."""
        return cls(clamp_mu(mu), phi)

    @property
    def upward(self) -> bool:
        return self.mu > 0

    def unit_vector(self) -> np.ndarray:
        s = math.sqrt(max(0.0, 1.0 - self.mu * self.mu))
        return np.array([s * math.cos(self.phi), s * math.sin(self.phi), self.mu])


def clamp_mu(mu: float) -> float:
    """Keep the hemisphere of ``mu`` but never let it reach zero."""
    mu = float(mu)
    if abs(mu) >= MU_FLOOR:
        return mu
    return -MU_FLOOR if math.copysign(1.0, mu) < 0 else MU_FLOOR


@dataclass(frozen=True, eq=False)
class Quadrature:
    """Half-range Gauss rule on (0, 1); mirrored implicitly to (-1, 0)."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        for name in ("nodes", "weights"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def n(self) -> int:
        return len(self.nodes)


def build_double_gauss_quadrature(n: int) -> Quadrature:
    """Gauss-Legendre rule of size ``n`` mapped affinely from (-1, 1) onto (0, 1)."""
    if int(n) != n or n < 1:
        raise ValidationError(f"quadrature size must be a positive integer, got {n!r}")
    x, w = np.polynomial.legendre.leggauss(int(n))
    return Quadrature(nodes=0.5 * (x + 1.0), weights=0.5 * w)


def cos_scattering_angle(d1: Direction, d2: Direction) -> float:
    """Cosine of the angle between two directions."""
    s1 = math.sqrt(max(0.0, 1.0 - d1.mu**2))
    s2 = math.sqrt(max(0.0, 1.0 - d2.mu**2))
    c = d1.mu * d2.mu + s1 * s2 * math.cos(d1.phi - d2.phi)
    return min(1.0, max(-1.0, c))


# ---------------------------------------------------------------- materials


def coefficients_to_matrix(beta, alpha, gamma, delta, epsilon, zeta) -> np.ndarray:
    """Greek expansion coefficients of one order to the 4x4 ``B_l`` layout."""
    return np.array(
        [
            [beta, gamma, 0.0, 0.0],
            [gamma, alpha, 0.0, 0.0],
            [0.0, 0.0, zeta, -epsilon],
            [0.0, 0.0, epsilon, delta],
        ],
        dtype=float,
    )


def matrix_to_coefficients(b: np.ndarray) -> tuple:
    """Inverse of :func:`coefficients_to_matrix`: ``(beta, alpha, gamma, delta, epsilon, zeta)``."""
    return (b[0, 0], b[1, 1], b[0, 1], b[3, 3], b[3, 2], b[2, 2])


@dataclass(frozen=True, eq=False)
class LayerSpec:
    omega: float
    tau: float
    coeffs: np.ndarray  # (L, 4, 4)

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.ndim == 2 and c.shape == (4, 4):
            c = c[None]
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def n_terms(self) -> int:
        return self.coeffs.shape[0]

    @classmethod
    def from_greek(cls, omega: float, tau: float, table) -> "LayerSpec":
        """Build from rows ``(beta, alpha, gamma, delta, epsilon, zeta)`` per order ``l``."""
        table = np.atleast_2d(np.asarray(table, dtype=float))
        return cls(omega, tau, np.array([coefficients_to_matrix(*row) for row in table]))


@dataclass(frozen=True)
class BlackBase:
    kind = "black"


@dataclass(frozen=True)
class LambertianBase:
    albedo: float
    kind = "lambertian"


@dataclass(frozen=True, eq=False)
class MuellerTableBase:
    """Fourier components of a base Mueller BRDF on the solver's nodes.

    ``matrices[m, i, j]`` is ``R^m(mu_i, -mu_j)`` in the same mode convention as
    the layer kernels (an ideal Lambertian surface of albedo ``rho`` has a single
    order with ``R[0,0] = 2 rho``).  Orders beyond the table are zero.
    """

    nodes: np.ndarray
    matrices: np.ndarray  # (orders, n, n, 4, 4)
    kind = "mueller_table"

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)
        mats = np.array(self.matrices, dtype=float)
        if mats.ndim == 4:
            mats = mats[None]
        nodes.setflags(write=False)
        mats.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "matrices", mats)


BaseReflector = Union[BlackBase, LambertianBase, MuellerTableBase]


@dataclass(frozen=True)
class Source:
    mu0: float
    phi0: float = 0.0
    stokes: StokesVector = field(default_factory=lambda: StokesVector(1.0))

    def __post_init__(self):
        if not isinstance(self.stokes, StokesVector):
            object.__setattr__(self, "stokes", StokesVector.from_array(self.stokes))


@dataclass(frozen=True)
class MaterialSpec:
    layers: tuple
    base: BaseReflector = field(default_factory=BlackBase)
    source: Source = field(default_factory=lambda: Source(1.0))

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def n_terms(self) -> int:
        return max(layer.n_terms for layer in self.layers)

    @property
    def total_tau(self) -> float:
        return float(sum(layer.tau for layer in self.layers))

    def with_source(self, mu0=None, phi0=None, stokes=None) -> "MaterialSpec":
        src = self.source
        return replace(
            self,
            source=Source(
                src.mu0 if mu0 is None else mu0,
                src.phi0 if phi0 is None else phi0,
                src.stokes if stokes is None else stokes,
            ),
        )

    def digest(self) -> str:
        """Short content hash used to tag output tables."""
        import hashlib

        h = hashlib.sha256()
        for layer in self.layers:
            h.update(np.float64([layer.omega, layer.tau]).tobytes())
            h.update(np.ascontiguousarray(layer.coeffs, dtype=np.float64).tobytes())
        h.update(self.base.kind.encode())
        if isinstance(self.base, LambertianBase):
            h.update(np.float64(self.base.albedo).tobytes())
        elif isinstance(self.base, MuellerTableBase):
            h.update(self.base.matrices.tobytes())
        return h.hexdigest()[:16]


def validate_material(spec: MaterialSpec) -> MaterialSpec:
    """Check every invariant and return a copy with coefficient lists zero-padded."""
    errors = []
    if not spec.layers:
        raise ValidationError("material has no layers")
    n_terms = max(np.asarray(layer.coeffs).shape[0] for layer in spec.layers)
    padded = []
    for idx, layer in enumerate(spec.layers):
        where = f"layer {idx}"
        if not (0.0 <= layer.omega <= 1.0) or not math.isfinite(layer.omega):
            errors.append(f"{where}: omega={layer.omega!r}: albedo out of range [0, 1]")
        if not (layer.tau > 0.0) or not math.isfinite(layer.tau):
            errors.append(f"{where}: tau={layer.tau!r}: optical thickness must be positive")
        c = np.asarray(layer.coeffs, dtype=float)
        if c.ndim != 3 or c.shape[1:] != (4, 4) or c.shape[0] < 1:
            errors.append(f"{where}: coeffs: expected shape (L, 4, 4), got {c.shape}")
            padded.append(layer)
            continue
        if not np.all(np.isfinite(c)):
            errors.append(f"{where}: coeffs: non-finite entries")
        for l in range(c.shape[0]):
            bad = [ij for ij in _OFF_BLOCK if c[l][ij] != 0.0]
            if bad:
                errors.append(f"{where}: coeffs[{l}]: entries {bad} must be zero (2+2 block structure)")
        if abs(c[0, 0, 0] - 1.0) > PHASE_NORM_TOL:
            errors.append(f"{where}: coeffs[0][0,0]={c[0, 0, 0]!r}: phase normalization requires 1")
        if c.shape[0] < n_terms:
            c = np.concatenate([c, np.zeros((n_terms - c.shape[0], 4, 4))])
        padded.append(LayerSpec(float(layer.omega), float(layer.tau), c))

    base = spec.base
    if isinstance(base, LambertianBase):
        if not (0.0 <= base.albedo <= 1.0):
            errors.append(f"base: albedo={base.albedo!r}: albedo out of range [0, 1]")
    elif isinstance(base, MuellerTableBase):
        n = len(base.nodes)
        if base.matrices.ndim != 5 or base.matrices.shape[1:] != (n, n, 4, 4):
            errors.append(f"base: table shape {base.matrices.shape} does not match {n} nodes")
    elif not isinstance(base, BlackBase):
        errors.append(f"base: unknown reflector {base!r}")

    src = spec.source
    if not (0.0 < src.mu0 <= 1.0):
        errors.append(f"source: mu0={src.mu0!r} must lie in (0, 1]")
    if not np.all(np.isfinite(src.stokes.as_array())):
        errors.append("source: stokes has non-finite entries")

    if errors:
        raise ValidationError("; ".join(errors))
    return MaterialSpec(tuple(padded), base, src)


# ------------------------------------------------------------------ file IO


def read_coefficient_file(path) -> np.ndarray:
    """Parse ``l beta alpha gamma delta epsilon zeta`` lines into ``(L, 4, 4)``."""
    rows = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ValidationError(f"{path}:{lineno}: expected 7 columns, got {len(parts)}")
        l = int(parts[0])
        if l < 0 or l in rows:
            raise ValidationError(f"{path}:{lineno}: bad or repeated order l={l}")
        rows[l] = [float(p) for p in parts[1:]]
    if not rows:
        raise ValidationError(f"{path}: no coefficients")
    out = np.zeros((max(rows) + 1, 4, 4))
    for l, vals in rows.items():
        out[l] = coefficients_to_matrix(*vals)
    return out


def write_coefficient_file(path, coeffs: np.ndarray) -> None:
    lines = ["# l beta alpha gamma delta epsilon zeta"]
    for l, b in enumerate(np.asarray(coeffs)):
        lines.append(f"{l} " + " ".join(f"{v:.17g}" for v in matrix_to_coefficients(b)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_material(path) -> MaterialSpec:
    """Read a JSON material document; relative file references resolve next to it."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: cannot read material: {exc}") from exc
    return material_from_dict(doc, root=path.parent)


def material_from_dict(doc: dict, root: Union[str, Path] = ".") -> MaterialSpec:
    root = Path(root)
    layers = []
    for idx, ld in enumerate(doc.get("layers", [])):
        try:
            if "coeff_file" in ld:
                coeffs = read_coefficient_file(root / ld["coeff_file"])
            else:
                coeffs = np.array([coefficients_to_matrix(*row) for row in ld["coeffs"]])
            layers.append(LayerSpec(float(ld["omega"]), float(ld["tau"]), coeffs))
        except KeyError as exc:
            raise ValidationError(f"layer {idx}: missing field {exc}") from exc

    bd = doc.get("base", {"type": "black"})
    kind = bd.get("type", "black")
    if kind == "black":
        base = BlackBase()
    elif kind == "lambertian":
        base = LambertianBase(float(bd["albedo"]))
    elif kind == "mueller_table":
        with np.load(root / bd["table_file"]) as data:
            base = MuellerTableBase(data["nodes"], data["matrices"])
    else:
        raise ValidationError(f"base: unknown type {kind!r}")

    sd = doc.get("source", {})
    source = Source(
        float(sd.get("mu0", 1.0)),
        float(sd.get("phi0", 0.0)),
        StokesVector.from_array(sd.get("stokes", [1.0, 0.0, 0.0, 0.0])),
    )
    return validate_material(MaterialSpec(tuple(layers), base, source))


def material_to_dict(spec: MaterialSpec) -> dict:
    """Inline (file-free) JSON form of a material; lossless for Black/Lambertian bases."""
    doc = {
        "layers": [
            {
                "omega": layer.omega,
                "tau": layer.tau,
                "coeffs": [list(map(float, matrix_to_coefficients(b))) for b in layer.coeffs],
            }
            for layer in spec.layers
        ],
        "source": {
            "mu0": spec.source.mu0,
            "phi0": spec.source.phi0,
            "stokes": spec.source.stokes.as_array().tolist(),
        },
    }
    if isinstance(spec.base, LambertianBase):
        doc["base"] = {"type": "lambertian", "albedo": spec.base.albedo}
    elif isinstance(spec.base, BlackBase):
        doc["base"] = {"type": "black"}
    else:
        raise ValidationError("mueller_table bases need a table_file; inline form unsupported")
    return doc


# ------------------------------------------------------------ standard media


def isotropic_coeffs() -> np.ndarray:
    return np.array([coefficients_to_matrix(1.0, 0.0, 0.0, 0.0, 0.0, 0.0)])


def rayleigh_coeffs() -> np.ndarray:
    """Greek coefficients of pure (non-depolarizing) Rayleigh scattering."""
    rows = [
        (1.0, 0.0, 0.0, 0.0, 0.0, 0.0),
        (0.0, 0.0, 0.0, 1.5, 0.0, 0.0),
        (0.5, 3.0, math.sqrt(6.0) / 2.0, 0.0, 0.0, 0.0),
    ]
    return np.array([coefficients_to_matrix(*r) for r in rows])


def as_stokes(x: Union[StokesVector, Sequence[float]]) -> np.ndarray:
    if isinstance(x, StokesVector):
        return x.as_array()
    return np.asarray(x, dtype=float).reshape(4)
