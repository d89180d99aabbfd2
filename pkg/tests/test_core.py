import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vrtdom import (
    Direction,
    LambertianBase,
    LayerSpec,
    MaterialSpec,
    MuellerTableBase,
    StokesVector,
    ValidationError,
    build_double_gauss_quadrature,
    validate_material,
)
from vrtdom.core import (
    MU_FLOOR,
    clamp_mu,
    coefficients_to_matrix,
    cos_scattering_angle,
    load_material,
    material_from_dict,
    material_to_dict,
    matrix_to_coefficients,
    read_coefficient_file,
    rayleigh_coeffs,
    write_coefficient_file,
)

from conftest import slab, synthetic_coeffs


class TestQuadrature:
    def test_two_point_rule_uses_legendre_p2_roots(self):
        # P2 roots are +-1/sqrt(3); mapped onto (0, 1) with weights 1/2
        q = build_double_gauss_quadrature(2)
        r = 1.0 / math.sqrt(3.0)
        np.testing.assert_allclose(q.nodes, [(1 - r) / 2, (1 + r) / 2], rtol=0, atol=1e-15)
        np.testing.assert_allclose(q.weights, [0.5, 0.5], rtol=0, atol=1e-15)

    @given(st.integers(1, 48))
    def test_exact_for_polynomials(self, n):
        q = build_double_gauss_quadrature(n)
        assert np.all((q.nodes > 0) & (q.nodes < 1))
        assert np.all(np.diff(q.nodes) > 0)
        for k in range(2 * n):
            assert abs(np.sum(q.weights * q.nodes**k) - 1.0 / (k + 1)) < 1e-13

    @pytest.mark.parametrize("n", [0, -3, 2.5])
    def test_rejects_bad_size(self, n):
        with pytest.raises(ValidationError):
            build_double_gauss_quadrature(n)

    def test_arrays_are_read_only(self):
        q = build_double_gauss_quadrature(4)
        with pytest.raises(ValueError):
            q.nodes[0] = 0.0


class TestDirections:
    def test_grazing_is_clamped(self):
        assert clamp_mu(0.0) == MU_FLOOR
        assert clamp_mu(-0.0) == -MU_FLOOR
        assert clamp_mu(0.3) == 0.3
        assert Direction.clamped(0.0).mu == MU_FLOOR

    @pytest.mark.parametrize("mu", [0.0, 1.5, -1.01])
    def test_invalid_direction(self, mu):
        with pytest.raises(ValidationError):
            Direction(mu)

    @given(
        st.floats(-1, 1).filter(lambda x: abs(x) > 1e-3),
        st.floats(0, 2 * math.pi),
        st.floats(-1, 1).filter(lambda x: abs(x) > 1e-3),
        st.floats(0, 2 * math.pi),
    )
    def test_scattering_angle_matches_dot_product(self, m1, p1, m2, p2):
        d1, d2 = Direction(m1, p1), Direction(m2, p2)
        assert abs(cos_scattering_angle(d1, d2) - d1.unit_vector() @ d2.unit_vector()) < 1e-12


class TestStokes:
    def test_physical(self):
        assert StokesVector(1, 0.6, 0.8, 0).is_physical()
        assert not StokesVector(1, 0.9, 0.9, 0).is_physical()
        assert not StokesVector(-1).is_physical()


class TestValidation:
    def test_padding_to_common_length(self):
        spec = MaterialSpec([LayerSpec(0.5, 1.0, rayleigh_coeffs()), LayerSpec(0.5, 1.0, synthetic_coeffs(6))])
        out = validate_material(spec)
        assert [layer.n_terms for layer in out.layers] == [6, 6]
        assert not out.layers[0].coeffs[3:].any()

    @pytest.mark.parametrize(
        "spec, field",
        [
            (slab(1.2, 1.0), "omega"),
            (slab(0.5, 0.0), "tau"),
            (slab(0.5, 1.0, base=LambertianBase(1.5)), "albedo"),
            (slab(0.5, 1.0, mu0=0.0), "mu0"),
            (slab(0.5, 1.0, coeffs=2 * rayleigh_coeffs()), "normalization"),
        ],
    )
    def test_field_named_in_error(self, spec, field):
        with pytest.raises(ValidationError, match=field):
            validate_material(spec)

    def test_block_structure_enforced(self):
        c = rayleigh_coeffs().copy()
        c[1, 0, 2] = 0.1
        with pytest.raises(ValidationError, match="2\\+2"):
            validate_material(slab(0.5, 1.0, coeffs=c))

    def test_table_shape_checked(self):
        base = MuellerTableBase(np.array([0.2, 0.8]), np.zeros((1, 3, 2, 4, 4)))
        with pytest.raises(ValidationError, match="table"):
            validate_material(slab(0.5, 1.0, base=base))

    def test_no_layers(self):
        with pytest.raises(ValidationError):
            validate_material(MaterialSpec([]))


class TestSerialization:
    def test_greek_roundtrip(self):
        vals = (1.0, 0.2, -0.3, 0.4, 0.05, 0.6)
        assert matrix_to_coefficients(coefficients_to_matrix(*vals)) == vals

    def test_coefficient_file_roundtrip(self, tmp_path):
        c = synthetic_coeffs(7)
        write_coefficient_file(tmp_path / "c.txt", c)
        np.testing.assert_array_equal(read_coefficient_file(tmp_path / "c.txt"), c)

    def test_coefficient_file_errors(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("0 1 0 0 0 0\n")
        with pytest.raises(ValidationError, match="7 columns"):
            read_coefficient_file(p)

    def test_material_json_roundtrip(self, tmp_path):
        spec = slab(0.8, 2.0, synthetic_coeffs(5), LambertianBase(0.3), mu0=0.4, phi0=1.0, stokes=(1, 0.1, 0.2, 0.3))
        p = tmp_path / "m.json"
        p.write_text(json.dumps(material_to_dict(spec)))
        back = load_material(p)
        assert back.digest() == validate_material(spec).digest()
        assert back.source == spec.source

    def test_material_with_coefficient_file(self, tmp_path):
        write_coefficient_file(tmp_path / "ray.txt", rayleigh_coeffs())
        doc = {"layers": [{"omega": 0.9, "tau": 1.0, "coeff_file": "ray.txt"}], "base": {"type": "black"}}
        spec = material_from_dict(doc, tmp_path)
        np.testing.assert_allclose(spec.layers[0].coeffs, rayleigh_coeffs(), atol=1e-15)

    def test_unknown_base(self):
        with pytest.raises(ValidationError, match="base"):
            material_from_dict({"layers": [{"omega": 0.5, "tau": 1, "coeffs": [[1, 0, 0, 0, 0, 0]]}], "base": {"type": "mirror"}})

    def test_unreadable_material(self, tmp_path):
        with pytest.raises(ValidationError):
            load_material(tmp_path / "missing.json")

    def test_digest_depends_on_base(self):
        a = slab(0.5, 1.0, base=LambertianBase(0.2)).digest()
        b = slab(0.5, 1.0, base=LambertianBase(0.3)).digest()
        assert a != b and len(a) == 16


def test_single_node_rule():
    q = build_double_gauss_quadrature(1)
    np.testing.assert_allclose(q.nodes, [0.5])
    np.testing.assert_allclose(q.weights, [1.0])


@pytest.mark.parametrize(
    "d1, d2, expected",
    [
        ((1.0, 0.0), (1.0, 0.0), 1.0),
        ((MU_FLOOR, 0.0), (MU_FLOOR, math.pi / 2), 0.0),
        ((0.6, 0.0), (-0.6, 0.0), 0.28),
    ],
)
def test_scattering_angle_fixtures(d1, d2, expected):
    assert cos_scattering_angle(Direction(*d1), Direction(*d2)) == pytest.approx(expected, abs=1e-11)


def test_albedo_above_one_is_named():
    with pytest.raises(ValidationError, match="albedo out of range"):
        validate_material(slab(1.2, 1.0))
