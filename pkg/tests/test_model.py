import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sdgame.model import (
    Coefficient, ConfigError, FieldLabel, decoupled_driver, load_spec,
    m_parity, n_map, regime_at, spec_from_dict, validate_spec,
)
from conftest import make_spec


def test_m_parity_values():
    assert m_parity(1) == 1
    assert m_parity(2) == 2
    assert m_parity(3) == 1
    assert m_parity(0) == 2
    assert m_parity(101) == 1
    with pytest.raises(ValueError):
        m_parity(-1)


def test_regime_at_values():
    assert regime_at(1, 0) == 1
    assert regime_at(1, 2) == 1
    assert regime_at(2, 1) == 1
    assert regime_at(2, 0) == 2


@given(st.integers(1, 2), st.integers(0, 500))
def test_regime_parity_reduction(i, k):
    assert regime_at(i, k) == regime_at(i, k % 2)


@given(st.integers(1, 2), st.integers(0, 100), st.integers(0, 100))
def test_regime_flow(i, a, b):
    assert regime_at(regime_at(i, a), b) == regime_at(i, a + b)


def test_n_map_values():
    assert n_map(1, 1) == FieldLabel(1, False)
    assert n_map(1, 2) == FieldLabel(2, True)
    assert n_map(2, 2) == FieldLabel(2, False)
    assert n_map(2, 1) == FieldLabel(1, True)
    assert str(n_map(1, 2)) == "2'"


@given(st.integers(1, 2), st.integers(1, 2))
def test_n_map_plain_iff_match(j, l):
    assert n_map(j, l).primed == (l != j)


def test_decoupled_driver_zero():
    spec = make_spec()
    f1 = decoupled_driver(spec, 1)
    assert f1(0.0, 0.3, 1.0, 2.0, 0.5, 0.0, 0.0) == 0.0


def test_decoupled_driver_substitution():
    spec = make_spec(f1={"expr": "y2"}, f2={"expr": "y1 - y2"})
    f1 = decoupled_driver(spec, 1)
    f2 = decoupled_driver(spec, 2)
    y, h = 0.7, -0.2
    assert f1(0.0, 0.0, y, h, 0.0, 0.0, 0.0) == pytest.approx(y + h, abs=1e-15)
    assert f2(0.0, 0.0, y, h, 0.0, 0.0, 0.0) == pytest.approx(h, abs=1e-15)


def test_validate_intensity_condition():
    bad = make_spec(lam=1.0, K=-0.5)
    report = {f.check: f for f in validate_spec(bad)}
    assert not report["intensity_condition"].passed

    good = make_spec(lam=0.5, K=-0.4)
    report = {f.check: f for f in validate_spec(good)}
    assert report["intensity_condition"].passed


def test_validate_empty_controls():
    spec = make_spec(V=())
    report = {f.check: f for f in validate_spec(spec)}
    assert not report["control_sets"].passed


def test_validate_lipschitz_and_monotonicity():
    spec = make_spec(f1={"expr": "y2 + 0.5*x"}, f2={"expr": "y1"},
                     phi1={"expr": "tanh(x)"}, C=2.0, K=0.5)
    report = {f.check: f for f in validate_spec(spec)}
    assert report["lipschitz_probe"].passed
    assert report["coupling_monotonicity"].passed

    tight = make_spec(f1={"expr": "3*y2"}, C=2.0, K=0.0)
    report = {f.check: f for f in validate_spec(tight)}
    assert not report["lipschitz_probe"].passed

    nonmono = make_spec(f1={"expr": "0 - y2"}, K=0.5)
    report = {f.check: f for f in validate_spec(nonmono)}
    assert not report["coupling_monotonicity"].passed


def test_validate_coefficient_bound():
    spec = make_spec(phi1={"expr": "2*tanh(x)"}, bound=1.0)
    report = {f.check: f for f in validate_spec(spec)}
    assert not report["coefficient_bound"].passed
    spec = make_spec(phi1={"expr": "0.5*tanh(x)"}, bound=1.0)
    report = {f.check: f for f in validate_spec(spec)}
    assert report["coefficient_bound"].passed


def test_division_guard_probe():
    spec = make_spec(f1={"expr": "y1 / x"})
    report = {f.check: f for f in validate_spec(spec)}
    assert not report["division_guard"].passed


def test_expression_evaluation_vectorized():
    c = Coefficient({"expr": "max(u, v) + abs(x) - exp(0*t)"}, "driver")
    x = np.array([-1.0, 2.0])
    got = c(t=0.0, x=x, y1=0.0, y2=0.0, z=0.0, u=1.0, v=3.0)
    np.testing.assert_allclose(got, [3.0, 4.0])


def test_expression_rejections():
    with pytest.raises(ConfigError):
        Coefficient({"expr": "__import__('os')"}, "driver")
    with pytest.raises(ConfigError):
        Coefficient({"expr": "y1"}, "terminal")  # terminal sees x only
    with pytest.raises(ConfigError):
        Coefficient({"expr": "x ** y1"}, "driver")  # non-constant power


def test_catalog_families():
    aff = Coefficient({"kind": "affine", "c0": 1.0, "x": 2.0, "u": -1.0}, "drift")
    assert aff(t=0.0, x=1.5, u=2.0, v=0.0) == pytest.approx(1.0 + 3.0 - 2.0)
    bil = Coefficient({"kind": "bilinear_control", "scale": 2.0}, "driver")
    assert bil(t=0, x=0, y1=0, y2=0, z=0, u=3.0, v=0.5) == pytest.approx(3.0)
    bnd = Coefficient({"kind": "bounded_nonlinear", "scale": 2.0, "rate": 1.0}, "terminal")
    assert bnd(x=100.0) == pytest.approx(2.0, abs=1e-6)


def test_spec_document_roundtrip(tmp_path):
    doc = {
        "state_dim": 1, "brownian_dim": 1, "T": 1.0, "lambda": 0.5, "K": 0.0,
        "lipschitz_bound": 2.0,
        "controls": {"U": [0.0, 1.0], "V": [-1.0, 1.0]},
        "drift": {"kind": "constant", "value": 0.0},
        "diffusion": {"kind": "constant", "value": 1.0},
        "ftilde_1": {"expr": "y2"},
        "ftilde_2": {"expr": "y1"},
        "Phi_1": {"expr": "x"},
        "Phi_2": {"kind": "constant", "value": 0.0},
    }
    p = tmp_path / "spec.json"
    p.write_text(json.dumps(doc))
    spec = load_spec(p)
    assert spec.lam == 0.5
    assert spec.control_set_V == (-1.0, 1.0)
    assert spec.ftilde(1, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0) == 3.0

    del doc["drift"]
    with pytest.raises(ConfigError):
        spec_from_dict(doc)
