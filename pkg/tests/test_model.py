import copy
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agestruct import ModelLoadError, ProbeGrid, load_model, model_from_dict, validate
from agestruct.model import estimate_A1_constant

from builders import CONST_ONE, allee_dict, logistic_dict

MODELS = Path(__file__).resolve().parent.parent / "models"


def simple_dict():
    """beta = 0.5 on (1, 2), hazard k a / (a_dagger - a), M = x, p = q = 1."""
    return {
        "a_dagger": 4.0,
        "mu0": {"kind": "rational-blowup", "params": {"k": 0.3}},
        "M": {"kind": "separable",
              "params": {"g": copy.deepcopy(CONST_ONE),
                         "h": {"kind": "linear", "params": {"slope": 1.0}}},
              "psi": {"kind": "linear", "params": {"slope": 1.0}}},
        "beta": {"kind": "constant", "params": {"value": 0.5},
                 "a1": 1.0, "a2": 2.0, "b1": 1.2, "b2": 1.8, "delta": 0.25,
                 "beta_plus": 0.5},
        "p": copy.deepcopy(CONST_ONE),
        "q": copy.deepcopy(CONST_ONE),
        "f": {"kind": "constant", "params": {"value": 1.0, "support": [0.0, 2.0]}},
    }


def test_constructed_model_passes_every_check():
    report = validate(model_from_dict(simple_dict()))
    assert report.ok, str(report)
    assert report.get("A1").status == "pass"
    assert report.get("A2.M_above_psi").status == "pass"


def test_nonzero_mortality_at_zero_size_fails_with_witness():
    d = simple_dict()
    d["M"]["params"]["h"] = {"kind": "linear", "params": {"slope": 1.0, "intercept": 0.1}}
    del d["M"]["psi"]
    check = validate(model_from_dict(d)).get("H1.M_zero_at_0")
    assert check.status == "fail"
    assert check.witness[1] == 0.0


def test_fertility_above_cap_fails_at_largest_probe():
    d = simple_dict()
    d["beta"] = {"kind": "separable",
                 "params": {"g": {"kind": "constant", "params": {"value": 0.5}},
                            "h": {"kind": "linear", "params": {"slope": 1.0, "intercept": 1.0}}},
                 "a1": 1.0, "a2": 2.0, "b1": 1.2, "b2": 1.8, "delta": 0.25, "beta_plus": 0.5}
    probe = ProbeGrid()
    check = validate(model_from_dict(d), probe).get("H2.beta_bounds")
    assert check.status == "fail"
    assert check.witness[1] == pytest.approx(probe.densities().max())


def test_validate_is_deterministic():
    spec = model_from_dict(allee_dict())
    assert str(validate(spec)) == str(validate(spec))


def test_domination_constant_for_constant_ratio():
    d = simple_dict()
    d["beta"]["params"]["value"] = 1.0
    d["beta"]["beta_plus"] = 1.0
    d["p"] = {"kind": "constant", "params": {"value": 0.5, "support": [0.0, 3.0]}}
    assert estimate_A1_constant(model_from_dict(d)) == pytest.approx(2.0, rel=1e-12)


def test_domination_constant_absent_on_support_mismatch():
    d = simple_dict()
    d["p"] = {"kind": "piecewise-linear", "params": {"knots": [[0.0, 1.0], [1.0, 0.0]]}}
    assert estimate_A1_constant(model_from_dict(d)) is None


def test_domination_constant_for_linear_fertility():
    d = simple_dict()
    d["beta"].update({"kind": "piecewise-linear", "params": {"knots": [[1.0, 1.0], [2.0, 2.0]]},
                      "beta_plus": 2.0})
    c = estimate_A1_constant(model_from_dict(d))
    # sup of beta / p = a over the open support (1, 2) is 2, approached from below
    assert 2.0 - 2.0 / 511 <= c <= 2.0


def test_unknown_kind_names_the_field():
    d = simple_dict()
    d["q"] = {"kind": "spline", "params": {}}
    with pytest.raises(ModelLoadError, match="q"):
        model_from_dict(d)


def test_missing_parameter_is_a_load_error():
    d = simple_dict()
    d["mu0"] = {"kind": "rational-blowup", "params": {}}
    with pytest.raises(ModelLoadError, match="k"):
        model_from_dict(d)


@pytest.mark.parametrize("name", ["logistic.json", "allee.json"])
def test_shipped_models_load_and_validate(name):
    spec = load_model(MODELS / name)
    assert validate(spec).ok


def test_load_model_reports_bad_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ModelLoadError):
        load_model(p)


def test_survival_is_non_increasing_and_zero_at_max_age():
    spec = model_from_dict(logistic_dict())
    a = np.linspace(0.0, spec.a_dagger, 2001)
    s = spec.baseline.survival(a)
    assert np.all(np.diff(s) <= 0.0)
    assert s[-1] == 0.0
    assert s[0] == 1.0


@settings(max_examples=25, deadline=None)
@given(b=st.floats(0.1, 5.0), pv=st.floats(0.1, 3.0), slope=st.floats(0.0, 2.0))
def test_domination_constant_bounds_fertility_on_probes(b, pv, slope):
    d = simple_dict()
    d["beta"] = {"kind": "separable",
                 "params": {"g": {"kind": "constant", "params": {"value": b}},
                            "h": {"kind": "exp", "params": {"rate": slope}}},
                 "a1": 1.0, "a2": 2.0, "b1": 1.2, "b2": 1.8, "delta": 0.1 * b,
                 "beta_plus": b}
    d["p"] = {"kind": "constant", "params": {"value": pv}}
    spec = model_from_dict(d)
    probe = ProbeGrid()
    c = estimate_A1_constant(spec, probe)
    ages = probe.ages(spec.a_dagger)[None, :]
    xs = probe.densities()[:, None]
    beta = np.broadcast_to(spec.fertility(ages, xs), (xs.size, ages.size))
    assert np.all(beta <= c * spec.weight_p(ages) * (1 + 1e-12) + 1e-15)


def test_model_files_round_trip_through_json(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps(logistic_dict()))
    spec = load_model(p)
    assert spec.a_dagger == 4.0
