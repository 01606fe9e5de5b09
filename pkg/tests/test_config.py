"""Config parsing: section defaults, file references, validation, presets."""

import json
import os

import numpy as np
import pytest

from svph.config import ExperimentConfig, config_from_json_dict, load_config
from svph.errors import ValidationError
from svph.presets import PRESET_NAMES, load_preset

MINIMAL = {
    "map": {
        "kind": "skew_linear",
        "ell": 2,
        "f_coeffs": [],
        "omega_coeffs": [[1, 0, 0.05, 0.0]],
    }
}


def test_minimal_config_fills_defaults():
    cfg = config_from_json_dict(json.loads(json.dumps(MINIMAL)))
    assert cfg.K == 12
    assert cfg.map_spec.ell == 2
    assert cfg.N == 20000
    assert cfg.n_list == (64, 256, 1024, 4096)
    # default observable is cos(2 pi x)
    v = cfg.observable.coeffs.eval(np.array([0.0]), np.array([0.3]))
    assert abs(v[0] - 1.0) < 1e-12


def test_validation_reports_every_bad_field_at_once():
    doc = json.loads(json.dumps(MINIMAL))
    doc["spectral"] = {"K": 16, "Q": 16}
    doc["montecarlo"] = {"N": 0, "gk_J": 200, "n_list": [64, 32]}
    doc["llt"] = {"g_width": -1.0, "delta": 1.5}
    with pytest.raises(ValidationError) as err:
        config_from_json_dict(doc)
    msg = str(err.value)
    for fragment in ["spectral.Q", "montecarlo.N", "montecarlo.gk_J",
                     "montecarlo.n_list", "llt.g_width", "llt.delta"]:
        assert fragment in msg, f"missing {fragment} in: {msg}"


def test_negative_mode_cutoff_rejected():
    doc = json.loads(json.dumps(MINIMAL))
    doc["spectral"] = {"K": -3}
    with pytest.raises(ValidationError, match="spectral.K"):
        config_from_json_dict(doc)


def test_n_list_must_increase():
    doc = json.loads(json.dumps(MINIMAL))
    doc["montecarlo"] = {"n_list": [256, 256]}
    with pytest.raises(ValidationError, match="increasing"):
        config_from_json_dict(doc)


def test_map_section_required():
    with pytest.raises(ValidationError, match="map"):
        config_from_json_dict({"observable": {"coeffs": []}})


def test_file_references_resolve_relative_to_config(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps(MINIMAL["map"]))
    (tmp_path / "o.json").write_text(
        json.dumps({"coeffs": [[1, 0, 0.0, -0.5]]}))
    cfg_doc = {"map": "m.json", "observable": "o.json"}
    cfg_path = tmp_path / "exp.json"
    cfg_path.write_text(json.dumps(cfg_doc))
    cfg = load_config(str(cfg_path))
    assert cfg.map_spec.ell == 2
    # sin(2 pi x) at x = 1/4 is 1
    v = cfg.observable.coeffs.eval(np.array([0.25]), np.array([0.0]))
    assert abs(v[0] - 1.0) < 1e-12


def test_missing_referenced_file_is_a_validation_error(tmp_path):
    cfg_path = tmp_path / "exp.json"
    cfg_path.write_text(json.dumps({"map": "absent.json"}))
    with pytest.raises(ValidationError, match="not found"):
        load_config(str(cfg_path))


def test_map_section_rejects_non_dict_non_string():
    with pytest.raises(ValidationError, match="inline object or a file path"):
        config_from_json_dict({"map": 7})


def test_round_trip_through_json_dict():
    cfg = config_from_json_dict(json.loads(json.dumps(MINIMAL)))
    again = config_from_json_dict(cfg.to_json_dict())
    assert again.to_json_dict() == cfg.to_json_dict()


def test_all_presets_load_and_validate():
    assert PRESET_NAMES == ("doubling_skew", "two_basin", "fast_slow")
    for name in PRESET_NAMES:
        cfg = load_preset(name)
        assert isinstance(cfg, ExperimentConfig)
        assert cfg.name == name
        cfg.validate()


def test_preset_kinds_cover_the_map_families():
    kinds = {load_preset(n).map_spec.kind for n in PRESET_NAMES}
    assert kinds == {"skew_linear", "fast_slow"}


def test_unknown_preset_rejected():
    with pytest.raises(ValidationError):
        load_preset("no_such_preset")
