import json

import pytest

from floerlab.config import ConfigParseError, load_config, validate
from floerlab.validation import ValidationError


def write(tmp_path, doc):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc) if not isinstance(doc, str) else doc)
    return p


def test_minimal_schrodinger_defaults(tmp_path):
    cfg = load_config(write(tmp_path, {"model": {"model": "schrodinger", "N": 2, "T": 7.3, "n_max": 3}}))
    assert cfg.spec.k == 2
    assert cfg.shape.sigma == 0.5
    assert cfg.resolved["shape"]["sigma"] == 0.5
    assert cfg.resolved["model"]["h_prime_resolved"] == pytest.approx(0.5 * (4 + cfg.spec.h))


def test_k_out_of_range_names_k():
    with pytest.raises(ValidationError) as exc:
        validate({"model": {"model": "schrodinger", "N": 2, "k": 7, "T": 7.3}})
    assert "model.k" in str(exc.value)


def test_zero_mode_requested_for_massless_wave():
    with pytest.raises(ValidationError) as exc:
        validate({"model": {"a": 0}, "lattice": {"include_zero_mode": True}})
    assert "include_zero_mode" in str(exc.value)


@pytest.mark.parametrize("doc, path", [
    ({"bogus": 1}, "bogus"),
    ({"model": {"n_max": 0}}, "model.n_max"),
    ({"model": {"T": -1}}, "model.T"),
    ({"coupling": {"external": [{"k": [1, 2]}]}}, "coupling.external[0].k"),
    ({"sweep": {"ell": [99]}}, "sweep.ell[0]"),
    ({"verify": {"nope": {}}}, "verify.nope"),
    ({"solver": {"orbit_tol": 0}}, "solver.orbit_tol"),
    ({"floer": {"n_s": 2}}, "floer.n_s"),
])
def test_validation_paths(doc, path):
    with pytest.raises(ValidationError) as exc:
        validate(doc)
    assert str(exc.value).startswith(path)


def test_h_prime_range_checked_against_fit():
    with pytest.raises(ValidationError) as exc:
        validate({"model": {"h": 6.0, "h_prime": 6.5}})
    assert "h_prime" in str(exc.value)


def test_parse_errors(tmp_path):
    with pytest.raises(ConfigParseError):
        load_config(write(tmp_path, "{not json"))
    with pytest.raises(ConfigParseError):
        load_config(tmp_path / "missing.json")


def test_hash_and_output_root(tmp_path, monkeypatch):
    a = validate({})
    b = validate({"model": {"T": 2.5}})
    assert a.hash == b.hash
    monkeypatch.setenv("FLOERLAB_OUTPUT_ROOT", str(tmp_path))
    assert a.output_root("spectrum") == str(tmp_path / f"spectrum-{a.hash}")
