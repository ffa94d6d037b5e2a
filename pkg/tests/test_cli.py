import json
import os

import numpy as np
import pytest

from floerlab import __version__
from floerlab.cli import dispatch
from floerlab.config import load_config
from floerlab.mode_space import read_container

BASE = {
    "model": {"n_max": 3, "m_max": 8},
    "coupling": {"kappa": 0.01, "external": [{"k": [1], "amp": 1.0}], "smear_external": False},
    "initial": {"q": [np.pi]},
}


def config(tmp_path, doc=None, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(BASE if doc is None else doc))
    return str(p)


def run(*argv):
    return dispatch([str(a) for a in argv])


def stamped(path):
    text = open(path).read()
    if path.endswith(".json"):
        return json.loads(text)["meta"]
    return dict(kv.split("=") for kv in text.splitlines()[0][2:].split())


def test_spectrum_outputs(tmp_path):
    out = tmp_path / "run"
    assert run("spectrum", "--config", config(tmp_path), "--out", out) == 0
    h = load_config(config(tmp_path)).hash
    for name in ("spectrum.json", "spectrum_shells.csv", "resolved-config.json"):
        meta = stamped(str(out / name))
        assert meta["config_hash"] == h and meta["version"] == __version__
    doc = json.loads((out / "resolved-config.json").read_text())
    assert doc["config"]["model"]["k"] == 2


def test_orbit_outputs_and_sweep(tmp_path):
    out = tmp_path / "run"
    assert run("orbit", "--config", config(tmp_path), "--out", out, "--sweep", "k=2,3;ell=1,2") == 0
    doc = json.loads((out / "orbit.json").read_text())
    assert doc["converged"] and doc["nondegeneracy"]["verdict"]
    assert len(doc["nondegeneracy"]["sweep"]) == 2 and len(doc["ell_sweep"]) == 2
    header, arrays = read_container(out / "orbit.flcn")
    assert header["config_hash"] == doc["meta"]["config_hash"]
    # restart from the written container
    assert run("orbit", "--config", config(tmp_path), "--out", tmp_path / "again", "--init", out / "orbit.flcn") == 0
    assert stamped(str(out / "return_map_spectrum.csv"))["version"] == __version__


def test_orbit_on_resonant_period_exits_3(tmp_path, capsys):
    doc = {**BASE, "model": {"a": 0, "T": 2 * np.pi, "n_max": 2, "m_max": 4}}
    assert run("orbit", "--config", config(tmp_path, doc), "--out", tmp_path / "r", "--init", "decoupled") == 3
    assert "admissible" in capsys.readouterr().err


def test_non_convergence_exits_1_with_diagnostics(tmp_path, capsys):
    doc = {**BASE, "coupling": {"kappa": 0.5}, "initial": {"q": [1.0]}, "solver": {"orbit_max_iter": 1}}
    assert run("orbit", "--config", config(tmp_path, doc), "--out", tmp_path / "r", "--tol", 1e-15) == 1
    assert "residual trail" in capsys.readouterr().err
    assert not json.loads((tmp_path / "r" / "orbit.json").read_text())["converged"]


def test_usage_and_config_errors(tmp_path):
    assert run("bogus") == 2
    assert run("spectrum") == 2
    assert run("spectrum", "--config", tmp_path / "missing.json") == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert run("spectrum", "--config", bad) == 2
    assert run("spectrum", "--config", config(tmp_path, {"model": {"k": 7}})) == 3
    assert run("spectrum", "--config", config(tmp_path, {"model": {"a": 0}, "lattice": {"include_zero_mode": True}})) == 3


def test_simulate_writes_trajectory(tmp_path):
    doc = {**BASE, "initial": {"q": [0.5], "p": [0.1]}}
    out = tmp_path / "sim"
    assert run("simulate", "--config", config(tmp_path, doc), "--out", out, "--t-final", 1.0, "--dt", 0.1,
               "--checkpoint-every", 5) == 0
    lines = (out / "trajectory.csv").read_text().splitlines()
    assert lines[1] == "t,q0,p0,energy,field_h_half_norm"
    energy = np.array([float(r.split(",")[3]) for r in lines[2:]])
    assert np.ptp(energy) < 1e-3 and len(lines) == 2 + 11
    assert sorted(p for p in os.listdir(out) if p.startswith("checkpoint")) == [
        "checkpoint_000000.flcn", "checkpoint_000005.flcn", "checkpoint_000010.flcn"]


def test_simulate_requires_times(tmp_path):
    assert run("simulate", "--config", config(tmp_path), "--out", tmp_path / "s") == 3


def test_floer_heteroclinic(tmp_path):
    doc = {"model": {"n_max": 1, "m_max": 1},
           "coupling": {"kappa": 0.0, "external": [{"k": [1], "amp": 1.0}], "smear_external": False},
           "floer": {"q_minus": [0.0], "q_plus": [np.pi], "n_s": 120, "s_half_width": 10.0}}
    out = tmp_path / "fl"
    assert run("floer", "--config", config(tmp_path, doc), "--out", out) == 0
    rep = json.loads((out / "floer.json").read_text())
    assert rep["converged"] and rep["kernel"]["dim_ker_D"] >= 1
    rows = (out / "floer_slices.csv").read_text().splitlines()
    assert len(rows) == 2 + 120


def test_floer_missing_ends(tmp_path):
    assert run("floer", "--config", config(tmp_path), "--out", tmp_path / "f") == 3


def test_verify_and_report(tmp_path):
    out = tmp_path / "v"
    assert run("verify", "--suite", "isometry", "--config", config(tmp_path), "--out", out) == 0
    assert run("verify", "--suite", "tail", "--config", config(tmp_path), "--out", out) == 0
    assert (out / "tail_tail_decay.csv").exists()
    assert run("report", "--run-dir", out) == 0
    md = (out / "report.md").read_text()
    assert "## isometry.json" in md and "## tail.json" in md
    assert run("report", "--run-dir", tmp_path / "nowhere") == 3


def test_verify_is_deterministic(tmp_path):
    cfg = config(tmp_path)
    for d in ("a", "b"):
        assert run("verify", "--suite", "stars", "--seed", 7, "--config", cfg, "--out", tmp_path / d) == 0
    for name in sorted(os.listdir(tmp_path / "a")):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("FLOERLAB_OUTPUT_ROOT", str(tmp_path / "root"))
    cfg = config(tmp_path)
    assert run("spectrum", "--config", cfg) == 0
    h = load_config(cfg).hash
    assert (tmp_path / "root" / f"spectrum-{h}" / "spectrum.json").exists()
