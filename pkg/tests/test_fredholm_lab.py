import json

import numpy as np
import pytest
import scipy.sparse as sp

from conftest import cosine
from floerlab.fredholm_lab import (
    VerificationReport,
    adjoint_kernel_dim,
    compact_embedding_check,
    constant_floer_curve,
    genericity_probe,
    loglog_fit,
    operator_norm,
    plateau_cutoff,
    refine_orbit,
    semifredholm_constant,
    tail_decay_profile,
    verify_inclusions,
    verify_isometry,
    verify_star_inequalities,
)
from floerlab.mode_space import LoopBasis, ModelSpec, build_lattice
from floerlab.validation import ValidationError


def test_loglog_fit_exact_power():
    x = np.array([1.0, 2.0, 4.0, 8.0])
    fit = loglog_fit(x, 3 * x**-2.5)
    assert fit["slope"] == pytest.approx(-2.5) and fit["r2"] == pytest.approx(1.0)
    assert np.isnan(loglog_fit([1.0], [1.0])["slope"])


def test_operator_norm_dense_check(rng):
    A = sp.random(30, 20, density=0.3, random_state=3)
    s, chk = operator_norm(A)
    assert s == pytest.approx(np.linalg.norm(A.toarray(), 2), rel=1e-8)
    assert chk["relative_difference"] < 1e-8
    assert operator_norm(sp.csr_matrix((4, 4)))[0] == 0.0


def test_plateau_cutoff_shape():
    s = np.linspace(-6, 6, 121)
    b = plateau_cutoff(s, 5.0)
    assert np.all(b[np.abs(s) <= 4] == 1.0) and np.all(b[np.abs(s) >= 5] == 0.0)
    assert np.all(np.diff(b[s >= 0]) <= 0)


def test_isometry_suite(small_spec):
    rep = verify_isometry(20, small_spec)
    assert rep.passed and len(rep.cases) == 3
    assert rep.trend["max_relative_deviation"] < 1e-12


def test_inclusions_suite_reports_literal_failure(small_spec):
    rep = verify_inclusions(small_spec)
    kinds = [c["kind"] for c in rep.cases]
    assert kinds[0] == "H^k in modified H^k" and rep.cases[0]["passed"]
    emb = rep.cases[-1]
    # the per-mode inequality fails exactly where 0 < |lambda| < 1
    assert emb["failing_abs_lambda_max"] < 1.0
    assert not rep.passed


def test_compact_embedding_holds_away_from_small_symbols(small_spec):
    b = LoopBasis(small_spec, build_lattice(small_spec))
    ok, ratio, lam = compact_embedding_check(b, 2, 3.0, 5.0)
    assert np.all(ok[np.abs(lam) >= 1.0])
    assert np.all(~ok[(np.abs(lam) > 0) & (np.abs(lam) < 1.0)])


def test_tail_profile_on_orbit(small_orbit):
    rep = tail_decay_profile(small_orbit, [1, 2, 3])
    assert [c["ell"] for c in rep.cases] == [1, 2, 3]
    assert rep.trend["endomorphism"]["claimed_rate"]
    norms = [c["endomorphism"]["value"] for c in rep.cases]
    assert norms == sorted(norms, reverse=True)
    assert "tail_decay" in rep.series


def test_star_inequalities_small(small_orbit):
    rep = verify_star_inequalities(small_orbit, ells=[1, 2])
    assert {c["ell"] for c in rep.cases} == {1, 2}
    assert "monotone_exceptions" in rep.trend
    assert json.loads(rep.to_json())["suite"] == "stars"


def test_semifredholm_small(small_orbit):
    curve = constant_floer_curve(small_orbit, 4.0, 24)
    ref = [("ds/2", constant_floer_curve(small_orbit, 4.0, 46))]
    rep = semifredholm_constant(curve, 2, refinements=ref)
    base = rep.cases[0]
    assert base["c4_sum"]["value"] <= base["c4_quadratic"]["value"] * (1 + 1e-9)
    assert base["c4_quadratic"]["value"] <= np.sqrt(2) * base["c4_sum"]["value"] * (1 + 1e-9)
    assert rep.cases[1]["relative_change"] < 0.05


def test_semifredholm_rejects_odd_interior(small_orbit):
    with pytest.raises(ValidationError):
        semifredholm_constant(constant_floer_curve(small_orbit, 4.0, 25), 2)


def test_refine_orbit_changes_basis(small_orbit):
    o = refine_orbit(small_orbit, 4)
    assert o.converged and o.problem.basis.m_max == 4


def test_adjoint_suite(small_orbit):
    rep = adjoint_kernel_dim(constant_floer_curve(small_orbit, 4.0, 16))
    assert rep.trend["dims"] == [0, 0] and rep.passed


def test_genericity_restores_nondegeneracy(small_spec):
    amp = (2 * np.pi / small_spec.T) ** 2
    rep = genericity_probe(small_spec, cosine(0.0, amp), 1e-3, 4, [np.pi])
    assert not rep.trend["unperturbed_nondegenerate"]
    assert rep.trend["fraction_nondegenerate"] == 1.0


def test_report_serialization_sanitizes():
    rep = VerificationReport("x", {"a": np.float64(1.5), "b": np.array([1, 2])}, trend={"v": float("nan")})
    rep.series["s"] = [{"a": 0.1, "b": 2}]
    doc = json.loads(rep.to_json())
    assert doc["parameters"] == {"a": 1.5, "b": [1, 2]}
    assert rep.series_csv("s") == "a,b\n0.10000000000000001,2\n"
