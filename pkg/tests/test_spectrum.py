from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from floerlab.estimators import SpectrumAnalyzer
from floerlab.mode_space import ModelSpec, build_lattice
from floerlab.spectrum import (
    admissibility_profile,
    continued_fraction_convergents,
    eigenvalues,
    model_small_divisors,
    require_admissible,
    second_inclusion_constant,
    small_divisors,
)
from floerlab.validation import InadmissibleError, ValidationError

GOLDEN = (1 + 5**0.5) / 2


def mp_divisor(lam_sq, model, a, T, dps=60):
    # independent reduction: exact integer inputs, high precision
    with mpmath.workdps(dps):
        lam = mpmath.sqrt(lam_sq + a) if model == "wave" else mpmath.mpf(lam_sq)
        om = 2 * mpmath.pi / mpmath.mpf(T)
        e = lam - mpmath.nint(lam / om) * om
        if e <= -mpmath.pi / mpmath.mpf(T):
            e += om
        return float(e)


def test_eigenvalues_by_model():
    m = build_lattice(ModelSpec(n_max=2, a=3))
    np.testing.assert_allclose(eigenvalues(ModelSpec(a=3), m), np.sqrt(m.vectors[:, 0] ** 2 + 3))
    s = ModelSpec(model="schrodinger", N=2, n_max=2)
    ms = build_lattice(s)
    np.testing.assert_array_equal(eigenvalues(s, ms), ms.sq_norm)


def test_window_and_ties():
    T = 2.0
    half = np.pi / T
    eps = small_divisors(np.array([half, 3 * half, 0.1, 2 * np.pi / T]), T)
    assert eps[0] == pytest.approx(half) and eps[1] == pytest.approx(half)
    assert eps[2] == pytest.approx(0.1)
    assert abs(eps[3]) < 1e-15


@settings(max_examples=60, deadline=None)
@given(lam=st.floats(0.01, 500.0), T=st.floats(0.3, 20.0))
def test_divisor_in_window_and_congruent(lam, T):
    e = float(small_divisors(np.array([lam]), T)[0])
    om = 2 * np.pi / T
    assert -np.pi / T < e <= np.pi / T + 1e-12
    k = (lam - e) / om
    assert abs(k - round(k)) < 1e-9


def test_divisors_match_extended_precision_oracle():
    spec = ModelSpec(n_max=1500, T=2.5)
    modes = build_lattice(spec)
    eps = model_small_divisors(spec, modes)
    pick = np.linspace(0, len(modes) - 1, 40).astype(int)
    for i in pick:
        ref = mp_divisor(int(modes.sq_norm[i]), "wave", 1, 2.5)
        assert abs(eps[i] - ref) < 1e-12


def test_resonant_period_detected():
    spec = ModelSpec(model="schrodinger", N=2, T=2 * np.pi, n_max=4)
    modes = build_lattice(spec)
    assert admissibility_profile(spec, modes).resonant
    with pytest.raises(InadmissibleError):
        require_admissible(spec, modes)


def test_zero_mode_eigenvalue_rejected():
    spec = ModelSpec(a=0)
    from floerlab.mode_space import ModeSet

    bad = ModeSet(1, 1, np.array([[0], [1]]), np.array([1.0, 2**0.5]), False)
    with pytest.raises(ValidationError):
        eigenvalues(spec, bad)


def test_convergents_of_golden_ratio_are_fibonacci():
    conv = continued_fraction_convergents(GOLDEN, 10)
    fib = [1, 1, 2, 3, 5, 8, 13, 21, 34, 55, 89, 144]
    assert [c for c in conv] == [(fib[i + 1], fib[i]) for i in range(10)]


def test_convergents_stop_on_rationals():
    conv = continued_fraction_convergents(float(Fraction(7, 3)), 10)
    assert conv[-1] == (7, 3)


def test_profile_fit_recovers_known_exponent():
    spec = ModelSpec(model="wave", a=0, T=2 * np.pi * GOLDEN**0.5, n_max=512)
    rep = admissibility_profile(spec, build_lattice(spec))
    # quadratic irrational ratio: |eps_n| ~ 1/n, slope near -1
    assert -1.3 < rep.slope < -0.7
    assert rep.h0_floor == max(rep.h0_fit, 2.0)
    assert rep.to_dict()["marker"] == "finite-truncation surrogate"


def test_second_inclusion_constant():
    eps = np.array([0.5, 0.1])
    theta = np.array([2.0, 10.0])
    assert second_inclusion_constant(eps, theta, 1.0) == pytest.approx(min(1.0, 1.0))


def test_spectrum_analyzer():
    spec = ModelSpec(n_max=16)
    an = SpectrumAnalyzer(h_values=[6.0]).fit(spec)
    assert np.isfinite(an.h0_fit_) and not an.resonant_
    np.testing.assert_array_equal(an.transform(), model_small_divisors(spec, build_lattice(spec)))
    assert an.get_params()["cf_depth"] == 12
