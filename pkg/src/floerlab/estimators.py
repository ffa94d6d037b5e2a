"""Estimator-style wrappers around the spectrum, orbit and Floer solvers.

``fit`` takes domain objects instead of feature matrices; fitted state lives
in trailing-underscore attributes so ``check_is_fitted`` works as usual.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .floer import floer_newton, kernel_dimensions, require_converged as require_curve
from .mode_space import build_lattice
from .orbits import OrbitProblem, decoupled_initial, newton_orbit, nondegeneracy_margin, require_converged
from .spectrum import admissibility_profile, model_small_divisors


class SpectrumAnalyzer(BaseEstimator):
    """Small-divisor profile of a model; ``transform`` maps lattices to their small divisors."""

    def __init__(self, h_values=None, cf_depth=12):
        self.h_values = h_values
        self.cf_depth = cf_depth

    def fit(self, spec, modes=None):
        self.spec_ = spec
        self.modes_ = build_lattice(spec) if modes is None else modes
        self.report_ = admissibility_profile(spec, self.modes_, self.h_values, self.cf_depth)
        self.h0_fit_ = self.report_.h0_fit
        self.resonant_ = self.report_.resonant
        return self

    def transform(self, modes=None):
        check_is_fitted(self, "report_")
        return model_small_divisors(self.spec_, self.modes_ if modes is None else modes)

    def fit_transform(self, spec, modes=None):
        return self.fit(spec, modes).transform()


class PeriodicOrbitSolver(BaseEstimator):
    """Newton solver for twisted periodic orbits started from a decoupled critical point or a given loop."""

    def __init__(self, q_star=0.0, m_max=None, tol=1e-10, max_iter=30, threshold=1e-6, with_margin=True, seed=0):
        self.q_star = q_star
        self.m_max = m_max
        self.tol = tol
        self.max_iter = max_iter
        self.threshold = threshold
        self.with_margin = with_margin
        self.seed = seed

    def fit(self, system, initial=None):
        self.problem_ = OrbitProblem(system, m_max=self.m_max)
        start = decoupled_initial(self.problem_, self.q_star) if initial is None else initial
        self.orbit_ = require_converged(newton_orbit(start, self.problem_, self.tol, self.max_iter))
        self.residual_ = self.orbit_.residual_norm
        if self.with_margin:
            self.margin_ = nondegeneracy_margin(self.orbit_, threshold=self.threshold, seed=self.seed)
        return self

    def predict(self, t):
        """Physical canonical coordinates ``(x, y)`` of every slot at times ``t``."""
        check_is_fitted(self, "orbit_")
        return self.problem_.evaluate_at(self.orbit_.loop.coeffs, np.atleast_1d(t))

    def score(self, system=None):
        check_is_fitted(self, "orbit_")
        return -self.residual_


class FloerCurveSolver(BaseEstimator):
    """Newton solver for a Floer curve between two fitted orbits."""

    def __init__(self, n_s=64, s_half_width=None, tol=1e-9, max_iter=30, kernel=True, seed=0):
        self.n_s = n_s
        self.s_half_width = s_half_width
        self.tol = tol
        self.max_iter = max_iter
        self.kernel = kernel
        self.seed = seed

    def fit(self, orbits, initial=None):
        u_minus, u_plus = orbits
        curve = floer_newton(u_plus, u_minus, initial=initial, tol=self.tol, s_half_width=self.s_half_width,
                             n_s=self.n_s, max_iter=self.max_iter)
        self.curve_ = require_curve(curve)
        self.residual_ = curve.residual_norm
        if self.kernel:
            self.kernel_ = kernel_dimensions(curve, seed=self.seed)
        return self

    def predict(self, s):
        """Slice coefficients at ``s`` by linear interpolation along the grid."""
        check_is_fitted(self, "curve_")
        grid = self.curve_.strip.s
        vals = self.curve_.strip.values
        s = np.clip(np.atleast_1d(np.asarray(s, dtype=float)), grid[0], grid[-1])
        j = np.clip(np.searchsorted(grid, s) - 1, 0, len(grid) - 2)
        w = ((s - grid[j]) / (grid[j + 1] - grid[j]))[:, None, None]
        return (1 - w) * vals[j] + w * vals[j + 1]
