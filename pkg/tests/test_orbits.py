import numpy as np
import pytest

from conftest import build_orbit, cosine
from floerlab.dynamics import make_system
from floerlab.estimators import PeriodicOrbitSolver
from floerlab.mode_space import LoopVector, ModelSpec, build_lattice
from floerlab.orbits import (
    OrbitProblem,
    assemble_linearization,
    decoupled_initial,
    kernel_dimension,
    linearized_return_map,
    newton_orbit,
    nondegeneracy_margin,
    orbit_residual,
    power_iteration_norm,
    require_converged,
    smallest_singular_value,
)
from floerlab.validation import ConvergenceError, InadmissibleError, ValidationError


def test_decoupled_critical_points_are_exact(small_spec):
    for q in (0.0, np.pi):
        orb = build_orbit(small_spec, cosine(0.0), [q])
        assert orb.converged and orb.residual_norm < 1e-12


def test_jacobian_matches_finite_difference(small_orbit, rng):
    pb = small_orbit.problem
    b = pb.basis
    c0 = small_orbit.loop.coeffs + 0.05 * (rng.standard_normal(b.symbol.shape) + 1j * rng.standard_normal(b.symbol.shape)) / (
        1 + np.abs(b.symbol)) ** 2
    L = (pb.time_operator() + pb.hessian(c0)).tocsr()
    d = rng.standard_normal(b.dim)
    h = 1e-6
    dc = b.unpack(d)
    fd = (b.pack(pb.residual(c0 + h * dc)) - b.pack(pb.residual(c0 - h * dc))) / (2 * h)
    np.testing.assert_allclose(L @ d, fd, atol=1e-7 * np.abs(fd).max())


def test_hessian_is_symmetric(small_orbit):
    S = small_orbit.problem.hessian(small_orbit.loop.coeffs)
    assert abs(S - S.T).max() < 1e-12 * max(1.0, abs(S).max())


def test_orbit_residual_vanishes(small_orbit):
    r = orbit_residual(small_orbit.loop, small_orbit.problem)
    assert np.abs(r.coeffs).max() < 1e-10


def test_return_map_matches_decoupled_formula(small_spec):
    orb = build_orbit(small_spec, cosine(0.0), [np.pi])
    rm = linearized_return_map(orb)
    b = orb.problem.basis
    np.testing.assert_allclose(rm["slot_distances"][b.N:], 2 * np.abs(np.sin(b.eps * b.T / 2)), atol=1e-10)
    assert rm["symplectic_defect"] < 1e-9
    assert rm["off_block_size"] < 1e-12


def test_degenerate_orbit_is_flagged(small_spec):
    # V = A cos q at its maximum: the particle multiplier is 1 when sqrt(A) = 2 pi/T
    amp = (2 * np.pi / small_spec.T) ** 2
    orb = build_orbit(small_spec, cosine(0.0, amp), [np.pi])
    rep = nondegeneracy_margin(orb)
    assert not rep.verdict and not rep.return_map_verdict
    assert rep.kernel_dim >= 1


def test_nondegenerate_orbit_margin(small_orbit):
    rep = nondegeneracy_margin(small_orbit, sweep=[(2, 3.0), (3, 3.0)])
    assert rep.verdict and rep.return_map_verdict
    assert rep.sigma_min == pytest.approx(rep.sigma_min_dense, rel=1e-6)
    assert len(rep.sweep) == 2 and all(s["verdict"] for s in rep.sweep)
    d = rep.to_dict()
    assert d["weights"].startswith("modified")


def test_block_splitting(small_orbit):
    op = assemble_linearization(small_orbit, ell=2)
    blk = op.blocks()
    n = op.basis.dim
    assert len(blk["index_ell"]) + len(blk["index_perp"]) == n
    with pytest.raises(ValidationError):
        assemble_linearization(small_orbit, ell=99)


def test_singular_value_helpers(rng):
    A = np.diag([3.0, 2.0, 0.5]) @ np.linalg.qr(rng.standard_normal((3, 3)))[0]
    import scipy.sparse as sp

    assert smallest_singular_value(sp.csr_matrix(A)) == pytest.approx(0.5, rel=1e-8)
    s, _ = power_iteration_norm(lambda x: A @ x, lambda y: A.T @ y, 3)
    assert s == pytest.approx(3.0, rel=1e-8)
    assert kernel_dimension(np.array([1.0, 0.5, 1e-15])) == 1


def test_resonant_period_rejected():
    spec = ModelSpec(a=0, T=2 * np.pi, n_max=2, m_max=4)
    sys_ = make_system(spec, build_lattice(spec), cosine(0.0))
    pb = OrbitProblem(sys_)
    with pytest.raises(InadmissibleError):
        newton_orbit(decoupled_initial(pb, [0.0]), pb)


def test_non_convergence_raises(small_spec):
    sys_ = make_system(small_spec, build_lattice(small_spec), cosine(0.5))
    pb = OrbitProblem(sys_)
    orb = newton_orbit(decoupled_initial(pb, [1.0]), pb, max_iter=1, tol=1e-14)
    assert not orb.converged
    with pytest.raises(ConvergenceError) as exc:
        require_converged(orb)
    assert exc.value.trail


def test_orbit_estimator(small_spec):
    sys_ = make_system(small_spec, build_lattice(small_spec), cosine(1e-2))
    est = PeriodicOrbitSolver(q_star=[np.pi]).fit(sys_)
    x, y = est.predict([0.0, 1.0])
    assert x.shape == (est.problem_.basis.n_slots, 2)
    assert est.score() == -est.residual_
    assert est.margin_.verdict
    assert isinstance(est.orbit_.loop, LoopVector)


def test_single_field_mode_residual_is_its_symbol(small_spec):
    orb = build_orbit(small_spec, cosine(0.0), [0.0])
    b = orb.problem.basis
    c = orb.loop.coeffs.copy()
    j, m, amp = 2, 3, 0.7 + 0.2j
    c[b.N + j, b.m_max + m] = amp
    r = orbit_residual(LoopVector(b, c), orb.problem).coeffs
    lam = 2 * np.pi * m / b.T - b.eps[j]
    assert abs(abs(r[b.N + j, b.m_max + m]) - abs(lam) * abs(amp)) < 1e-12
    r[b.N + j, b.m_max + m] = 0
    assert np.abs(r).max() < 1e-12
