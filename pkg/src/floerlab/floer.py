"""Strips: the twisted d-bar solver and Floer curves between orbits.

On a strip the unknown ``u(s, t)`` is stored slice-wise in the loop basis.  The
Floer equation reads ``d_s u + (i d_t u + grad G_t(u)) = 0`` and its
linearization is ``D = d_s + i d_t + S_u``.  Curves live on a finite grid
``[-S0, S0]`` whose end slices are clamped to the asymptotic orbits (``u-`` at
``-S0``, ``u+`` at ``+S0``); the unknowns are the interior slices.

With clamped ends the centered difference matrix on interior nodes is
skew-symmetric, so ``d_s - symbol`` has symmetric part ``-symbol`` and obeys
``|lambda| ||f|| <= ||g||`` mode by mode.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.signal import lfilter
from scipy.sparse.csgraph import connected_components

from .mode_space import StripField, loop_norm_modified, LoopVector
from .orbits import TIKHONOV, _h_prime, power_iteration_norm
from .spectrum import require_admissible
from .validation import ConvergenceError, ValidationError, check_positive


def centered_interior(n, ds):
    """Skew-symmetric centered difference on the ``n - 2`` interior nodes (ends clamped to 0)."""
    m = n - 2
    off = np.full(m - 1, 0.5 / ds)
    return sp.diags([-off, off], [-1, 1], shape=(m, m), format="csr")


def default_half_width(basis, decay=1e-8, cap=50.0):
    """``S0`` with ``exp(-lambda_min S0) < decay`` over the nonzero field symbols, capped at ``cap``."""
    lam = np.abs(basis.symbol[basis.N :]).ravel()
    lam = lam[lam > 0]
    s0 = -np.log(decay) / lam.min()
    return float(min(s0, cap)), bool(s0 > cap)


# d-bar ----------------------------------------------------------------------------------


def _cell_weights(x, h):
    # exact integrals of exp(-mu (h - tau)) against the two hat functions on one cell, x = mu h
    x = np.asarray(x, dtype=complex)
    small = np.abs(x) < 1e-3
    xs = np.where(small, 1.0, x)
    E = np.exp(-x)
    one = np.where(small, 1 - x / 2 + x**2 / 6 - x**3 / 24, -np.expm1(-xs) / xs)
    wb = np.where(small, 0.5 - x / 6 + x**2 / 24 - x**3 / 120, (xs + np.expm1(-xs)) / xs**2)
    wb = h * wb
    wa = h * one - wb
    return E, wa, wb


def _first_order_filter(E, u):
    # f[0] = 0, f[j+1] = E f[j] + u[j] along axis 0; u has shape (n-1, P)
    n1, P = u.shape
    out = np.zeros((n1 + 1, P), dtype=complex)
    if n1 > 4 * P:
        for p in range(P):
            out[1:, p] = lfilter([1.0], [1.0, -E[p]], u[:, p])
    else:
        f = np.zeros(P, dtype=complex)
        for j in range(n1):
            f = E * f + u[j]
            out[j + 1] = f
    return out


def dbar_solve(g):
    """Bounded solution of ``d_s f - lambda_{n,m} f = g`` mode by mode.

    Each mode uses the decaying kernel: causal (from ``-S0``) when
    ``-lambda > 0`` and anticausal (from ``+S0``) otherwise.  ``g`` is taken
    piecewise linear on cells and every cell is integrated exactly, so large
    ``|lambda| ds`` is harmless.  A field mode with ``lambda = 0`` is rejected;
    particle modes with ``lambda = 0`` are allowed only where ``g`` vanishes.
    """
    b = g.basis
    n = len(g.s)
    h = g.ds
    mu = (-b.symbol).ravel()
    G = g.values.reshape(n, -1)
    zero = mu == 0
    field = np.repeat(b.is_field, b.K)
    if np.any(zero & field):
        raise ValidationError("T", "a field mode has lambda_{n,m} = 0; the spectrum is not admissible")
    if np.any(zero & (np.abs(G).max(axis=0) > 0)):
        raise ValidationError("g", "right-hand side is nonzero on a particle mode with lambda_{n,m} = 0")
    F = np.zeros_like(G, dtype=complex)
    pos = np.nonzero(mu > 0)[0]
    neg = np.nonzero(mu < 0)[0]
    if pos.size:
        E, wa, wb = _cell_weights(mu[pos] * h, h)
        u = wa[None] * G[:-1, pos] + wb[None] * G[1:, pos]
        F[:, pos] = _first_order_filter(E, u)
    if neg.size:
        # reverse s: f_j = E f_{j+1} - (wa g_{j+1} + wb g_j)
        E, wa, wb = _cell_weights(-mu[neg] * h, h)
        Gr = G[::-1][:, neg]
        u = -(wa[None] * Gr[:-1] + wb[None] * Gr[1:])
        F[:, neg] = _first_order_filter(E, u)[::-1]
    return StripField(b, g.s, F.reshape(g.values.shape), g.tags)


def dbar_interior(f):
    """``d_s f + i d_t f`` at interior nodes with centered differences."""
    h = f.ds
    ds = (f.values[2:] - f.values[:-2]) / (2 * h)
    return ds - f.basis.symbol[None] * f.values[1:-1]


def dbar_residual(f, g):
    """Relative L2 residual of ``dbar f = g`` over interior nodes."""
    r = dbar_interior(f) - g.values[1:-1]
    return float(np.linalg.norm(r) / np.linalg.norm(g.values[1:-1]))


def young_bound_margins(f, g):
    """Per-mode ``||g||_2 - |lambda| ||f||_2`` (trapezoid rule); nonnegative means the bound holds."""
    from .mode_space import trapezoid_weights

    w = trapezoid_weights(len(f.s), f.ds)[:, None, None]
    nf = np.sqrt(np.sum(w * np.abs(f.values) ** 2, axis=0))
    ng = np.sqrt(np.sum(w * np.abs(g.values) ** 2, axis=0))
    return ng - np.abs(f.basis.symbol) * nf, ng


def dbar_solve_refined(g, tol=1e-10, max_sweeps=10):
    """:func:`dbar_solve` followed by iterative refinement against the centered interior operator.

    Returns the solution and the residual history; sweeps stop once the
    relative residual is below ``tol`` or stops decreasing.
    """
    f = dbar_solve(g)
    history = [dbar_residual(f, g)]
    for _ in range(max_sweeps):
        if history[-1] < tol:
            break
        r = np.zeros_like(g.values)
        r[1:-1] = g.values[1:-1] - dbar_interior(f)
        trial = StripField(g.basis, g.s, f.values + dbar_solve(StripField(g.basis, g.s, r)).values, g.tags)
        res = dbar_residual(trial, g)
        if res >= history[-1]:
            break
        f = trial
        history.append(res)
    return f, history


def dbar_refinement(g_func, basis, s_half_width, tol=1e-8, n_start=257, max_levels=10, sweeps=10):
    """Halve ``ds`` until the refined solve reaches ``tol``; ``sweeps=0`` is pure grid refinement.

    ``g_func(s)`` returns values of shape ``(len(s), n_slots, K)``.
    """
    n = n_start
    history = []
    for _ in range(max_levels):
        s = np.linspace(-s_half_width, s_half_width, n)
        g = StripField(basis, s, np.asarray(g_func(s), dtype=complex))
        f, sweep_hist = dbar_solve_refined(g, tol, sweeps)
        res = sweep_hist[-1]
        history.append({"n_s": n, "ds": g.ds, "residual": res, "sweeps": len(sweep_hist) - 1})
        if res < tol:
            return f, g, history
        n = 2 * n - 1
    return f, g, history


# strips of loops ------------------------------------------------------------------------


class StripProblem:
    """Residual and Jacobian of the Floer equation on a clamped uniform grid."""

    def __init__(self, problem, s_half_width, n_s):
        if n_s < 4:
            raise ValidationError("n_s", "need at least 4 s-nodes")
        self.problem = problem
        self.basis = problem.basis
        self.s = np.linspace(-s_half_width, s_half_width, n_s)
        self.ds = float(self.s[1] - self.s[0])
        self.n_s = n_s
        self.Dint = centered_interior(n_s, self.ds)

    def residual(self, values):
        """Interior residual ``(n_s - 2, n_slots, K)`` for full slice values ``(n_s, n_slots, K)``."""
        pb = self.problem
        ds = (values[2:] - values[:-2]) / (2 * self.ds)
        return ds + pb.residual(values[1:-1])

    def hessians(self, values):
        out = []
        cache = {}
        for j in range(1, self.n_s - 1):
            key = values[j].tobytes()
            if key not in cache:
                cache[key] = self.problem.hessian(values[j])
            out.append(cache[key])
        return out

    def jacobian(self, values, hess=None):
        """Sparse ``D`` on interior unknowns (packed real, node-major)."""
        b = self.basis
        hess = self.hessians(values) if hess is None else hess
        dim = b.dim
        T = self.problem.time_operator()
        blocks = sp.block_diag([T + S for S in hess], format="csr")
        return (sp.kron(self.Dint, sp.identity(dim), format="csr") + blocks).tocsc()

    def pack(self, interior):
        b = self.basis
        return np.concatenate([b.pack(v) for v in interior])

    def unpack(self, x):
        b = self.basis
        return np.array([b.unpack(c) for c in x.reshape(self.n_s - 2, b.dim)])


@dataclass(eq=False)
class FloerCurve:
    strip: StripField
    u_plus: object
    u_minus: object
    residual_norm: float
    problem: StripProblem
    converged: bool = True
    iterations: int = 0
    trail: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def s_half_width(self):
        return self.strip.half_width

    @property
    def ds(self):
        return self.strip.ds

    def slice_distances(self, k=None, h_prime=None):
        """Modified-norm distances of every slice to ``u-`` and ``u+`` and the energy density ``||d_s u||^2``."""
        b = self.strip.basis
        spec = self.problem.problem.sys.spec
        k = spec.k if k is None else k
        hp = _h_prime(spec) if h_prime is None else h_prime
        vals = self.strip.values
        dm = [loop_norm_modified(LoopVector(b, v - self.u_minus.loop.coeffs), k, hp) for v in vals]
        dp = [loop_norm_modified(LoopVector(b, v - self.u_plus.loop.coeffs), k, hp) for v in vals]
        dsv = np.gradient(vals, self.strip.ds, axis=0)
        energy = np.sum(np.abs(dsv) ** 2, axis=(1, 2))
        return np.array(dm), np.array(dp), energy


def constant_curve(orbit, s_half_width, n_s):
    problem = orbit.problem
    s = np.linspace(-s_half_width, s_half_width, n_s)
    vals = np.broadcast_to(orbit.loop.coeffs, (n_s,) + orbit.loop.coeffs.shape).copy()
    return StripField(problem.basis, s, vals)


def interpolated_curve(u_minus, u_plus, s_half_width, n_s, profile=None):
    """Initial strip blending ``u-`` into ``u+`` with a smooth step (tanh by default)."""
    s = np.linspace(-s_half_width, s_half_width, n_s)
    w = 0.5 * (1 + np.tanh(s)) if profile is None else profile(s)
    w[0], w[-1] = 0.0, 1.0
    a, b = u_minus.loop.coeffs, u_plus.loop.coeffs
    vals = (1 - w)[:, None, None] * a[None] + w[:, None, None] * b[None]
    return StripField(u_minus.problem.basis, s, vals)


def floer_residual(strip, problem):
    """Interior residual of the Floer equation as a StripField (end slices report 0)."""
    sp_ = StripProblem(problem, strip.half_width, len(strip.s))
    r = np.zeros_like(strip.values)
    r[1:-1] = sp_.residual(strip.values)
    return StripField(strip.basis, strip.s, r, strip.tags)


def _merit(sp_, values, w):
    R = sp_.residual(values)
    x = sp_.pack(R)
    return float(np.sqrt(sp_.ds * np.sum(w * x * x))), R


def solve_linearized(J, rhs, method="direct"):
    """Solve ``J x = rhs``: sparse LU, with a Tikhonov normal-equation fallback when singular."""
    if method == "direct":
        try:
            lu = spla.splu(J)
            x = lu.solve(rhs)
            if np.all(np.isfinite(x)):
                return x, "lu"
        except RuntimeError:
            pass
    JtJ = (J.T @ J).tocsc()
    tau = TIKHONOV * JtJ.diagonal().sum() / J.shape[0]
    x = spla.spsolve(JtJ + tau * sp.identity(J.shape[0], format="csc"), J.T @ rhs)
    return x, f"tikhonov tau={tau:.3e}"


def floer_newton(u_plus, u_minus, initial=None, tol=1e-9, s_half_width=None, n_s=None, max_iter=30, k=None,
                 h_prime=None, check_admissible=True):
    """Damped Newton for a Floer curve from ``u-`` (at ``-S0``) to ``u+`` (at ``+S0``).

    The merit is the interior residual in the standard ``(k-1, h')`` loop
    weight integrated in ``s``; ``initial`` must carry the clamped end slices.
    """
    check_positive(tol, "tol")
    problem = u_plus.problem
    if u_minus.problem.basis is not problem.basis:
        raise ValidationError("orbit_minus", "asymptotic orbits must share one loop basis")
    if check_admissible:
        require_admissible(problem.sys.spec, problem.sys.modes)
    spec = problem.sys.spec
    k = spec.k if k is None else k
    hp = _h_prime(spec) if h_prime is None else h_prime
    notes = []
    if initial is None:
        if s_half_width is None:
            s_half_width, capped = default_half_width(problem.basis)
            if capped:
                notes.append(f"default half width capped at {s_half_width}")
        if n_s is None:
            raise ValidationError("n_s", "give n_s or an initial curve")
        initial = interpolated_curve(u_minus, u_plus, s_half_width, n_s)
    vals = initial.values.copy()
    scale = max(1.0, float(np.abs(u_plus.loop.coeffs).max()), float(np.abs(u_minus.loop.coeffs).max()))
    if np.abs(vals[0] - u_minus.loop.coeffs).max() > 1e-10 * scale or np.abs(vals[-1] - u_plus.loop.coeffs).max() > 1e-10 * scale:
        raise ValidationError("initial", "end slices must equal u- at -S0 and u+ at +S0")
    sp_ = StripProblem(problem, initial.half_width, len(initial.s))
    b = problem.basis
    w = np.tile(b.weights_standard(k - 1, hp), sp_.n_s - 2)
    phi, R = _merit(sp_, vals, w)
    trail = [phi]
    it = 0
    while phi >= tol and it < max_iter:
        it += 1
        J = sp_.jacobian(vals)
        dx, how = solve_linearized(J, -sp_.pack(R))
        if how != "lu":
            notes.append(f"iteration {it}: {how}")
        dv = sp_.unpack(dx)
        step = 1.0
        for _ in range(21):
            trial = vals.copy()
            trial[1:-1] += step * dv
            phi_new, R_new = _merit(sp_, trial, w)
            if phi_new <= (1 - 1e-4 * step) * phi or phi_new < tol:
                break
            step *= 0.5
        else:
            notes.append("line search failed")
            break
        vals, phi, R = trial, phi_new, R_new
        trail.append(phi)
    strip = StripField(b, sp_.s, vals)
    return FloerCurve(strip, u_plus, u_minus, phi, sp_, bool(phi < tol), it, trail, notes)


def require_converged(curve):
    if not curve.converged:
        raise ConvergenceError(f"Floer residual {curve.residual_norm:.3e} after {curve.iterations} iterations",
                               curve.trail)
    return curve


# kernel data ----------------------------------------------------------------------------


def asymptotic_subspaces(A, rtol=1e-10):
    """Sparse bases of the negative and positive eigenspaces of a symmetric sparse ``A``.

    Eigenvectors are computed per connected component of the sparsity graph,
    which keeps the bases sparse for block-structured operators.
    """
    A = sp.csr_matrix(A)
    n = A.shape[0]
    ncomp, label = connected_components(A, directed=False)
    neg, pos = [], []
    scale = max(1.0, float(np.abs(A).max()))
    zero = 0
    for c in range(ncomp):
        idx = np.nonzero(label == c)[0]
        w, V = np.linalg.eigh(A[idx][:, idx].toarray())
        zero += int(np.sum(np.abs(w) <= rtol * scale))
        for sel, out in ((w < -rtol * scale, neg), (w > rtol * scale, pos)):
            for v in V[:, sel].T:
                out.append((idx, v))

    def to_matrix(cols):
        rows, cc, vals = [], [], []
        for j, (idx, v) in enumerate(cols):
            keep = np.abs(v) > 1e-15
            rows.append(idx[keep])
            cc.append(np.full(keep.sum(), j))
            vals.append(v[keep])
        if not cols:
            return sp.csr_matrix((n, 0))
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cc))), shape=(n, len(cols)))

    return to_matrix(neg), to_matrix(pos), zero


def box_linearization(curve):
    """Midpoint-scheme ``D`` with dichotomy end conditions.

    Unknowns are the interior slices plus end values restricted to the
    decaying eigenspaces: the negative eigenspace of ``A-`` at ``-S0`` and the
    positive one of ``A+`` at ``+S0``, where ``A = i d_t + S`` at the
    asymptotic orbit.  Equations sit at the ``n_s - 1`` cell midpoints.  The
    column excess equals ``n_neg(A-) - n_neg(A+)``, the Fredholm index of the
    truncation.
    """
    sp_ = curve.problem
    b = sp_.basis
    n, ds, dim = sp_.n_s, sp_.ds, b.dim
    T = sp_.problem.time_operator()
    vals = curve.strip.values
    A = [(T + sp_.problem.hessian(vals[0])).tocsr()]
    A += [T + S for S in sp_.hessians(vals)]
    A.append((T + sp_.problem.hessian(vals[-1])).tocsr())
    Qm, _, zm = asymptotic_subspaces(A[0])
    _, Qp, zp = asymptotic_subspaces(A[-1])
    I = sp.identity(dim, format="csr")
    n_int = n - 2
    # column layout: [a | xi_1 .. xi_{n-2} | b]
    na, nb = Qm.shape[1], Qp.shape[1]
    rows = []
    for c in range(n - 1):
        Am = 0.5 * (A[c] + A[c + 1])
        E = -I / ds + 0.5 * Am
        F = I / ds + 0.5 * Am
        blocks = [None] * (n_int + 2)
        blocks[0] = (E @ Qm) if c == 0 else sp.csr_matrix((dim, na))
        if c >= 1:
            blocks[c] = E
        if c + 1 <= n_int:
            blocks[c + 1] = F
        blocks[-1] = (F @ Qp) if c == n - 2 else sp.csr_matrix((dim, nb))
        rows.append(blocks)
    # blocks[1..n_int] index interior slices 1..n-2
    D = sp.bmat(rows, format="csc")
    return D, {"n_neg_minus": na, "n_pos_plus": nb, "zero_modes_minus": zm, "zero_modes_plus": zp,
               "index": int(D.shape[1] - D.shape[0])}


def smallest_singular_values(A, count=4, seed=0):
    """Smallest ``count`` of the ``min(m, n)`` singular values of a sparse matrix."""
    A = sp.csc_matrix(A)
    m, n = A.shape
    G = (A @ A.T if m <= n else A.T @ A).tocsc()
    k = G.shape[0]
    count = max(1, min(count, k - 2))
    try:
        lu = spla.splu(G)
        probe = lu.solve(np.ones(k))
        if not np.all(np.isfinite(probe)):
            raise RuntimeError
    except RuntimeError:
        return np.zeros(1)
    op = spla.LinearOperator((k, k), matvec=lu.solve, dtype=float)
    v0 = np.random.default_rng(seed).standard_normal(k)
    ev = spla.eigsh(op, k=count, which="LM", v0=v0, return_eigenvectors=False, tol=1e-10)
    return np.sort(1.0 / np.sqrt(np.abs(ev)))


def largest_singular_value(A, seed=0):
    A = sp.csr_matrix(A)
    AT = A.T.tocsr()
    s, _ = power_iteration_norm(lambda x: A @ x, lambda y: AT @ y, A.shape[1], seed, max_iter=200, rtol=1e-8)
    return s


@dataclass
class KernelReport:
    kernel_dim: int
    cokernel_dim: int
    index: int
    smallest: list
    sigma_max: float
    rule: str
    shape: tuple
    notes: list = field(default_factory=list)

    def to_dict(self):
        return {
            "dim_ker_D": self.kernel_dim,
            "dim_ker_D_star": self.cokernel_dim,
            "index": self.index,
            "smallest_singular_values": [float(x) for x in self.smallest],
            "sigma_max": self.sigma_max,
            "rule": self.rule,
            "shape": list(self.shape),
            "discretization": "midpoint cells, end values in the decaying asymptotic eigenspaces",
            "notes": self.notes,
        }


def count_near_zero(svals, sigma_max, rtol=1e-8, gap=1e-3):
    """Singular values below ``rtol * sigma_max``, or below a relative spectral gap ``gap``."""
    s = np.sort(np.asarray(svals))
    n = int(np.sum(s < rtol * sigma_max))
    for i in range(len(s) - 1):
        if s[i] < gap * s[i + 1]:
            n = max(n, i + 1)
    return n


def kernel_dimensions(curve, count=4, rtol=1e-8, gap=1e-3, seed=0):
    """``(dim ker D, dim ker D*)`` of the midpoint linearization at ``curve``.

    ``D*`` is the transpose in the plain L2 pairing.  With rank ``r`` of the
    ``m x n`` matrix, ``dim ker D = n - r`` and ``dim ker D* = m - r``.
    """
    D, info = box_linearization(curve)
    m, n = D.shape
    smax = largest_singular_value(D, seed)
    small = smallest_singular_values(D, count, seed)
    z = count_near_zero(small, smax, rtol, gap)
    r = min(m, n) - z
    notes = []
    if info["zero_modes_minus"] or info["zero_modes_plus"]:
        notes.append("an asymptotic operator has zero eigenvalues; the end conditions are incomplete")
    rule = f"sigma < {rtol:g} sigma_max or a gap factor {gap:g} below the next singular value"
    return KernelReport(n - r, m - r, info["index"], list(small), smax, rule, (m, n), notes)
