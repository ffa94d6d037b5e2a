"""Twisted periodic orbits in the rotating frame.

A loop ``v`` solves ``i dv/dt + grad G_t(v) = 0`` where ``G_t = F o phi_t`` and
``phi_t`` is the free field flow; ``v(t) = phi_{-t} x(t)`` for an honest
``T``-periodic solution ``x`` of the coupled system (the round-trip test in the
test suite pins this sign).  ``i`` acts on the canonical pair ``(x, y)`` of a
slot as ``(x, y) -> (y, -x)``, which is multiplication by ``i`` on
``z = (x - i y)/sqrt(2)``.

Residuals are evaluated by collocation on ``N_t = 4 (2 m_max + 1)`` uniform
nodes followed by a discrete Fourier projection.  The Hessian operator is
assembled from Fourier coefficients of the nodal second derivatives, which
makes it the exact Jacobian of the discretized residual.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import solve_ivp

from .dynamics import F_derivatives
from .mode_space import LoopBasis, LoopVector, loop_norm_standard
from .spectrum import require_admissible
from .validation import ConvergenceError, ValidationError, check_positive

KERNEL_RTOL = 1e-8
TIKHONOV = 1e-10
SPARSE_DROP = 1e-13
DEFAULT_THRESHOLD = 1e-6


class OrbitProblem:
    """Collocation machinery for one system on one loop basis."""

    def __init__(self, sys, basis=None, m_max=None):
        if basis is None:
            basis = LoopBasis(sys.spec, sys.modes, m_max=m_max, lam=sys.lam)
        self.sys = sys
        self.basis = basis
        b = basis
        self.n_t = 4 * (2 * b.m_max + 1)
        self.t = np.arange(self.n_t) * b.T / self.n_t
        # integer resonance index k_s with lambda_s = eps_s + k_s omega
        self.k_res = np.rint((b.slot_lam - b.slot_eps) / b.omega).astype(np.int64)
        self.twist = np.exp(-1j * b.slot_eps[:, None] * self.t[None, :])  # (S, n_t)
        self.rot = np.exp(1j * b.slot_lam[:, None] * self.t[None, :])
        self.idx = np.mod(b.m, self.n_t)
        if b.m_max < np.max(np.abs(self.k_res)):
            self.alias_warning = "m_max does not resolve the largest eigenvalue; resonant bands are truncated"
        else:
            self.alias_warning = None

    # nodal evaluation ---------------------------------------------------------------
    def nodal(self, coeffs):
        """Rotating-frame slot values ``z_s(t_j)``, shape ``(..., S, n_t)``."""
        A = np.zeros(coeffs.shape[:-1] + (self.n_t,), dtype=complex)
        A[..., self.idx] = coeffs
        return self.twist * (self.n_t * np.fft.ifft(A, axis=-1))

    def project(self, g):
        """Twisted Fourier coefficients of nodal values ``g`` (shape ``(..., S, n_t)``)."""
        F = np.fft.fft(g / self.twist, axis=-1) / self.n_t
        return F[..., self.idx]

    def physical_state(self, z_rot):
        """Canonical coordinates at the nodes, flattened to points: q, p ``(P, N)``, alpha, beta ``(P, M)``.

        For batched input the point index runs over batch then time.
        """
        b = self.basis
        z = z_rot * self.rot
        x = np.swapaxes(np.sqrt(2) * z.real, -1, -2).reshape(-1, b.n_slots)
        y = np.swapaxes(-np.sqrt(2) * z.imag, -1, -2).reshape(-1, b.n_slots)
        return x[:, : b.N], y[:, : b.N], x[:, b.N :], y[:, b.N :]

    def evaluate_at(self, coeffs, t):
        """Physical canonical state at arbitrary times (direct summation)."""
        b = self.basis
        t = np.atleast_1d(np.asarray(t, dtype=float))
        E = np.exp(1j * b.omega * np.outer(b.m, t))  # (K, P)
        z = (coeffs @ E) * np.exp(-1j * b.slot_eps[:, None] * t[None]) * np.exp(1j * b.slot_lam[:, None] * t[None])
        x = np.sqrt(2) * z.real
        y = -np.sqrt(2) * z.imag
        return x, y

    # residual --------------------------------------------------------------------
    def gradient_nodes(self, coeffs):
        b = self.basis
        batch = coeffs.shape[:-2]
        q, p, alpha, _ = self.physical_state(self.nodal(coeffs))
        t = np.tile(self.t, int(np.prod(batch, dtype=int)))
        d = F_derivatives(self.sys, q, p, alpha, t, order=1)
        gx = np.concatenate([d["dq"], d["dalpha"]], axis=1)
        gy = np.concatenate([d["dp"], np.zeros((len(t), b.M))], axis=1)
        ghat = ((gx - 1j * gy) / np.sqrt(2)).reshape(batch + (self.n_t, b.n_slots))
        return np.swapaxes(ghat, -1, -2) / self.rot  # back to the rotating frame

    def residual(self, coeffs):
        """Loop coefficients of ``i dv/dt + grad G_t(v)``; leading batch axes are allowed."""
        return -self.basis.symbol * coeffs + self.project(self.gradient_nodes(coeffs))

    # Hessian -------------------------------------------------------------------------
    def hessian(self, coeffs):
        """Sparse packed-real matrix of the multiplication operator ``S_u``."""
        b = self.basis
        N, M = b.N, b.M
        q, p, alpha, _ = self.physical_state(self.nodal(coeffs))
        d = F_derivatives(self.sys, q, p, alpha, self.t, order=2)
        pairs = []  # (row slot, col slot, A_p(t), B_p(t))
        eye = np.eye(N)
        for i in range(N):
            for j in range(N):
                hxx = d["qq"][:, i, j]
                pairs.append((i, j, 0.5 * (hxx + eye[i, j]), 0.5 * (hxx - eye[i, j])))
        qa = d["q_alpha"]  # (n_t, M, N)
        for n in range(M):
            for j in range(N):
                h = qa[:, n, j]
                if not np.any(h):
                    continue
                pairs.append((N + n, j, 0.5 * h, 0.5 * h))
                pairs.append((j, N + n, 0.5 * h, 0.5 * h))
        f2 = d["alpha_alpha_f2"]
        if np.any(f2):
            w = d["psi_over_sl"]
            for n in range(M):
                for n2 in range(M):
                    h = f2 * w[:, n] * w[:, n2]
                    if np.any(h):
                        pairs.append((N + n, N + n2, 0.5 * h, 0.5 * h))
        return self._assemble(pairs)

    def _assemble(self, pairs):
        b = self.basis
        K, mm, nt = b.K, b.m_max, self.n_t
        rows, cols, vals = [], [], []
        if not pairs:
            return sp.csr_matrix((b.dim, b.dim))
        Ab = np.fft.fft(np.array([pr[2] for pr in pairs]), axis=1) / nt
        Bb = np.fft.fft(np.array([pr[3] for pr in pairs]), axis=1) / nt
        mrow = b.m
        for (s, s2, _, _), Ah, Bh in zip(pairs, Ab, Bb):
            for hat, kind in ((Ah, "A"), (Bh, "B")):
                scale = np.max(np.abs(hat))
                if scale == 0.0:
                    continue
                f = np.nonzero(np.abs(hat) > SPARSE_DROP * scale)[0]
                if kind == "A":
                    shift = self.k_res[s2] - self.k_res[s]
                    base = mrow[None, :] - shift - f[:, None]
                else:
                    shift = self.k_res[s] + self.k_res[s2]
                    base = f[:, None] - shift - mrow[None, :]
                mcol = np.mod(base + mm, nt) - mm
                ok = mcol <= mm
                fi, mi = np.nonzero(ok)
                v = hat[f[fi]]
                r = s * K + mi
                c = s2 * K + (mcol[fi, mi] + mm)
                vr, vi = v.real, v.imag
                if kind == "A":
                    blk = ((0, 0, vr), (0, 1, -vi), (1, 0, vi), (1, 1, vr))
                else:
                    blk = ((0, 0, vr), (0, 1, vi), (1, 0, vi), (1, 1, -vr))
                for di, dj, val in blk:
                    rows.append(2 * r + di)
                    cols.append(2 * c + dj)
                    vals.append(val)
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        S = sp.coo_matrix((vals, (rows, cols)), shape=(b.dim, b.dim)).tocsr()
        S.eliminate_zeros()
        return S

    def time_operator(self):
        """Packed diagonal of ``i d/dt``: ``-(2 pi m/T - eps)`` on every entry."""
        return sp.diags(-self.basis.packed_symbol())


@dataclass(eq=False)
class OperatorMatrix:
    """Sparse operator with declared input/output weight profiles.

    Weights are squared per-entry norm weights of packed vectors; the weighted
    matrix is ``diag(sqrt(w_out)) A diag(1/sqrt(w_in))``.
    """

    matrix: sp.spmatrix
    basis: LoopBasis
    in_profile: str = "standard"
    out_profile: str = "standard"
    S: sp.spmatrix = None
    ell: int = None

    def weighted(self, w_in, w_out):
        return sp.diags(np.sqrt(w_out)) @ self.matrix @ sp.diags(1.0 / np.sqrt(w_in))

    def block_index(self, ell):
        """Packed indices of the retained part (particle plus ``|n| <= ell``) and of its complement."""
        r = self.basis.packed_mode_radius()
        field = self.basis.packed_field_mask()
        keep = (~field) | (r <= ell + 1e-12)
        return np.nonzero(keep)[0], np.nonzero(~keep)[0]

    def blocks(self, ell=None):
        ell = self.ell if ell is None else ell
        S = self.S.tocsr()
        i, j = self.block_index(ell)
        return {
            "S_ell": S[i][:, i],
            "S_off_upper": S[i][:, j],
            "S_off_lower": S[j][:, i],
            "S_perp": S[j][:, j],
            "index_ell": i,
            "index_perp": j,
        }

    def toarray(self):
        return self.matrix.toarray()


def orbit_residual(u, problem):
    """Residual ``i dv/dt + grad G_t(v)`` as a LoopVector."""
    return LoopVector(problem.basis, problem.residual(u.coeffs))


def hessian_operator(orbit, problem=None, tol=None):
    problem = problem or orbit.problem
    if tol is not None and orbit.residual_norm > tol:
        raise ValidationError("orbit", f"residual {orbit.residual_norm:.3e} above tolerance {tol:.1e}")
    S = problem.hessian(orbit.loop.coeffs)
    return OperatorMatrix(S, problem.basis, S=S)


def assemble_linearization(orbit, ell=None, problem=None):
    """``i d/dt + S_u`` with block splitting at radius ``ell``."""
    problem = problem or orbit.problem
    S = problem.hessian(orbit.loop.coeffs)
    L = (problem.time_operator() + S).tocsr()
    ell = problem.sys.modes.n_max if ell is None else ell
    if ell > problem.sys.modes.n_max:
        raise ValidationError("ell", "must not exceed n_max")
    return OperatorMatrix(L, problem.basis, "modified", "standard", S=S, ell=ell)


@dataclass(eq=False)
class Orbit:
    loop: LoopVector
    residual_norm: float
    problem: OrbitProblem
    iterations: int = 0
    converged: bool = True
    trail: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def physical_initial_state(self):
        x, y = self.problem.evaluate_at(self.loop.coeffs, 0.0)
        return x[:, 0], y[:, 0]


def residual_norm(problem, R, k=None, h_prime=None):
    spec = problem.sys.spec
    k = spec.k if k is None else k
    h_prime = _h_prime(spec) if h_prime is None else h_prime
    return loop_norm_standard(LoopVector(problem.basis, R), k - 1, h_prime)


def _h_prime(spec):
    return spec.h_prime if spec.h_prime is not None else 0.5 * (2 * spec.d + spec.h)


def decoupled_initial(problem, q_star, p_star=None):
    """Constant particle loop at ``(q*, p*)`` with zero field."""
    b = problem.basis
    c = np.zeros((b.n_slots, b.K), dtype=complex)
    q_star = np.atleast_1d(np.asarray(q_star, dtype=float))
    p_star = np.zeros_like(q_star) if p_star is None else np.atleast_1d(p_star)
    c[: b.N, b.m_max] = (q_star - 1j * p_star) / np.sqrt(2)
    return LoopVector(b, c)


def newton_orbit(initial, problem, tol=1e-10, max_iter=30, k=None, h_prime=None, check_admissible=True):
    """Damped Newton on the collocation residual.

    Armijo backtracking on the squared residual norm (factor 1/2, at most 20
    halvings); a singular Jacobian is replaced by a Tikhonov-regularized normal
    equation with parameter ``1e-10 * trace / dim``.
    """
    check_positive(tol, "tol")
    if check_admissible:
        require_admissible(problem.sys.spec, problem.sys.modes)
    b = problem.basis
    spec = problem.sys.spec
    k = spec.k if k is None else k
    hp = _h_prime(spec) if h_prime is None else h_prime
    w_out = b.weights_standard(k - 1, hp)
    x = initial.packed()

    def merit(xv):
        R = b.pack(problem.residual(b.unpack(xv)))
        return float(np.sum(w_out * R * R)), R

    phi, R = merit(x)
    trail = [np.sqrt(phi)]
    notes = []
    it = 0
    while np.sqrt(phi) >= tol and it < max_iter:
        it += 1
        J = (problem.time_operator() + problem.hessian(b.unpack(x))).tocsc()
        try:
            lu = spla.splu(J)
            dx = -lu.solve(R)
            if not np.all(np.isfinite(dx)):
                raise RuntimeError
        except (RuntimeError, ValueError):
            JtJ = (J.T @ J).tocsc()
            tau = TIKHONOV * JtJ.diagonal().sum() / b.dim
            dx = -spla.spsolve(JtJ + tau * sp.identity(b.dim, format="csc"), J.T @ R)
            notes.append(f"iteration {it}: singular Jacobian, Tikhonov step tau={tau:.3e}")
        step = 1.0
        for _ in range(21):
            phi_new, R_new = merit(x + step * dx)
            if phi_new <= (1 - 1e-4 * step) * phi or phi_new < tol**2:
                break
            step *= 0.5
        else:
            return Orbit(LoopVector.from_packed(b, x), np.sqrt(phi), problem, it, False, trail, notes + ["line search failed"])
        x = x + step * dx
        phi, R = phi_new, R_new
        trail.append(np.sqrt(phi))
    ok = np.sqrt(phi) < tol
    return Orbit(LoopVector.from_packed(b, x), float(np.sqrt(phi)), problem, it, bool(ok), trail, notes)


def require_converged(orbit):
    if not orbit.converged:
        raise ConvergenceError(f"orbit residual {orbit.residual_norm:.3e} after {orbit.iterations} iterations", orbit.trail)
    return orbit


# singular values ------------------------------------------------------------------------


def power_iteration_norm(matvec, rmatvec, n, seed=0, max_iter=200, rtol=1e-10):
    """Largest singular value by power iteration on ``A^T A`` from a seeded start."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    sigma = 0.0
    for _ in range(max_iter):
        y = rmatvec(matvec(x))
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0, x
        new = np.sqrt(ny)
        x = y / ny
        if sigma > 0 and abs(new - sigma) <= rtol * new:
            sigma = new
            break
        sigma = new
    return float(sigma), x


def smallest_singular_value(A, seed=0, max_iter=200, rtol=1e-10):
    """``sigma_min`` by inverse power iteration on the Gram system (sparse LU of ``A``)."""
    A = sp.csc_matrix(A)
    n = A.shape[0]
    try:
        lu = spla.splu(A)
    except RuntimeError:
        return 0.0
    test = lu.solve(np.ones(n))
    if not np.all(np.isfinite(test)):
        return 0.0
    s, _ = power_iteration_norm(lu.solve, lambda y: lu.solve(y, trans="T"), n, seed, max_iter, rtol)
    return 1.0 / s if s > 0 else float("inf")


def dense_singular_values(A):
    A = A.toarray() if sp.issparse(A) else np.asarray(A)
    return sla.svdvals(A)


def kernel_dimension(svals, rtol=KERNEL_RTOL):
    svals = np.asarray(svals)
    if svals.size == 0:
        return 0
    return int(np.sum(svals < rtol * svals.max()))


@dataclass
class NondegeneracyReport:
    sigma_min: float
    sigma_min_dense: float | None
    threshold: float
    verdict: bool
    kernel_dim: int | None
    return_map_distances: np.ndarray | None = None
    decoupled_baseline: np.ndarray | None = None
    ratio_profile: np.ndarray | None = None
    return_map_verdict: bool | None = None
    sweep: list = field(default_factory=list)
    weights: str = "modified-k/h' -> standard-(k-1)/h'"

    def to_dict(self):
        def arr(x):
            return None if x is None else [float(v) for v in np.asarray(x)]

        return {
            "sigma_min": self.sigma_min,
            "sigma_min_dense": self.sigma_min_dense,
            "threshold": self.threshold,
            "verdict": self.verdict,
            "kernel_dim": self.kernel_dim,
            "weights": self.weights,
            "return_map_distances": arr(self.return_map_distances),
            "decoupled_baseline": arr(self.decoupled_baseline),
            "ratio_profile": arr(self.ratio_profile),
            "return_map_verdict": self.return_map_verdict,
            "sweep": self.sweep,
        }


def weighted_linearization(op, k, h_prime):
    b = op.basis
    return op.weighted(b.weights_modified(k, h_prime), b.weights_standard(k - 1, h_prime)).tocsc()


def nondegeneracy_margin(orbit, k=None, h_prime=None, ell=None, threshold=DEFAULT_THRESHOLD, dense_limit=2500, seed=0,
                         with_return_map=True, sweep=None):
    """Smallest singular value of ``i d/dt + S_u`` from modified-(k,h') to standard-(k-1,h')."""
    spec = orbit.problem.sys.spec
    k = spec.k if k is None else k
    h_prime = _h_prime(spec) if h_prime is None else h_prime
    op = assemble_linearization(orbit, ell)
    Aw = weighted_linearization(op, k, h_prime)
    smin = smallest_singular_value(Aw, seed=seed)
    sdense = None
    kdim = None
    if Aw.shape[0] <= dense_limit:
        sv = dense_singular_values(Aw)
        sdense = float(sv.min())
        kdim = kernel_dimension(sv)
    rep = NondegeneracyReport(smin, sdense, threshold, bool(smin > threshold), kdim)
    if with_return_map:
        dist = linearized_return_map(orbit)["distances"]
        b = orbit.problem.basis
        rep.return_map_distances = dist
        rep.return_map_verdict = bool(np.min(dist) > threshold)
        rep.decoupled_baseline = np.sort(2 * np.abs(np.sin(b.eps * b.T / 2)))
    for kk, hh in sweep or []:
        Awk = weighted_linearization(op, kk, hh)
        s = smallest_singular_value(Awk, seed=seed)
        rep.sweep.append({"k": kk, "h_prime": hh, "sigma_min": s, "verdict": bool(s > threshold)})
    return rep


# return map -----------------------------------------------------------------------------


def linearized_return_map(orbit, rtol=1e-12, atol=1e-13):
    """Monodromy of the physical variational equation over one period.

    State ordering is slot-major canonical pairs ``(x_s, y_s)``.  The twisted
    return map equals ``phi^A_T`` composed with the rotating-frame monodromy,
    which is the physical monodromy computed here.
    """
    pb = orbit.problem
    b = pb.basis
    sys = pb.sys
    N, M = b.N, b.M
    S = b.n_slots
    n = 2 * S
    J1 = np.array([[0.0, 1.0], [-1.0, 0.0]])
    J = np.kron(np.eye(S), J1)
    coeffs = orbit.loop.coeffs
    HA = np.zeros((n, n))
    for s in range(N, S):
        HA[2 * s, 2 * s] = HA[2 * s + 1, 2 * s + 1] = b.slot_lam[s]

    def hess(t):
        x, y = pb.evaluate_at(coeffs, t)
        q, p, alpha = x[:N, 0][None], y[:N, 0][None], x[N:, 0][None]
        d = F_derivatives(sys, q, p, alpha, np.array([t]), order=2)
        H = HA.copy()
        ix = 2 * np.arange(S)
        H[np.ix_(ix[:N], ix[:N])] += d["qq"][0]
        H[2 * np.arange(N) + 1, 2 * np.arange(N) + 1] += 1.0
        qa = d["q_alpha"][0]  # (M, N)
        H[np.ix_(ix[N:], ix[:N])] += qa
        H[np.ix_(ix[:N], ix[N:])] += qa.T
        f2 = d["alpha_alpha_f2"][0]
        if f2:
            w = d["psi_over_sl"][0]
            H[np.ix_(ix[N:], ix[N:])] += f2 * np.outer(w, w)
        return H

    def rhs(t, y):
        Phi = y.reshape(n, n)
        return (J @ hess(t) @ Phi).reshape(-1)

    sol = solve_ivp(rhs, (0.0, b.T), np.eye(n).reshape(-1), method="DOP853", rtol=rtol, atol=atol)
    Phi = sol.y[:, -1].reshape(n, n)
    mu = np.linalg.eigvals(Phi)
    dist = np.sort(np.abs(mu - 1.0))
    sympl = float(np.max(np.abs(Phi.T @ J @ Phi - J)))
    # per-slot distances from the 2x2 diagonal blocks; exact when the slots decouple
    slot = np.array([np.min(np.abs(np.linalg.eigvals(Phi[2 * s : 2 * s + 2, 2 * s : 2 * s + 2]) - 1.0))
                     for s in range(S)])
    off = Phi - sla.block_diag(*[Phi[2 * s : 2 * s + 2, 2 * s : 2 * s + 2] for s in range(S)])
    return {"monodromy": Phi, "eigenvalues": mu, "distances": dist, "slot_distances": slot,
            "off_block_size": float(np.max(np.abs(off))), "symplectic_defect": sympl}
