"""Coupled particle-field dynamics on the flat torus.

Field coordinates are the coefficients ``(a_n, b_n)`` of ``(phi, pi)`` in the
real L2-orthonormal basis ``xi_n`` (see :func:`mode_space.real_basis_values`).
With ``B = diag(lambda_n)`` the equations of motion for linear coupling are::

    q'   = p
    p'   = -sum_n a_n grad(rho_n xi_n)(q) - grad V_t(q)
    a_n' = lambda_n b_n
    b_n' = -lambda_n a_n - rho_n xi_n(q) / lambda_n

They are Hamiltonian for the symplectic form ``dq^dp + sum lambda_n da_n^db_n``
and the energy ``1/2 sum lambda_n^2 (a^2+b^2) + kappa f(r) + |p|^2/2 + V_t(q)``
with ``r = (phi * rho)(q)``.  In canonical coordinates ``alpha = sqrt(lambda) a``,
``beta = sqrt(lambda) b`` the form is standard, which is what the orbit code uses.
"""

from dataclasses import dataclass, field

import numpy as np

from .mode_space import real_basis_values
from .validation import ValidationError, check_positive


@dataclass(eq=False)
class FieldVector:
    a: np.ndarray
    b: np.ndarray
    lam: np.ndarray

    def complex_coefficients(self):
        """H-normalized coefficients ``lambda^{1/2} (a + i b) / sqrt(2)``."""
        return np.sqrt(self.lam) * (self.a + 1j * self.b) / np.sqrt(2)

    def half_norm_sq(self):
        """``||phi||^2`` in H^{1/2}, i.e. ``sum lambda a^2``."""
        return float(np.sum(self.lam * self.a**2))

    def copy(self):
        return FieldVector(self.a.copy(), self.b.copy(), self.lam)

    @classmethod
    def zeros(cls, lam):
        lam = np.asarray(lam, dtype=float)
        return cls(np.zeros_like(lam), np.zeros_like(lam), lam)


@dataclass(eq=False)
class PhasePoint:
    q: np.ndarray
    p: np.ndarray
    field: FieldVector

    def __post_init__(self):
        self.q = np.mod(np.asarray(self.q, dtype=float), 2 * np.pi)
        self.p = np.asarray(self.p, dtype=float)

    def as_array(self):
        return np.concatenate([self.q, self.p, self.field.a, self.field.b])

    def copy(self):
        return PhasePoint(self.q.copy(), self.p.copy(), self.field.copy())


@dataclass(frozen=True)
class ShapeFunction:
    """Gaussian charge profile, ``rho_hat(n) = exp(-sigma^2 |n|^2 / 2)``."""

    sigma: float = 0.5

    def coefficients(self, vectors):
        sq = np.sum(np.atleast_2d(vectors).astype(float) ** 2, axis=1)
        return np.exp(-0.5 * self.sigma**2 * sq)


def _series(c, t, omega):
    # c is a number or {"mean": m, "cos": [...], "sin": [...]}; returns value, d/dt
    if isinstance(c, dict):
        val = float(c.get("mean", 0.0))
        der = 0.0
        for j, cj in enumerate(c.get("cos", []), start=1):
            val += cj * np.cos(j * omega * t)
            der -= cj * j * omega * np.sin(j * omega * t)
        for j, sj in enumerate(c.get("sin", []), start=1):
            val += sj * np.sin(j * omega * t)
            der += sj * j * omega * np.cos(j * omega * t)
        return val, der
    return float(c), 0.0


@dataclass
class CouplingSpec:
    """Interaction ``kappa * f_t(r)`` and external potential ``V_t``.

    ``interaction`` is ``"polynomial"`` (``f = sum_j poly[j-1] r^j`` with
    coefficients that may be finite Fourier series in ``t``) or ``"arctan"``
    (``f = arctan(r)``).  ``external`` is a list of terms
    ``{"k": [...], "amp": A, "harmonic": j, "phase": phi}`` contributing
    ``A * s(k) * cos(k.q - j (2 pi/T) t + phi)``, where the smoothing factor
    ``s(k)`` is ``rho_hat(k)`` when ``smear_external`` is true and 1 otherwise.
    """

    kappa: float = 1.0
    interaction: str = "polynomial"
    poly: list = field(default_factory=lambda: [1.0])
    external: list = field(default_factory=list)
    smear_external: bool = True

    def __post_init__(self):
        if self.interaction not in ("polynomial", "arctan"):
            raise ValidationError("coupling.interaction", f"unknown interaction {self.interaction!r}")

    def f_derivs(self, r, t, omega):
        """``f, f', f''`` at ``r`` (already multiplied by kappa)."""
        r = np.asarray(r, dtype=float)
        if self.interaction == "arctan":
            f0 = np.arctan(r)
            f1 = 1.0 / (1.0 + r**2)
            f2 = -2.0 * r / (1.0 + r**2) ** 2
        else:
            f0 = np.zeros_like(r)
            f1 = np.zeros_like(r)
            f2 = np.zeros_like(r)
            for j, c in enumerate(self.poly, start=1):
                cj, _ = _series(c, t, omega)
                f0 = f0 + cj * r**j
                f1 = f1 + j * cj * r ** (j - 1)
                if j >= 2:
                    f2 = f2 + j * (j - 1) * cj * r ** (j - 2)
        return self.kappa * f0, self.kappa * f1, self.kappa * f2

    def external_terms(self, N, shape):
        out = []
        for term in self.external:
            kvec = np.asarray(term.get("k", [1] * N), dtype=float).reshape(N)
            amp = float(term.get("amp", 0.0))
            if self.smear_external:
                amp *= float(shape.coefficients(kvec[None])[0])
            out.append((kvec, amp, int(term.get("harmonic", 0)), float(term.get("phase", 0.0))))
        return out

    def potential(self, q, t, omega, shape):
        """``V_t(q)``, gradient and Hessian; ``q`` has shape ``(P, N)``."""
        q = np.atleast_2d(q)
        P, N = q.shape
        V = np.zeros(P)
        g = np.zeros((P, N))
        H = np.zeros((P, N, N))
        t = np.broadcast_to(np.asarray(t, dtype=float), (P,))
        for kvec, amp, j, ph in self.external_terms(N, shape):
            arg = q @ kvec - j * omega * t + ph
            c, s = np.cos(arg), np.sin(arg)
            V += amp * c
            g -= amp * s[:, None] * kvec[None]
            H -= amp * c[:, None, None] * np.outer(kvec, kvec)[None]
        return V, g, H

    def is_autonomous(self):
        if any(int(t.get("harmonic", 0)) != 0 for t in self.external):
            return False
        return not any(isinstance(c, dict) for c in self.poly)

    def to_dict(self):
        return {
            "kappa": self.kappa,
            "interaction": self.interaction,
            "poly": self.poly,
            "external": self.external,
            "smear_external": self.smear_external,
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(**{k: doc[k] for k in ("kappa", "interaction", "poly", "external", "smear_external") if k in doc})


@dataclass
class System:
    """Everything needed to evaluate the coupled dynamics."""

    spec: object
    modes: object
    lam: np.ndarray
    coupling: CouplingSpec
    shape: ShapeFunction = field(default_factory=ShapeFunction)

    def __post_init__(self):
        self.rho = self.shape.coefficients(self.modes.vectors)
        self.omega = 2 * np.pi / self.spec.T


def make_system(spec, modes, coupling=None, shape=None):
    from .spectrum import eigenvalues

    return System(spec, modes, eigenvalues(spec, modes), coupling or CouplingSpec(), shape or ShapeFunction())


def linear_flow(v, t, spec=None):
    """Free field flow: per-mode rotation by angle ``lambda_n t``."""
    c, s = np.cos(v.lam * t), np.sin(v.lam * t)
    return FieldVector(c * v.a + s * v.b, -s * v.a + c * v.b, v.lam)


def shape_convolution(v, shape, q, modes):
    """``(phi * rho)(q) = sum a_n rho_hat(n) xi_n(q)`` and its gradient in ``q``."""
    rho = shape.coefficients(modes.vectors)
    val, grad, _ = real_basis_values(modes, np.atleast_2d(q))
    w = v.a * rho
    return float(val[0] @ w), grad[0].T @ w


def _interaction_terms(sys, q, a, t):
    # r, grad_q r, hess_q r, psi = rho xi(q), grad psi, hess psi
    val, grad, hess = real_basis_values(sys.modes, np.atleast_2d(q))
    psi = val[0] * sys.rho
    gpsi = grad[0] * sys.rho[:, None]
    hpsi = hess[0] * sys.rho[:, None, None]
    r = float(psi @ a)
    return r, psi, gpsi, hpsi


def hamiltonian_terms(u, t, sys):
    a, b = u.field.a, u.field.b
    lam = sys.lam
    r, *_ = _interaction_terms(sys, u.q, a, t)
    f0, _, _ = sys.coupling.f_derivs(r, t, sys.omega)
    V, _, _ = sys.coupling.potential(u.q[None], t, sys.omega, sys.shape)
    return {
        "field": float(0.5 * np.sum(lam**2 * (a**2 + b**2))),
        "interaction": float(f0),
        "particle": float(0.5 * u.p @ u.p + V[0]),
    }


def hamiltonian(u, t, sys):
    """Total energy; the sum of :func:`hamiltonian_terms`."""
    parts = hamiltonian_terms(u, t, sys)
    return parts["field"] + parts["interaction"] + parts["particle"]


def vector_field(u, t, sys):
    """Tangent ``(dq, dp, da, db)`` of the coupled system at ``u``."""
    a, b = u.field.a, u.field.b
    lam = sys.lam
    r, psi, gpsi, _ = _interaction_terms(sys, u.q, a, t)
    _, f1, _ = sys.coupling.f_derivs(r, t, sys.omega)
    _, gV, _ = sys.coupling.potential(u.q[None], t, sys.omega, sys.shape)
    dq = u.p.copy()
    dp = -f1 * (gpsi.T @ a) - gV[0]
    da = lam * b
    db = -lam * a - f1 * psi / lam
    return dq, dp, da, db


def _kick(u, t, h, sys):
    a = u.field.a
    r, psi, gpsi, _ = _interaction_terms(sys, u.q, a, t)
    _, f1, _ = sys.coupling.f_derivs(r, t, sys.omega)
    _, gV, _ = sys.coupling.potential(u.q[None], t, sys.omega, sys.shape)
    p = u.p - h * (f1 * (gpsi.T @ a) + gV[0])
    b = u.field.b - h * f1 * psi / sys.lam
    return PhasePoint(u.q, p, FieldVector(a.copy(), b, sys.lam))


def strang_step(u, t, dt, sys):
    """Half kick, exact drift (particle streaming and free field rotation), half kick."""
    check_positive(dt, "dt")
    w = _kick(u, t, 0.5 * dt, sys)
    w = PhasePoint(w.q + dt * w.p, w.p, linear_flow(w.field, dt))
    return _kick(w, t + dt, 0.5 * dt, sys)


def integrate(u, t0, t_final, dt, sys, record_every=1):
    """Fixed-step Strang integration; returns ``(times, states)``."""
    n = int(round((t_final - t0) / dt))
    if n < 1 or abs(n * dt - (t_final - t0)) > 1e-9 * max(1.0, abs(t_final)):
        raise ValidationError("dt", "t_final - t0 must be a positive integer multiple of dt")
    times, states = [t0], [u]
    t = t0
    for i in range(1, n + 1):
        u = strang_step(u, t, dt, sys)
        t = t0 + i * dt
        if i % record_every == 0 or i == n:
            times.append(t)
            states.append(u)
    return np.array(times), states


# canonical-coordinate derivatives of the non-quadratic part F -----------------------


def F_derivatives(sys, q, p, alpha, t, order=2):
    """Gradient and Hessian of ``F = |p|^2/2 + V_t + kappa f_t(r)`` at many points.

    Inputs have leading dimension ``P`` (collocation nodes).  Coordinates are
    canonical: ``(q, p, alpha, beta)`` with ``alpha = sqrt(lambda) a``; ``F``
    does not depend on ``beta``.  Returns a dict of arrays.
    """
    q = np.atleast_2d(q)
    P, N = q.shape
    lam = sys.lam
    sl = np.sqrt(lam)
    a = alpha / sl[None]
    val, grad, hess = real_basis_values(sys.modes, q)
    psi = val * sys.rho[None]  # (P, M)
    gpsi = grad * sys.rho[None, :, None]  # (P, M, N)
    r = np.sum(psi * a, axis=1)
    t = np.broadcast_to(np.asarray(t, dtype=float), (P,))
    f0, f1, f2 = (np.broadcast_to(x, (P,)) for x in sys.coupling.f_derivs(r, t, sys.omega))
    V, gV, HV = sys.coupling.potential(q, t, sys.omega, sys.shape)
    gr = np.einsum("pmn,pm->pn", gpsi, a)
    out = {
        "F": 0.5 * np.sum(p**2, axis=1) + V + f0,
        "dq": gV + f1[:, None] * gr,
        "dp": p.copy(),
        "dalpha": f1[:, None] * psi / sl[None],
    }
    if order < 2:
        return out
    hpsi = hess * sys.rho[None, :, None, None]
    Hr = np.einsum("pmij,pm->pij", hpsi, a)
    out["qq"] = HV + f1[:, None, None] * Hr + f2[:, None, None] * gr[:, :, None] * gr[:, None, :]
    out["q_alpha"] = (f1[:, None, None] * gpsi + f2[:, None, None] * gr[:, None, :] * psi[:, :, None]) / sl[
        None, :, None
    ]  # (P, M, N)
    out["alpha_alpha_f2"] = f2  # alpha-alpha block is f2 * (psi/sl) (psi/sl)^T
    out["psi_over_sl"] = psi / sl[None]
    return out


# growth conditions ------------------------------------------------------------------


def check_growth_conditions(coupling, sys, q_points=32, p_max=10.0, p_points=41, r_max=5.0, t=0.0):
    """Grid evaluation of the three growth conditions on the particle part.

    (F1) ``p . dF/dp - F >= c0 |p|^2 - c1``; (F2) ``|grad_q F| <= c2 (1+|p|^2)``
    and ``|grad_p F| <= c2 (1+|p|)``; (F3) bounded ``f'``.  Constants are fitted
    on the grid, so a pass is evidence on the sampled box only.
    """
    N = sys.spec.N
    g1 = np.linspace(0, 2 * np.pi, q_points, endpoint=False)
    gp = np.linspace(-p_max, p_max, p_points)
    if N == 1:
        Q = g1[:, None]
        Pp = gp[:, None]
    else:
        Q = np.stack(np.meshgrid(*([g1] * N), indexing="ij"), -1).reshape(-1, N)
        Pp = np.stack(np.meshgrid(*([gp] * N), indexing="ij"), -1).reshape(-1, N)
    V, gV, _ = coupling.potential(Q, t, sys.omega, sys.shape)
    Vq = V[:, None]
    pp = np.sum(Pp**2, axis=1)[None, :]
    # F = |p|^2/2 + V: p.dF/dp - F = |p|^2/2 - V
    G = 0.5 * pp - Vq
    nz = pp > 0
    G0 = -Vq
    ratio = np.where(nz, (G - G0) / np.where(nz, pp, 1.0), np.inf)
    c0 = float(np.min(ratio))
    c1 = float(np.max(c0 * pp - G))
    c1 = max(c1, 0.0)
    margin1 = float(np.min(G - (c0 * pp - c1)))
    gq = np.linalg.norm(gV, axis=1)[:, None]
    gpn = np.sqrt(pp)
    c2 = float(max(np.max(gq / (1 + pp)), np.max(gpn / (1 + gpn))))
    rr = np.linspace(-r_max, r_max, 2001)
    rr2 = np.linspace(-2 * r_max, 2 * r_max, 4001)
    _, f1, _ = coupling.f_derivs(rr, t, sys.omega)
    _, f1b, _ = coupling.f_derivs(rr2, t, sys.omega)
    sup1 = float(np.max(np.abs(f1)))
    sup2 = float(np.max(np.abs(f1b)))
    k = coupling.kappa if coupling.kappa != 0 else 1.0
    return {
        "F1": {"c0": c0, "c1": c1, "worst_margin": margin1, "pass": bool(c0 > 0)},
        "F2": {"c2": c2, "pass": bool(np.isfinite(c2))},
        "F3": {
            "sup_abs_fprime": sup1 / abs(k),
            "sup_abs_fprime_doubled_range": sup2 / abs(k),
            "pass": bool(sup2 <= 1.01 * sup1 + 1e-15),
        },
        "box": {"p_max": p_max, "r_max": r_max, "q_points": q_points, "p_points": p_points},
        "marker": "grid evidence only",
    }
