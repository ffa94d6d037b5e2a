"""Eigenvalues, small divisors and admissibility diagnostics.

The small divisor of a mode is its eigenvalue reduced modulo the resonance
spacing ``2*pi/T`` into the half-open window ``(-pi/T, pi/T]``.  At finite
truncation admissibility is only ever *estimated*: we report shell minima, a
log-log fit of the decay exponent, and exact resonances, and every report
carries an explicit marker saying so.
"""

from dataclasses import dataclass, field

import mpmath
import numpy as np

from .validation import InadmissibleError, ValidationError, check_int_at_least, check_positive

SURROGATE_MARKER = "finite-truncation surrogate"

# above this lattice radius the reduction is done with mpmath
EXTENDED_PRECISION_RADIUS = 1000
EXTENDED_DIGITS = 50
RESONANCE_RTOL = 1e-12


def eigenvalues(spec, modes):
    """Eigenvalues of the linear operator on the lattice, one per mode."""
    sq = np.sum(np.asarray(modes.vectors, dtype=np.int64) ** 2, axis=1)
    if spec.model == "wave":
        lam = np.sqrt(sq + spec.a)
    elif spec.model == "schrodinger":
        lam = sq.astype(float)
    else:
        raise ValidationError("model", f"unknown model {spec.model!r}")
    if np.any(lam <= 0):
        raise ValidationError(
            "n_max", f"lattice contains the zero mode, which has eigenvalue 0 for the {spec.model} model"
        )
    return lam


def _two_prod(a, b):
    # Dekker/Veltkamp error-free product: a*b == p + e exactly
    p = a * b
    c = 134217729.0 * a
    a_hi = c - (c - a)
    a_lo = a - a_hi
    c = 134217729.0 * b
    b_hi = c - (c - b)
    b_lo = b - b_hi
    e = ((a_hi * b_hi - p) + a_hi * b_lo + a_lo * b_hi) + a_lo * b_lo
    return p, e


def _reduce_double(lam, T):
    omega = 2.0 * np.pi / T
    k = np.round(lam / omega)  # numpy rounds half to even
    p, e = _two_prod(k, np.full_like(lam, omega))
    eps = (lam - p) - e
    return eps, k


def _reduce_mp(sq_norm, model, a, T):
    with mpmath.workdps(EXTENDED_DIGITS):
        Tm = mpmath.mpf(T)
        lam = mpmath.sqrt(mpmath.mpf(int(sq_norm) + int(a))) if model == "wave" else mpmath.mpf(int(sq_norm))
        omega = 2 * mpmath.pi / Tm
        x = lam / omega
        k = mpmath.nint(x)  # round half to even
        eps = lam - k * omega
        if eps <= -mpmath.pi / Tm:
            eps += omega
        return float(eps)


def small_divisors(lam, T):
    """Reduce ``lam`` modulo ``2 pi / T`` into ``(-pi/T, pi/T]``.

    Double precision with an error-free product for the subtraction; ties go
    to ``+pi/T``.
    """
    check_positive(T, "T")
    lam = np.asarray(lam, dtype=float)
    eps, _ = _reduce_double(lam, T)
    half = np.pi / T
    eps = np.where(eps <= -half, eps + 2.0 * half, eps)
    eps = np.where(eps > half, eps - 2.0 * half, eps)
    return eps


def model_small_divisors(spec, modes):
    """Small divisors for a lattice, switching to mpmath beyond |n| = 1000."""
    vec = np.asarray(modes.vectors, dtype=np.int64)
    lam = eigenvalues(spec, modes)
    eps = small_divisors(lam, spec.T)
    radius = np.sqrt(np.sum(vec**2, axis=1))
    big = np.nonzero(radius > EXTENDED_PRECISION_RADIUS)[0]
    if big.size:
        sq = np.sum(vec**2, axis=1)
        cache = {}
        for i in big:
            s = int(sq[i])
            if s not in cache:
                cache[s] = _reduce_mp(s, spec.model, spec.a, spec.T)
            eps[i] = cache[s]
    return eps


def resonant_mask(lam, eps):
    return np.abs(eps) <= RESONANCE_RTOL * np.maximum(1.0, np.abs(lam))


def continued_fraction_convergents(x, depth):
    """Convergents ``(p_i, q_i)`` of the continued fraction of ``x``.

    Stops early when ``x`` turns out rational at working precision.
    """
    depth = check_int_at_least(depth, 1, "depth")
    with mpmath.workdps(EXTENDED_DIGITS):
        r = mpmath.mpf(x)
        if r <= 0:
            raise ValidationError("x", "must be positive")
        tol = mpmath.mpf(2) ** (-48)  # input carries double precision at best
        p_prev, p_cur = 0, 1
        q_prev, q_cur = 1, 0
        out = []
        for _ in range(depth):
            a = int(mpmath.floor(r))
            p_prev, p_cur = p_cur, a * p_cur + p_prev
            q_prev, q_cur = q_cur, a * q_cur + q_prev
            out.append((p_cur, q_cur))
            frac = r - a
            if abs(frac) < tol * max(1, abs(r)):
                break
            r = 1 / frac
        return out


@dataclass
class SpectrumReport:
    vectors: np.ndarray
    lam: np.ndarray
    eps: np.ndarray
    theta: np.ndarray
    h_values: list
    shells: list
    slope: float
    slope_stderr: float
    h0_fit: float
    h0_floor: float
    c_fit: float
    resonant_modes: list
    admissible: dict
    overall_min: dict
    worst_mode: dict
    convergents: list
    period_ratio: float
    marker: str = SURROGATE_MARKER
    notes: list = field(default_factory=list)

    @property
    def resonant(self):
        return bool(self.resonant_modes)

    def to_dict(self):
        return {
            "marker": self.marker,
            "theta_convention": "theta_n = (1 + |n|^2)^(1/2)",
            "n_modes": int(len(self.lam)),
            "h_values": [float(h) for h in self.h_values],
            "fit": {
                "slope": self.slope,
                "slope_stderr": self.slope_stderr,
                "h0_fit": self.h0_fit,
                "h0_floor_max_fit_2d": self.h0_floor,
                "c_fit": self.c_fit,
            },
            "resonant": self.resonant,
            "n_resonant_modes": len(self.resonant_modes),
            "resonant_modes_head": [list(map(int, v)) for v in self.resonant_modes[:10]],
            "admissible": {str(k): v for k, v in self.admissible.items()},
            "overall_min_eps_theta_pow_h": {str(k): v for k, v in self.overall_min.items()},
            "worst_mode": {str(k): v for k, v in self.worst_mode.items()},
            "shells": self.shells,
            "period_ratio": self.period_ratio,
            "convergents": [list(c) for c in self.convergents],
            "notes": self.notes,
        }


def _shell_index(theta):
    return np.floor(np.log2(theta) + 1e-12).astype(int)


def admissibility_profile(spec, modes, h_values=None, cf_depth=12):
    """Shell-wise small-divisor diagnostics and a decay-exponent fit.

    Shells are dyadic bands ``2**j <= theta < 2**(j+1)``.  On each non-resonant
    shell the minimum of ``|eps|`` is regressed against ``theta`` in log-log
    scale; the fitted exponent is ``h0_fit = -slope``.  Both ``h0_fit`` and the
    floor ``max(h0_fit, 2d)`` are reported.
    """
    lam = eigenvalues(spec, modes)
    eps = model_small_divisors(spec, modes)
    theta = np.asarray(modes.theta, dtype=float)
    vec = np.asarray(modes.vectors)
    if h_values is None:
        h_values = [spec.h]
    res = resonant_mask(lam, eps)
    aeps = np.where(res, 0.0, np.abs(eps))
    sid = _shell_index(theta)
    notes = []
    shells = []
    covered = np.sqrt(1.0 + float(modes.n_max) ** 2)  # every theta below this is present
    for j in range(int(sid.min()), int(sid.max()) + 1):
        idx = np.nonzero(sid == j)[0]
        if idx.size == 0:
            notes.append(f"shell {j} is empty")
            continue
        i = idx[np.argmin(aeps[idx])]
        row = {
            "shell": j,
            "n_modes": int(idx.size),
            "theta_min": float(theta[i]),
            "eps_min": float(aeps[i]),
            "mode": [int(v) for v in vec[i]],
            "resonant": bool(res[idx].any()),
            "complete": bool(2.0 ** (j + 1) <= covered + 1e-9),
        }
        for h in h_values:
            row[f"eps_min_times_theta_pow_h[{h:g}]"] = float(np.min(aeps[idx] * theta[idx] ** h))
        shells.append(row)
    if len(shells) < 4:
        notes.append("lattice spans fewer than 4 shells; fit is unreliable")

    good = [r for r in shells if r["eps_min"] > 0 and r["complete"]]
    if any(not r["complete"] for r in shells):
        notes.append("partially covered outer shells are reported but excluded from the fit")
    if len(good) >= 2:
        x = np.log([r["theta_min"] for r in good])
        y = np.log([r["eps_min"] for r in good])
        A = np.vstack([x, np.ones_like(x)]).T
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        slope, intercept = float(coef[0]), float(coef[1])
        if len(good) > 2:
            resid = y - A @ coef
            s2 = float(resid @ resid) / (len(good) - 2)
            cov = s2 * np.linalg.inv(A.T @ A)
            stderr = float(np.sqrt(cov[0, 0]))
        else:
            stderr = float("nan")
    else:
        slope = intercept = stderr = float("nan")
        notes.append("fewer than two non-resonant shells; no fit")
    h0_fit = -slope
    h0_floor = max(h0_fit, 2.0 * spec.d) if np.isfinite(h0_fit) else float(2 * spec.d)

    admissible, overall, worst = {}, {}, {}
    for h in h_values:
        prod = aeps * theta**h
        i = int(np.argmin(prod))
        overall[h] = float(prod[i])
        worst[h] = {"mode": [int(v) for v in vec[i]], "value": float(prod[i])}
        shell_ok = all(r[f"eps_min_times_theta_pow_h[{h:g}]"] > 0 for r in shells)
        admissible[h] = bool(overall[h] > 0 and shell_ok)

    ratio = spec.T / (2 * np.pi)
    # for the wave model with positive mass the relevant ratio is still T/(2 pi)
    return SpectrumReport(
        vectors=vec,
        lam=lam,
        eps=eps,
        theta=theta,
        h_values=list(h_values),
        shells=shells,
        slope=slope,
        slope_stderr=stderr,
        h0_fit=h0_fit,
        h0_floor=h0_floor,
        c_fit=float(np.exp(intercept)) if np.isfinite(intercept) else float("nan"),
        resonant_modes=[v for v, r in zip(vec, res) if r],
        admissible=admissible,
        overall_min=overall,
        worst_mode=worst,
        convergents=continued_fraction_convergents(ratio, cf_depth),
        period_ratio=float(ratio),
        notes=notes,
    )


def require_admissible(spec, modes):
    """Raise :class:`InadmissibleError` if any small divisor vanishes."""
    lam = eigenvalues(spec, modes)
    eps = model_small_divisors(spec, modes)
    res = resonant_mask(lam, eps)
    if res.any():
        n = np.asarray(modes.vectors)[np.argmax(res)]
        raise InadmissibleError(
            "T", f"period is resonant: small divisor of mode {list(map(int, n))} vanishes (not admissible)"
        )
    return eps


def second_inclusion_constant(eps, theta, h_double_prime):
    """Best ``c`` with ``|eps_n| >= c * theta_n**(-h'')`` over the lattice."""
    return float(np.min(np.abs(eps) * theta**h_double_prime))
