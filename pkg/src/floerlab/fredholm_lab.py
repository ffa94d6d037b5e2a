"""Finite-truncation verification suites for the Fredholm estimates.

Every suite returns a :class:`VerificationReport`.  Constants are stored with
the norm pair they were measured in; operator norms come from seeded power
iteration and are cross-checked against dense SVD whenever the matrix has at
most ``DENSE_CHECK_LIMIT`` rows and columns.

Norm pair labels:

* ``std(k,h')``: standard loop (or strip) norm with Sobolev index ``k`` and
  scale weight ``h'``;
* ``mod(k,h')``: the modified norm ``||i d_t xi||_{k-1}`` (loops) or
  ``||dbar xi||_{k-1}`` (strips).
"""

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .dynamics import CouplingSpec, make_system
from .floer import StripProblem, centered_interior, constant_curve, kernel_dimensions
from .mode_space import LoopBasis, LoopVector, build_lattice, loop_norm_modified, loop_norm_standard
from .orbits import (
    DEFAULT_THRESHOLD,
    Orbit,
    OrbitProblem,
    _h_prime,
    decoupled_initial,
    dense_singular_values,
    newton_orbit,
    nondegeneracy_margin,
    power_iteration_norm,
)
from .spectrum import admissibility_profile, require_admissible
from .validation import ConvergenceError, ValidationError, check_int_at_least, check_positive

DENSE_CHECK_LIMIT = 500
POWER_MAX_ITER = 200
POWER_RTOL = 1e-10
EIG_TOL = 1e-10
EIG_MAX_ITER = 5000


def std_pair(k, h_prime):
    return f"std({k:g},{h_prime:g})"


def mod_pair(k, h_prime):
    return f"mod({k:g},{h_prime:g})"


def measured(value, norm_pair, **extra):
    out = {"value": float(value), "norm_pair": norm_pair}
    out.update(extra)
    return out


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_clean(v) for v in x.tolist()]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if np.isfinite(x) else repr(x)
    return x


@dataclass
class VerificationReport:
    suite: str
    parameters: dict
    cases: list = field(default_factory=list)
    passed: bool = True
    tolerances: dict = field(default_factory=dict)
    trend: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)  # name -> list of row dicts, written as CSV
    notes: list = field(default_factory=list)

    def to_dict(self):
        return _clean({
            "suite": self.suite,
            "parameters": self.parameters,
            "passed": self.passed,
            "tolerances": self.tolerances,
            "trend": self.trend,
            "cases": self.cases,
            "notes": self.notes,
        })

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def series_csv(self, name):
        rows = self.series[name]
        if not rows:
            return ""
        cols = list(rows[0])
        out = [",".join(cols)]
        for r in rows:
            out.append(",".join(_fmt(r[c]) for c in cols))
        return "\n".join(out) + "\n"


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def loglog_fit(x, y):
    """Least-squares slope, intercept and R^2 of ``log y`` against ``log x`` (positive entries only)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = (x > 0) & (y > 0) & np.isfinite(y)
    if ok.sum() < 2:
        return {"slope": float("nan"), "intercept": float("nan"), "r2": float("nan"), "points": int(ok.sum())}
    lx, ly = np.log(x[ok]), np.log(y[ok])
    A = np.vstack([lx, np.ones_like(lx)]).T
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    res = ly - A @ coef
    tot = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - float(res @ res) / tot if tot > 0 else 1.0
    return {"slope": float(coef[0]), "intercept": float(coef[1]), "r2": r2, "points": int(ok.sum())}


def operator_norm(A, seed=0, dense_limit=DENSE_CHECK_LIMIT):
    """Largest singular value of a sparse or linear operator; dense SVD cross-check on small systems."""
    if isinstance(A, tuple):
        matvec, rmatvec, n, m = A
    else:
        A = sp.csr_matrix(A)
        AT = A.T.tocsr()
        m, n = A.shape
        matvec, rmatvec = (lambda x: A @ x), (lambda y: AT @ y)
        if n == 0 or m == 0 or A.nnz == 0:
            return 0.0, None
    s, _ = power_iteration_norm(matvec, rmatvec, n, seed, POWER_MAX_ITER, POWER_RTOL)
    check = None
    if max(m, n) <= dense_limit:
        dense = np.column_stack([matvec(e) for e in np.eye(n)]) if n else np.zeros((m, 0))
        sd = float(np.linalg.norm(dense, 2)) if dense.size else 0.0
        check = {"dense": sd, "relative_difference": abs(s - sd) / sd if sd > 0 else abs(s - sd)}
    return float(s), check


def _require_spec(spec):
    require_admissible(spec, build_lattice(spec))


# isometry ---------------------------------------------------------------------------------


def verify_isometry(n_samples, spec, pairs=None, seed=0, m_max=None, tol=1e-12):
    """``||xi||_{mod(k,h')} = ||i d_t xi||_{std(k-1,h')}`` on random field loops.

    The identity concerns field slots; particle slots carry the standard
    ``H^k`` norm in the modified space and are left out of both sides.
    """
    n_samples = check_int_at_least(n_samples, 0, "n_samples")
    modes = build_lattice(spec)
    require_admissible(spec, modes)
    basis = LoopBasis(spec, modes, m_max=m_max)
    hp0 = _h_prime(spec)
    pairs = pairs or [(spec.k, hp0), (spec.k + 1, hp0), (spec.k, hp0 + 0.5)]
    rng = np.random.default_rng(seed)
    rep = VerificationReport("isometry", {"n_samples": n_samples, "pairs": [list(p) for p in pairs], "seed": seed,
                                          "spec": spec.to_json_dict(), "m_max": basis.m_max},
                             tolerances={"relative_deviation": tol})
    worst_all = 0.0
    decay = basis.slot_theta[:, None] ** -2.0 / (1.0 + np.abs(basis.symbol)) ** 2
    for k, hp in pairs:
        worst = 0.0
        for _ in range(n_samples):
            c = (rng.standard_normal(basis.symbol.shape) + 1j * rng.standard_normal(basis.symbol.shape)) * decay
            c[: basis.N] = 0.0
            xi = LoopVector(basis, c)
            a = loop_norm_modified(xi, k, hp, include_particle=False)
            b = loop_norm_standard(xi.i_dt(), k - 1, hp, include_particle=False)
            if a > 0:
                worst = max(worst, abs(a - b) / a)
        # closed forms on basis vectors e_{n,m}
        lam = basis.symbol[basis.N :]
        th = basis.slot_theta[basis.N :, None]
        mod_sq = th ** (2 * hp) * (lam ** (2 * k) + lam**2)
        std_sq = th ** (2 * hp) * lam**2 * (lam ** (2 * (k - 1)) + 1.0)
        basis_dev = float(np.max(np.abs(mod_sq - std_sq) / mod_sq))
        zero = loop_norm_modified(basis.zeros(), k, hp) == 0.0 == loop_norm_standard(basis.zeros().i_dt(), k - 1, hp)
        ok = worst < tol and basis_dev < tol and zero
        rep.cases.append({
            "k": k, "h_prime": hp,
            "max_relative_deviation": measured(worst, f"{mod_pair(k, hp)} vs {std_pair(k - 1, hp)}"),
            "basis_vector_deviation": measured(basis_dev, f"{mod_pair(k, hp)} vs {std_pair(k - 1, hp)}"),
            "zero_vector": bool(zero),
            "passed": bool(ok),
        })
        rep.passed &= bool(ok)
        worst_all = max(worst_all, worst)
    rep.trend = {"max_relative_deviation": worst_all}
    return rep


# inclusions -------------------------------------------------------------------------------


def _field_grid(basis):
    lam = basis.symbol[basis.N :]
    th = np.broadcast_to(basis.slot_theta[basis.N :, None], lam.shape)
    return lam, th


def compact_embedding_check(basis, k, h_prime, h):
    """Per-mode test of ``|z|^2_{h'}(lam^{2k-2}+1) <= theta^{-2h+2h'} |z|^2_h (lam^{2k}+1)`` for unit ``z``.

    Returns the pass mask over ``(n, m)``, the worst ratio lhs/rhs and the
    pairs that fail.  The theta factors cancel identically, so the comparison
    is ``lam^{2k-2} + 1`` against ``lam^{2k} + 1``.
    """
    lam, th = _field_grid(basis)
    lhs = th ** (2 * h_prime) * (lam ** (2 * k - 2) + 1.0)
    rhs = th ** (-2 * h + 2 * h_prime) * th ** (2 * h) * (lam ** (2 * k) + 1.0)
    ok = lhs <= rhs * (1.0 + 1e-14)
    ratio = lhs / rhs
    return ok, ratio, lam


def verify_inclusions(spec, k=None, h_prime=None, h_double_primes=None, h=None, radii=None, m_max=None):
    """Best inclusion constants over the lattice and the per-mode compact-embedding test.

    ``c1`` bounds ``||xi||_{mod(k,h')} <= c1 ||xi||_{std(k,h')}``; ``c2(h'')``
    bounds ``||xi||_{std(k,h'-h'')} <= c2 ||xi||_{mod(k,h')}`` and is reported
    on growing lattice radii.  Values of ``h''`` at or below the fitted decay
    exponent are accepted as negative controls and flagged.
    """
    modes = build_lattice(spec)
    eps = require_admissible(spec, modes)
    basis = LoopBasis(spec, modes, m_max=m_max)
    prof = admissibility_profile(spec, modes)
    h0 = prof.h0_fit
    k = spec.k if k is None else k
    hp = _h_prime(spec) if h_prime is None else h_prime
    h = spec.h if h is None else h
    if h_double_primes is None:
        h_double_primes = [h0 + 1.0]
    r_all = modes.radius()
    if radii is None:
        rmax = float(r_all.max())
        radii = sorted({float(r) for r in np.unique(np.floor(np.geomspace(1, rmax, 8)))})
    rep = VerificationReport("inclusions", {"spec": spec.to_json_dict(), "k": k, "h_prime": hp, "h": h,
                                            "h_double_primes": list(h_double_primes), "radii": list(radii),
                                            "m_max": basis.m_max, "h0_fit": h0, "h0_floor": prof.h0_floor})
    lam, th = _field_grid(basis)
    c1 = float(np.sqrt(np.max((lam ** (2 * k) + lam**2) / (lam ** (2 * k) + 1.0))))
    rep.cases.append({"kind": "H^k in modified H^k", "constant": measured(c1, f"{std_pair(k, hp)} -> {mod_pair(k, hp)}"),
                      "bound": 2**0.5, "passed": bool(c1 <= 2**0.5 + 1e-12)})
    rep.passed &= c1 <= 2**0.5 + 1e-12
    radius = np.broadcast_to(r_all[:, None], lam.shape)
    ratio2 = (lam ** (2 * k) + 1.0) / (lam ** (2 * k) + lam**2)
    series = []
    for hpp in h_double_primes:
        per_mode = th ** (-2 * hpp) * ratio2
        consts = []
        for R in radii:
            sel = radius <= R + 1e-12
            consts.append(float(np.sqrt(per_mode[sel].max())) if sel.any() else float("nan"))
            series.append({"h_double_prime": hpp, "radius": R, "c2": consts[-1]})
        fit = loglog_fit(radii, consts)
        # the divisor bound behind c2: |eps_n| >= c'' theta_n^{-h''}
        c_dd = float(np.min(np.abs(eps) * modes.theta**hpp))
        below = not hpp > h0
        case = {
            "kind": "modified H^k(H_h') in H^k(H_{h'-h''})",
            "h_double_prime": hpp,
            "constants_by_radius": [measured(c, f"{mod_pair(k, hp)} -> {std_pair(k, hp - hpp)}", radius=R)
                                    for c, R in zip(consts, radii)],
            "growth_fit": fit,
            "divisor_constant": measured(c_dd, "|eps_n| theta_n^{h''}"),
            "negative_control": below,
        }
        if below:
            rep.notes.append(f"h''={hpp:g} does not exceed the fitted h0={h0:.4g}; growth is expected")
        rep.cases.append(case)
    rep.series["inclusion_constants"] = series
    ok, ratio, lam_grid = compact_embedding_check(basis, k, hp, h)
    fails = np.argwhere(~ok)
    n_fail = int(fails.shape[0])
    best = float(ratio.max())
    # every pair satisfies the inequality up to the constant sup_lam (lam^{2k-2}+1)/(lam^{2k}+1)
    rep.cases.append({
        "kind": "compact embedding per-mode inequality",
        "pairs": int(ok.size),
        "pairs_passing": int(ok.sum()),
        "fraction_passing": float(ok.mean()),
        "worst_ratio": measured(best, f"{std_pair(k - 1, hp)} over theta^(-2h+2h') {std_pair(k, h)}"),
        "failing_abs_lambda_max": float(np.abs(lam_grid[~ok]).max()) if n_fail else None,
        "failing_head": [{"n": [int(v) for v in modes.vectors[i]], "m": int(basis.m[j]),
                          "lambda": float(lam_grid[i, j])} for i, j in fails[:10]],
        "passed": bool(n_fail == 0),
    })
    if n_fail:
        rep.notes.append(f"{n_fail} pairs with 0 < |lambda| < 1 violate the literal inequality; "
                         f"it holds for all pairs with constant {best:.6g}")
    rep.passed &= n_fail == 0
    rep.trend = {c["h_double_prime"]: c["growth_fit"] for c in rep.cases if "growth_fit" in c}
    return rep


# tail decay ----------------------------------------------------------------------------


def _retained_mask(basis, ell):
    r = basis.packed_mode_radius()
    field_ = basis.packed_field_mask()
    return (~field_) | (r <= ell + 1e-12)


def _tail_part(S, keep):
    """``S - P S P`` with ``P`` the coordinate projection onto ``keep``."""
    S = sp.coo_matrix(S)
    inner = keep[S.row] & keep[S.col]
    return sp.csr_matrix((S.data[~inner], (S.row[~inner], S.col[~inner])), shape=S.shape)


def _weighted(S, w_in, w_out):
    return (sp.diags(np.sqrt(w_out)) @ S @ sp.diags(1.0 / np.sqrt(w_in))).tocsr()


def _hessians_of(obj):
    if isinstance(obj, Orbit):
        return obj.problem, [obj.problem.hessian(obj.loop.coeffs)]
    pb = obj.problem.problem
    seen, out = set(), []
    for v in obj.strip.values:
        key = v.tobytes()
        if key not in seen:
            seen.add(key)
            out.append(pb.hessian(v))
    return pb, out


def tail_decay_profile(obj, ells, h=None, k=None, h_prime=None, seed=0):
    """Norms of ``S - S^ell`` in both declared pairs and the weighted sequence ``||S - S^ell|| ell^{2h-1}``.

    ``S^ell = P_ell S P_ell`` keeps the particle block and field modes with
    ``|n| <= ell``.  For a Floer curve the multiplication operator acts slice
    by slice, and the reported norm is the maximum over slices.
    """
    pb, hessians = _hessians_of(obj)
    b = pb.basis
    spec = pb.sys.spec
    h = spec.h if h is None else h
    k = spec.k if k is None else k
    hp = _h_prime(spec) if h_prime is None else h_prime
    ells = [int(e) for e in ells]
    pairs = {
        "endomorphism": (b.weights_standard(k, hp), b.weights_standard(k, hp), f"{std_pair(k, hp)} -> {std_pair(k, hp)}"),
        "modified_to_standard": (b.weights_modified(k, hp), b.weights_standard(k - 1, hp),
                                 f"{mod_pair(k, hp)} -> {std_pair(k - 1, hp)}"),
    }
    rep = VerificationReport("tail", {"ells": ells, "h": h, "k": k, "h_prime": hp, "seed": seed,
                                      "spec": spec.to_json_dict(), "m_max": b.m_max,
                                      "object": type(obj).__name__, "slices": len(hessians)},
                             tolerances={"dense_check_relative": 1e-6})
    rows = []
    seqs = {name: [] for name in pairs}
    for ell in ells:
        keep = _retained_mask(b, ell)
        entry = {"ell": ell}
        for name, (w_in, w_out, label) in pairs.items():
            best, check = 0.0, None
            for S in hessians:
                val, chk = operator_norm(_weighted(_tail_part(S, keep), w_in, w_out), seed)
                if val >= best:
                    best, check = val, chk
            weighted = best * float(ell) ** (2 * h - 1)
            seqs[name].append(weighted)
            entry[name] = measured(best, label, times_ell_pow=weighted, dense_check=check)
            if check is not None and check["relative_difference"] > 1e-6:
                rep.notes.append(f"power iteration and SVD differ by {check['relative_difference']:.2e} at ell={ell}")
            rows.append({"pair": name, "ell": ell, "norm": best, "norm_times_ell_pow": weighted})
        rep.cases.append(entry)
    rep.series["tail_decay"] = rows
    for name in pairs:
        s = np.asarray(seqs[name])
        strict = bool(np.all(np.diff(s) < 0))
        rep.trend[name] = {"strictly_decreasing": strict, "fit": loglog_fit(ells, s),
                           "claimed_rate": name == "endomorphism"}
    rep.passed = rep.trend["endomorphism"]["strictly_decreasing"]
    rep.notes.append("the ell^(2h-1) rate is asserted only for the endomorphism pair; the other pair is reported")
    return rep


# star inequalities ---------------------------------------------------------------------------


def _sigma_weights(basis, k, hp, sigma):
    """Squared strip weights at s-frequency ``sigma``: standard (k-1) and modified k."""
    lam = basis.packed_symbol()
    th = basis.packed_theta() ** (2 * hp)
    w_std = th * (lam ** (2 * (k - 1)) + sigma ** (2 * (k - 1)) + 1.0)
    w_mod = (sigma**2 + lam**2) * w_std
    part_std = lam ** (2 * k) + sigma ** (2 * k) + 1.0
    w_mod = np.where(basis.packed_field_mask(), w_mod, part_std)
    return w_std, w_mod


def _complexify(A, sigma, shift=True):
    """Real form of ``i sigma + A`` (or of ``A`` alone when ``shift`` is off) on complex vectors."""
    if sigma == 0:
        return sp.csr_matrix(A)
    n = A.shape[0]
    I = sp.identity(n, format="csr") * (sigma if shift else 0.0)
    return sp.bmat([[A, -I], [I, A]], format="csr")


def _wrap(w, sigma):
    return w if sigma == 0 else np.concatenate([w, w])


def _composite_norm(left, lu, seed):
    """``||left @ inv(M)||`` where ``lu`` factors ``M``."""
    L = sp.csr_matrix(left)
    LT = L.T.tocsr()
    n = lu.shape[0]
    if L.shape[0] == 0 or L.nnz == 0:
        return 0.0, None
    return operator_norm((lambda x: L @ lu.solve(x), lambda y: lu.solve(LT @ y, trans="T"), n, L.shape[0]), seed)


def _star_at(orbit, ell, k, hp, sigma, seed):
    pb = orbit.problem
    b = pb.basis
    S = pb.hessian(orbit.loop.coeffs)
    T = pb.time_operator()
    w_std, w_mod = _sigma_weights(b, k, hp, sigma)
    keep = _retained_mask(b, ell)
    keep2 = _wrap(keep, sigma)
    i, j = np.nonzero(keep2)[0], np.nonzero(~keep2)[0]
    Dw = _weighted(_complexify(T + S, sigma), _wrap(w_mod, sigma), _wrap(w_std, sigma))
    Sw = _weighted(_complexify(S, sigma, shift=False), _wrap(w_mod, sigma), _wrap(w_std, sigma))
    Tw = _weighted(_complexify(T, sigma), _wrap(w_mod, sigma), _wrap(w_std, sigma))
    D_ell = Dw[i][:, i].tocsc()
    out = {"sigma": sigma}
    try:
        lu = spla.splu(D_ell)
        probe = lu.solve(np.ones(D_ell.shape[0]))
        if not np.all(np.isfinite(probe)):
            raise RuntimeError("singular")
    except RuntimeError:
        out.update(sigma_min=0.0, condition=float("inf"), rho_off=float("inf"), rho_tail=float("inf"))
        return out
    inv_norm, chk = operator_norm((lu.solve, lambda y: lu.solve(y, trans="T"), D_ell.shape[0], D_ell.shape[0]), seed)
    smax, _ = operator_norm(D_ell, seed)
    out["sigma_min"] = 1.0 / inv_norm
    out["sigma_min_dense_check"] = chk
    out["condition"] = smax * inv_norm
    rho_off, c2 = _composite_norm(Sw[j][:, i], lu, seed)
    out["rho_off"] = rho_off
    if j.size:
        lu_perp = spla.splu(Tw[j][:, j].tocsc())
        rho_a, _ = _composite_norm(Sw[i][:, j], lu_perp, seed)
        rho_b, _ = _composite_norm(Sw[j][:, j], lu_perp, seed)
    else:
        rho_a = rho_b = 0.0
    out["rho_tail_off"] = rho_a
    out["rho_tail_perp"] = rho_b
    out["rho_tail"] = rho_a + rho_b
    return out


def verify_star_inequalities(u, ells=None, k=None, h_prime=None, sigmas=(0.0, 1.0, 4.0), seed=0):
    """The three estimates behind the finite-dimensional reduction, swept over ``ell``.

    The asymptotic operator ``d_s + i d_t + S_u`` is sampled at s-frequencies
    ``sigma``, where it becomes ``i sigma + i d_t + S_u``.  For each ``ell``:

    * (*) ``sigma_min(D_ell)`` from ``mod(k,h')`` to ``std(k-1,h')`` (margin is the value itself);
    * (**) margin ``1 - 2 ||S_off D_ell^{-1}||``;
    * (***) margin ``1 - 2 (||S_off dbar_perp^{-1}|| + ||S_perp dbar_perp^{-1}||)``, a sufficient form.

    The worst margin over ``sigma`` is reported.  ``u`` is an Orbit or a Floer
    curve, whose two asymptotic orbits are both tested.
    """
    orbits = [u] if isinstance(u, Orbit) else [u.u_minus, u.u_plus]
    spec = orbits[0].problem.sys.spec
    n_max = orbits[0].problem.sys.modes.n_max
    k = spec.k if k is None else k
    hp = _h_prime(spec) if h_prime is None else h_prime
    ells = list(range(1, n_max + 1)) if ells is None else [int(e) for e in ells]
    pair_in, pair_out = mod_pair(k, hp), std_pair(k - 1, hp)
    rep = VerificationReport("stars", {"ells": ells, "k": k, "h_prime": hp, "sigmas": list(sigmas), "seed": seed,
                                       "spec": spec.to_json_dict(), "m_max": orbits[0].problem.basis.m_max,
                                       "ends": len(orbits)},
                             tolerances={"margin": 0.0})
    rows = []
    first = None
    margins = {"star": [], "double_star": [], "triple_star": []}
    for ell in ells:
        per = [_star_at(o, ell, k, hp, s, seed) for o in orbits for s in sigmas]
        m1 = min(p["sigma_min"] for p in per)
        m2 = min(1.0 - 2.0 * p["rho_off"] for p in per)
        m3 = min(1.0 - 2.0 * p["rho_tail"] for p in per)
        cond = max(p["condition"] for p in per)
        ok = bool(m1 > 0 and m2 > 0 and m3 > 0)
        if ok and first is None:
            first = ell
        margins["star"].append(m1)
        margins["double_star"].append(m2)
        margins["triple_star"].append(m3)
        checks = [p["sigma_min_dense_check"] for p in per if p.get("sigma_min_dense_check")]
        rep.cases.append({
            "ell": ell,
            "star": measured(m1, f"{pair_in} -> {pair_out}", condition=cond),
            "double_star": measured(m2, f"{pair_out} -> {pair_out}"),
            "triple_star": measured(m3, f"{pair_out} -> {pair_out}"),
            "all_hold": ok,
            "dense_checks": checks,
            "per_sigma": per,
        })
        rows.append({"ell": ell, "star": m1, "double_star": m2, "triple_star": m3, "condition": cond})
    rep.series["star_margins"] = rows
    exceptions = []
    for name, vals in margins.items():
        for a, b_, e in zip(vals, vals[1:], ells[1:]):
            if b_ < a - 1e-12 * max(1.0, abs(a)):
                exceptions.append({"margin": name, "ell": e, "drop": a - b_})
    rep.trend = {"smallest_ell_all_hold": first, "monotone_exceptions": exceptions}
    rep.passed = first is not None
    if first is None:
        rep.notes.append(f"no ell up to {max(ells)} satisfies all three inequalities")
    return rep


# semi-Fredholm constant ---------------------------------------------------------------------


def plateau_cutoff(s, s0):
    """C^2 plateau: 1 on ``|s| <= s0 - 1``, 0 on ``|s| >= s0``, quintic smoothstep between."""
    x = np.clip(np.abs(np.asarray(s, dtype=float)) - (s0 - 1.0), 0.0, 1.0)
    step = x**3 * (10 - 15 * x + 6 * x**2)
    return 1.0 - step


def strip_gram(basis, n_int, ds, k_minus_1, hp):
    """Quadratic form of the discrete ``std(k-1,h')`` strip norm on interior slices.

    s-derivatives are taken with the same centered difference as the strip
    operator.  A forward difference would also weigh the grid-scale
    oscillation the centered scheme leaves near clamped ends, and the
    resulting constant grows like ``1/ds``.
    """
    lam = basis.packed_symbol()
    th = basis.packed_theta() ** (2 * hp)
    w0 = th * (lam ** (2 * k_minus_1) + 1.0)
    Q = ds * sp.kron(sp.identity(n_int), sp.diags(w0))
    if k_minus_1 > 0:
        G = sp.identity(n_int, format="csr")
        C = centered_interior(n_int + 2, ds)
        for _ in range(k_minus_1):
            G = C @ G
        Q = Q + ds * sp.kron((G.T @ G).tocsr(), sp.diags(th))
    return Q.tocsc()


def _semifredholm_once(curve, ell, s0, k, hp, n_random, seed):
    sp_ = curve.problem
    b = sp_.basis
    n_int = sp_.n_s - 2
    if n_int % 2:
        raise ValidationError("n_s", f"need an even number of interior slices, got n_s={sp_.n_s}; the centered "
                                     "difference on an odd count has an alternating null vector")
    vals = curve.strip.values
    D = sp_.jacobian(vals).tocsr()
    T = sp_.problem.time_operator()
    dbar = (sp.kron(sp_.Dint, sp.identity(b.dim)) + sp.kron(sp.identity(n_int), T)).tocsr()
    beta = plateau_cutoff(sp_.s[1:-1], s0)
    keep = _retained_mask(b, ell).astype(float)
    Pb = sp.diags(np.kron(beta, keep))
    Q = strip_gram(b, n_int, sp_.ds, k - 1, hp)
    A = (dbar.T @ Q @ dbar).tocsc()
    # D^T Q D fills in densely through the per-slice Hessian blocks, so B is
    # only ever applied; the sparse d-bar form A is the one factored.
    DT = D.T.tocsr()
    B = spla.LinearOperator(A.shape, matvec=lambda x: DT @ (Q @ (D @ x)) + Pb @ (Q @ (Pb @ x)), dtype=float)
    lu = spla.splu(A)
    Ainv = spla.LinearOperator(A.shape, matvec=lu.solve, dtype=float)
    v0 = np.random.default_rng(seed).standard_normal(A.shape[0])
    # smallest mu of B x = mu A x; A^{-1} B is a bounded perturbation of the identity
    w, V = spla.eigsh(B, k=1, M=A, Minv=Ainv, which="SA", v0=v0, tol=EIG_TOL, maxiter=EIG_MAX_ITER)
    c_quad = float(1.0 / np.sqrt(w[0])) if w[0] > 0 else float("inf")
    x_top = V[:, 0]

    def qn(x):
        return float(np.sqrt(max(x @ (Q @ x), 0.0)))

    def ratios(x):
        top = qn(dbar @ x)
        bottom = qn(D @ x) + qn(Pb @ x)
        return top / bottom if bottom > 0 else float("inf")

    rng = np.random.default_rng(seed + 1)
    candidates = {"eigenvector": x_top}
    for r in range(n_random):
        candidates[f"random{r}"] = rng.standard_normal(A.shape[0])
    ds_u = (vals[2:] - vals[:-2]) / (2 * sp_.ds)
    if np.abs(ds_u).max() > 1e-12:
        candidates["translation"] = sp_.pack(ds_u)
    sums = {name: ratios(x) for name, x in candidates.items()}
    trans = None
    if "translation" in candidates:
        x = candidates["translation"]
        trans = {"Dxi_over_dbar_xi": qn(D @ x) / qn(dbar @ x), "ratio": sums["translation"]}
    return {"c4_quadratic": c_quad, "c4_sum": max(sums.values()), "ratios": sums, "translation": trans,
            "n_s": sp_.n_s, "m_max": b.m_max, "ds": sp_.ds}


def semifredholm_constant(curve, ell, s0=None, k=None, h_prime=None, n_random=8, seed=0, refinements=None,
                          tol=0.05):
    """Best ``c4`` in ``||xi||_{mod(k,h')} <= c4 (||D xi||_{std(k-1,h')} + ||beta xi_ell||_{std(k-1,h')})``.

    Two measures are reported: ``c4_quadratic``, the square root of the
    largest generalized eigenvalue of ``dbar^T Q dbar`` against
    ``D^T Q D + (beta P_ell)^T Q (beta P_ell)`` (the constant for the
    root-sum-of-squares form), and ``c4_sum``, the largest ratio with the
    plain sum in the denominator over the top eigenvector, random vectors
    and the translation mode.  ``c4_sum <= c4_quadratic <= sqrt(2) c4_sum``.

    ``refinements`` is a list of ``(label, curve)`` pairs, typically the same
    curve with ``ds`` or ``m_max`` halved (``n_s -> 2 n_s - 2`` keeps the
    interior count even, so ``ds`` shrinks by ``(n_s - 1) / (2 n_s - 3)``), whose constants are compared
    with the base value.
    """
    spec = curve.problem.problem.sys.spec
    k = spec.k if k is None else k
    hp = _h_prime(spec) if h_prime is None else h_prime
    s0 = max(1.0, 0.5 * curve.s_half_width) if s0 is None else float(s0)
    check_positive(s0, "s0")
    pair = f"{mod_pair(k, hp)} over {std_pair(k - 1, hp)} + beta term"
    rep = VerificationReport("semifredholm", {"ell": ell, "s0": s0, "k": k, "h_prime": hp, "seed": seed,
                                              "n_random": n_random, "spec": spec.to_json_dict()},
                             tolerances={"refinement_relative_change": tol})
    base = _semifredholm_once(curve, ell, s0, k, hp, n_random, seed)
    rep.cases.append({"label": "base", "c4_quadratic": measured(base["c4_quadratic"], pair),
                      "c4_sum": measured(base["c4_sum"], pair), **{kk: base[kk] for kk in ("n_s", "m_max", "ds")},
                      "ratios": base["ratios"], "translation": base["translation"]})
    changes = []
    for label, other in refinements or []:
        r = _semifredholm_once(other, ell, s0, k, hp, n_random, seed)
        rel = abs(r["c4_quadratic"] - base["c4_quadratic"]) / base["c4_quadratic"]
        changes.append(rel)
        rep.cases.append({"label": label, "c4_quadratic": measured(r["c4_quadratic"], pair),
                          "c4_sum": measured(r["c4_sum"], pair), **{kk: r[kk] for kk in ("n_s", "m_max", "ds")},
                          "relative_change": rel})
    rep.trend = {"max_relative_change": max(changes) if changes else 0.0}
    rep.passed = bool(np.isfinite(base["c4_quadratic"]) and all(c < tol for c in changes))
    return rep


def refine_orbit(orbit, m_max, tol=1e-12):
    """Re-solve an orbit on a basis with another ``m_max``, starting from its truncated coefficients."""
    pb = orbit.problem
    new_pb = OrbitProblem(pb.sys, m_max=m_max)
    nb = new_pb.basis
    c = np.zeros((nb.n_slots, nb.K), dtype=complex)
    mm = min(nb.m_max, pb.basis.m_max)
    c[:, nb.m_max - mm: nb.m_max + mm + 1] = orbit.loop.coeffs[:, pb.basis.m_max - mm: pb.basis.m_max + mm + 1]
    return newton_orbit(LoopVector(nb, c), new_pb, tol=tol)


def constant_floer_curve(orbit, s_half_width, n_s):
    """The s-independent curve at ``orbit`` packaged as a FloerCurve."""
    from .floer import FloerCurve

    strip = constant_curve(orbit, s_half_width, n_s)
    return FloerCurve(strip, orbit, orbit, 0.0, StripProblem(orbit.problem, s_half_width, n_s))


# adjoint kernel ----------------------------------------------------------------------------


def adjoint_kernel_dim(curve, ell=None, count=4, seed=0):
    """``(dim ker D, dim ker D*)`` of the truncated linearization, with the index it implies."""
    kr = kernel_dimensions(curve, count=count, seed=seed)
    spec = curve.problem.problem.sys.spec
    rep = VerificationReport("adjoint", {"ell": ell, "count": count, "seed": seed, "spec": spec.to_json_dict(),
                                         "n_s": curve.problem.n_s, "m_max": curve.problem.basis.m_max})
    rep.cases.append({"dim_ker_D": kr.kernel_dim, "dim_ker_D_star": kr.cokernel_dim, "index": kr.index,
                      "smallest_singular_values": [measured(s, "l2 -> l2") for s in kr.smallest],
                      "sigma_max": measured(kr.sigma_max, "l2 -> l2"), "rule": kr.rule, "shape": list(kr.shape)})
    rep.trend = {"dims": [kr.kernel_dim, kr.cokernel_dim],
                 "index_consistent": kr.kernel_dim - kr.cokernel_dim == kr.index}
    rep.passed = rep.trend["index_consistent"]
    rep.notes += kr.notes
    return rep


# genericity ---------------------------------------------------------------------------------


def random_external_terms(rng, delta, n_terms, N, k_max=3):
    """Small static smooth potential terms ``delta * a * cos(k.q + phi)``."""
    out = []
    for _ in range(n_terms):
        kvec = rng.integers(-k_max, k_max + 1, size=N)
        if not kvec.any():
            kvec[0] = 1
        out.append({"k": [int(v) for v in kvec], "amp": float(delta * rng.standard_normal()),
                    "harmonic": 0, "phase": float(rng.uniform(0, 2 * np.pi))})
    return out


def genericity_probe(spec, coupling, delta, trials, q_star, shape=None, threshold=DEFAULT_THRESHOLD, seed=0,
                     n_terms=3, m_max=None, k=None, h_prime=None):
    """Fraction of randomly perturbed couplings whose re-solved orbit clears the nondegeneracy threshold.

    Each trial adds ``n_terms`` static terms of size ``delta`` to the external
    potential, re-solves the orbit from the decoupled loop at ``q_star`` and
    records the margin.  The unperturbed verdict is reported alongside.
    """
    check_positive(delta, "delta")
    trials = check_int_at_least(trials, 1, "trials")
    modes = build_lattice(spec)
    require_admissible(spec, modes)
    rng = np.random.default_rng(seed)
    rep = VerificationReport("genericity", {"delta": delta, "trials": trials, "q_star": list(np.atleast_1d(q_star)),
                                            "threshold": threshold, "seed": seed, "n_terms": n_terms,
                                            "coupling": coupling.to_dict(), "spec": spec.to_json_dict()})
    k = spec.k if k is None else k
    hp = _h_prime(spec) if h_prime is None else h_prime
    pair = f"{mod_pair(k, hp)} -> {std_pair(k - 1, hp)}"

    def margin(cpl):
        sys = make_system(spec, modes, cpl, shape)
        pb = OrbitProblem(sys, m_max=m_max)
        orb = newton_orbit(decoupled_initial(pb, q_star), pb, tol=1e-11)
        if not orb.converged:
            return None, orb.residual_norm
        r = nondegeneracy_margin(orb, k, hp, threshold=threshold, seed=seed, with_return_map=False)
        return r.sigma_min, orb.residual_norm

    m0, res0 = margin(coupling)
    rep.cases.append({"trial": "unperturbed", "margin": measured(m0 if m0 is not None else float("nan"), pair),
                      "residual": res0, "nondegenerate": bool(m0 is not None and m0 > threshold)})
    hits = 0
    rows = []
    for t in range(trials):
        extra = random_external_terms(rng, delta, n_terms, spec.N)
        cpl = CouplingSpec(**{**coupling.to_dict(), "external": list(coupling.external) + extra,
                              "smear_external": coupling.smear_external})
        m, res = margin(cpl)
        ok = bool(m is not None and m > threshold)
        hits += ok
        rep.cases.append({"trial": t, "margin": measured(m if m is not None else float("nan"), pair),
                          "residual": res, "nondegenerate": ok, "terms": extra})
        rows.append({"trial": t, "margin": m if m is not None else float("nan"), "nondegenerate": int(ok)})
    rep.series["genericity"] = rows
    frac = hits / trials
    rep.trend = {"fraction_nondegenerate": frac, "unperturbed_nondegenerate": rep.cases[0]["nondegenerate"]}
    rep.passed = True
    return rep
