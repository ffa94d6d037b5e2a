"""Command-line entry point: ``floerlab {spectrum,simulate,orbit,floer,verify,report}``.

Exit codes: 0 success, 1 numerical non-convergence, 2 usage or parse
error, 3 configuration or admissibility error.
"""

import argparse
import glob
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .config import SUITES, ConfigParseError, load_config
from .dynamics import FieldVector, PhasePoint, hamiltonian, integrate, make_system
from .mode_space import LoopVector, build_lattice, read_container, write_container
from .orbits import OrbitProblem, Orbit, decoupled_initial, linearized_return_map, newton_orbit, nondegeneracy_margin, \
    require_converged, residual_norm
from .validation import ConvergenceError, ValidationError

log = logging.getLogger("floerlab")

EXIT_OK, EXIT_CONVERGENCE, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3


class Writer:
    """Single funnel for every file of a run; stamps the config hash and version."""

    def __init__(self, root, cfg):
        self.root = root
        self.cfg = cfg
        os.makedirs(root, exist_ok=True)

    @property
    def meta(self):
        return {"config_hash": self.cfg.hash, "version": __version__}

    def path(self, name):
        return os.path.join(self.root, name)

    def json(self, name, doc):
        doc = {"meta": self.meta, **doc}
        with open(self.path(name), "w") as fh:
            fh.write(json.dumps(doc, sort_keys=True, indent=2))
            fh.write("\n")

    def csv(self, name, text):
        with open(self.path(name), "w") as fh:
            fh.write(f"# config_hash={self.cfg.hash} version={__version__}\n")
            fh.write(text)

    def container(self, name, header, arrays):
        write_container(self.path(name), {**header, **self.meta}, arrays)

    def resolved_config(self):
        self.json("resolved-config.json", {"config": self.cfg.resolved})


def _rows_csv(cols, rows):
    out = [",".join(cols)]
    for r in rows:
        out.append(",".join(f"{v:.17g}" if isinstance(v, float) else str(v) for v in r))
    return "\n".join(out) + "\n"


def _system(cfg):
    modes = build_lattice(cfg.spec)
    return make_system(cfg.spec, modes, cfg.coupling, cfg.shape)


def _solve_orbit(cfg, q, p=None, tol=None):
    sys_ = _system(cfg)
    pb = OrbitProblem(sys_)
    tol = cfg.solver["orbit_tol"] if tol is None else tol
    return newton_orbit(decoupled_initial(pb, q, p), pb, tol=tol, max_iter=cfg.solver["orbit_max_iter"])


def _orbit_arrays(orbit):
    return {"coeffs": orbit.loop.coeffs}


def _load_orbit(cfg, path):
    header, arrays = read_container(path)
    if header.get("kind") != "orbit":
        raise ValidationError(path, "container does not hold an orbit")
    sys_ = _system(cfg)
    pb = OrbitProblem(sys_, m_max=int(header["m_max"]))
    c = arrays["coeffs"]
    if c.shape != (pb.basis.n_slots, pb.basis.K):
        raise ValidationError(path, f"coefficient shape {c.shape} does not match the configured lattice")
    R = pb.residual(c)
    res = residual_norm(pb, R)
    return Orbit(LoopVector(pb.basis, c), res, pb, converged=True)


# subcommands ------------------------------------------------------------------------------


def cmd_spectrum(cfg, args, w):
    from .spectrum import admissibility_profile

    rep = admissibility_profile(cfg.spec, build_lattice(cfg.spec), [cfg.spec.h])
    w.json("spectrum.json", {"spec": cfg.spec.to_json_dict(), "report": rep.to_dict()})
    key = f"eps_min_times_theta_pow_h[{cfg.spec.h:g}]"
    rows = [(r["shell"], r["theta_min"], r["eps_min"], r[key]) for r in rep.shells]
    w.csv("spectrum_shells.csv", _rows_csv(["shell", "theta_min", "eps_min", "eps_min_times_theta_pow_h"], rows))
    return EXIT_OK


def cmd_simulate(cfg, args, w):
    sys_ = _system(cfg)
    t_final = args.t_final or cfg.simulate["t_final"]
    dt = args.dt or cfg.simulate["dt"]
    if t_final is None or dt is None:
        raise ValidationError("simulate.t_final" if t_final is None else "simulate.dt", "required for simulate")
    every = args.checkpoint_every if args.checkpoint_every is not None else cfg.simulate["checkpoint_every"]
    u = PhasePoint(np.array(cfg.initial["q"]), np.array(cfg.initial["p"]), FieldVector.zeros(sys_.lam))
    times, states = integrate(u, 0.0, t_final, dt, sys_)
    N = cfg.spec.N
    cols = ["t"] + [f"q{j}" for j in range(N)] + [f"p{j}" for j in range(N)] + ["energy", "field_h_half_norm"]
    rows = []
    for t, st in zip(times, states):
        rows.append([float(t)] + [float(v) for v in st.q] + [float(v) for v in st.p]
                    + [float(hamiltonian(st, t, sys_)), float(np.sqrt(st.field.half_norm_sq()))])
    name = os.path.basename(args.output) if args.output else "trajectory.csv"
    w.csv(name, _rows_csv(cols, rows))
    if every and every > 0:
        for i in range(0, len(states), every):
            st = states[i]
            w.container(f"checkpoint_{i:06d}.flcn", {"kind": "phase_point", "t": float(times[i])},
                        {"q": st.q, "p": st.p, "a": st.field.a, "b": st.field.b})
    return EXIT_OK


def _parse_sweep(text, cfg):
    if not text:
        return cfg.sweep
    out = {"k": [], "h_prime": [], "ell": []}
    for part in text.split(";"):
        if not part.strip():
            continue
        key, _, vals = part.partition("=")
        key = key.strip()
        if key not in out:
            raise ValidationError(f"--sweep.{key}", "expected k, h_prime or ell")
        conv = int if key in ("k", "ell") else float
        try:
            out[key] = [conv(v) for v in vals.split(",") if v.strip()]
        except ValueError:
            raise ValidationError(f"--sweep.{key}", f"cannot parse {vals!r}") from None
    return out


def cmd_orbit(cfg, args, w):
    from .spectrum import require_admissible

    require_admissible(cfg.spec, build_lattice(cfg.spec))
    tol = args.tol or cfg.solver["orbit_tol"]
    if args.init in (None, "decoupled"):
        orbit = _solve_orbit(cfg, cfg.initial["q"], cfg.initial["p"], tol)
    else:
        start = _load_orbit(cfg, args.init)
        orbit = newton_orbit(start.loop, start.problem, tol=tol, max_iter=cfg.solver["orbit_max_iter"])
    header = {"kind": "orbit", "m_max": orbit.problem.basis.m_max, "residual_norm": orbit.residual_norm,
              "converged": orbit.converged, "spec": cfg.spec.to_json_dict()}
    w.container("orbit.flcn", header, _orbit_arrays(orbit))
    if not orbit.converged:
        w.json("orbit.json", {"converged": False, "trail": orbit.trail, "notes": orbit.notes})
        raise ConvergenceError(f"orbit residual {orbit.residual_norm:.3e} above tolerance {tol:.1e}", orbit.trail)
    sweep = _parse_sweep(args.sweep, cfg)
    grid = [(k, h) for k in sweep["k"] or [cfg.spec.k] for h in sweep["h_prime"] or [cfg.resolved["model"]["h_prime_resolved"]]]
    rep = nondegeneracy_margin(orbit, threshold=cfg.solver["threshold"], seed=cfg.seed, sweep=grid)
    ells = []
    for ell in sweep["ell"]:
        r = nondegeneracy_margin(orbit, ell=ell, threshold=cfg.solver["threshold"], seed=cfg.seed,
                                 with_return_map=False)
        ells.append({"ell": ell, "sigma_min": r.sigma_min})
    w.json("orbit.json", {"converged": True, "iterations": orbit.iterations, "residual_norm": orbit.residual_norm,
                          "trail": orbit.trail, "notes": orbit.notes, "nondegeneracy": rep.to_dict(),
                          "ell_sweep": ells})
    rm = linearized_return_map(orbit)
    rows = [(i, float(mu.real), float(mu.imag), float(abs(mu - 1))) for i, mu in enumerate(rm["eigenvalues"])]
    w.csv("return_map_spectrum.csv", _rows_csv(["index", "re", "im", "distance_to_one"], rows))
    w.csv("loop_coefficients.csv", _loop_csv(orbit))
    return EXIT_OK


def _loop_csv(orbit):
    from .mode_space import loop_to_csv

    return loop_to_csv(orbit.loop)


def cmd_floer(cfg, args, w):
    from .floer import floer_newton, kernel_dimensions, require_converged as require_curve
    from .spectrum import require_admissible

    require_admissible(cfg.spec, build_lattice(cfg.spec))

    def end(path, q, label):
        if path:
            return _load_orbit(cfg, path)
        if q is None:
            raise ValidationError(f"floer.{label}", f"give --orbit-{label.split('_')[1]} or floer.{label}")
        return require_converged(_solve_orbit(cfg, q))

    u_plus = end(args.orbit_plus, cfg.floer["q_plus"], "q_plus")
    u_minus = end(args.orbit_minus, cfg.floer["q_minus"], "q_minus")
    if u_plus.problem.basis.m_max != u_minus.problem.basis.m_max:
        raise ValidationError("orbit_minus", "asymptotic orbits must share m_max")
    if u_plus.problem is not u_minus.problem:
        u_minus = Orbit(LoopVector(u_plus.problem.basis, u_minus.loop.coeffs), u_minus.residual_norm, u_plus.problem)
    s0 = args.s_half_width or cfg.floer["s_half_width"]
    n_s = cfg.floer["n_s"]
    if args.ds:
        if s0 is None:
            raise ValidationError("--ds", "needs a half width")
        n_s = int(round(2 * s0 / args.ds)) + 1
    tol = args.tol or cfg.solver["floer_tol"]
    curve = floer_newton(u_plus, u_minus, tol=tol, s_half_width=s0, n_s=n_s, max_iter=cfg.solver["floer_max_iter"])
    w.container("floer.flcn", {"kind": "floer_curve", "s": list(map(float, curve.strip.s)),
                               "residual_norm": curve.residual_norm, "m_max": curve.strip.basis.m_max},
                {"values": curve.strip.values})
    dm, dp, energy = curve.slice_distances()
    rows = [(float(s), float(a), float(b), float(e)) for s, a, b, e in zip(curve.strip.s, dp, dm, energy)]
    w.csv("floer_slices.csv", _rows_csv(["s", "distance_to_u_plus", "distance_to_u_minus", "energy_density"], rows))
    doc = {"converged": curve.converged, "iterations": curve.iterations, "residual_norm": curve.residual_norm,
           "trail": curve.trail, "notes": curve.notes, "n_s": curve.problem.n_s, "s_half_width": curve.s_half_width}
    if not curve.converged:
        w.json("floer.json", doc)
        require_curve(curve)
    doc["kernel"] = kernel_dimensions(curve, seed=cfg.seed).to_dict()
    w.json("floer.json", doc)
    return EXIT_OK


def run_suite(cfg, suite, seed):
    """Run one verification suite from config values; returns a VerificationReport."""
    from . import fredholm_lab as fl

    opts = dict(cfg.verify.get(suite, {}))
    spec = cfg.spec
    q = opts.pop("q_star", cfg.initial["q"])
    if suite == "isometry":
        return fl.verify_isometry(opts.get("n_samples", 100), spec, opts.get("pairs"), seed=seed)
    if suite == "inclusions":
        return fl.verify_inclusions(spec, opts.get("k"), opts.get("h_prime"), opts.get("h_double_primes"),
                                    opts.get("h"), opts.get("radii"))
    if suite == "genericity":
        return fl.genericity_probe(spec, cfg.coupling, opts.get("delta", 1e-3), opts.get("trials", 20), q,
                                   shape=cfg.shape, threshold=cfg.solver["threshold"], seed=seed,
                                   n_terms=opts.get("n_terms", 3))
    orbit = require_converged(_solve_orbit(cfg, q))
    n_max = spec.n_max
    if suite == "tail":
        ells = opts.get("ells", [e for e in (4, 8, 16, 32) if e < n_max] or [max(1, n_max // 2)])
        return fl.tail_decay_profile(orbit, ells, h=opts.get("h"), seed=seed)
    if suite == "stars":
        return fl.verify_star_inequalities(orbit, opts.get("ells"), sigmas=tuple(opts.get("sigmas", (0.0, 1.0, 4.0))),
                                           seed=seed)
    s0 = opts.get("s_half_width", cfg.floer["s_half_width"] or 6.0)
    n_s = opts.get("n_s", cfg.floer["n_s"])
    q_minus, q_plus = cfg.floer["q_minus"], cfg.floer["q_plus"]
    if q_minus is not None and q_plus is not None and opts.get("curve", "constant") == "connecting":
        from .floer import floer_newton, require_converged as require_curve

        um = require_converged(_solve_orbit(cfg, q_minus))
        up = require_converged(_solve_orbit(cfg, q_plus))
        um = Orbit(LoopVector(up.problem.basis, um.loop.coeffs), um.residual_norm, up.problem)
        curve = require_curve(floer_newton(up, um, tol=cfg.solver["floer_tol"], s_half_width=s0, n_s=n_s,
                                           max_iter=cfg.solver["floer_max_iter"]))
    else:
        curve = fl.constant_floer_curve(orbit, s0, n_s)
    ell = opts.get("ell", max(1, n_max // 2))
    if suite == "adjoint":
        return fl.adjoint_kernel_dim(curve, ell, seed=seed)
    refinements = []
    if opts.get("refine", True) and opts.get("curve", "constant") == "constant":
        refinements.append(("ds/2", fl.constant_floer_curve(orbit, s0, 2 * n_s - 2)))
        half = max(1, orbit.problem.basis.m_max // 2)
        refinements.append(("m_max/2", fl.constant_floer_curve(fl.refine_orbit(orbit, half), s0, n_s)))
    return fl.semifredholm_constant(curve, ell, s0=opts.get("s0"), n_random=opts.get("n_random", 8), seed=seed,
                                    refinements=refinements)


def cmd_verify(cfg, args, w):
    seed = cfg.seed if args.seed is None else args.seed
    rep = run_suite(cfg, args.suite, seed)
    doc = {"seed": seed, **rep.to_dict()}
    w.json(f"{args.suite}.json", doc)
    for name in sorted(rep.series):
        w.csv(f"{args.suite}_{name}.csv", rep.series_csv(name))
    return EXIT_OK


def cmd_report(args):
    root = args.run_dir
    if not os.path.isdir(root):
        raise ValidationError("--run-dir", f"{root} is not a directory")
    lines = [f"# Run summary: {root}", ""]
    for path in sorted(glob.glob(os.path.join(root, "*.json"))):
        name = os.path.basename(path)
        if name == "resolved-config.json":
            continue
        with open(path) as fh:
            doc = json.load(fh)
        meta = doc.get("meta", {})
        lines += [f"## {name}", "", f"config hash `{meta.get('config_hash')}`, version {meta.get('version')}", ""]
        lines += ["| key | value |", "|---|---|"]
        for key in sorted(doc):
            if key == "meta":
                continue
            val = doc[key]
            if isinstance(val, (dict, list)):
                val = json.dumps(val, sort_keys=True)
                if len(val) > 120:
                    val = val[:117] + "..."
            lines.append(f"| {key} | {str(val).replace('|', '/')} |")
        lines.append("")
    for path in sorted(glob.glob(os.path.join(root, "*.csv"))):
        with open(path) as fh:
            n = sum(1 for _ in fh) - 2
        lines.append(f"- `{os.path.basename(path)}`: {n} rows")
    with open(os.path.join(root, "report.md"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return EXIT_OK


COMMANDS = {"spectrum": cmd_spectrum, "simulate": cmd_simulate, "orbit": cmd_orbit, "floer": cmd_floer,
            "verify": cmd_verify}


def build_parser():
    p = argparse.ArgumentParser(prog="floerlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, help_):
        sp_ = sub.add_parser(name, help=help_)
        sp_.add_argument("--config", required=True)
        sp_.add_argument("--out", default=None, help="run directory (default: $FLOERLAB_OUTPUT_ROOT/<cmd>-<hash>)")
        return sp_

    with_config("spectrum", "small divisors and admissibility profile")
    s = with_config("simulate", "Strang integration of the coupled system")
    s.add_argument("--t-final", type=float)
    s.add_argument("--dt", type=float)
    s.add_argument("--output", default=None)
    s.add_argument("--checkpoint-every", type=int, default=None)
    o = with_config("orbit", "periodic orbit and nondegeneracy margin")
    o.add_argument("--init", default="decoupled")
    o.add_argument("--tol", type=float)
    o.add_argument("--sweep", default=None, help='e.g. "k=2,3;h_prime=2.5,3;ell=2,4"')
    f = with_config("floer", "Floer curve between two orbits")
    f.add_argument("--orbit-plus")
    f.add_argument("--orbit-minus")
    f.add_argument("--s-half-width", type=float)
    f.add_argument("--ds", type=float)
    f.add_argument("--tol", type=float)
    v = with_config("verify", "verification suites")
    v.add_argument("--suite", required=True, choices=SUITES)
    v.add_argument("--seed", type=int, default=None)
    r = sub.add_parser("report", help="aggregate a run directory into report.md")
    r.add_argument("--run-dir", required=True)
    return p


def dispatch(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        if args.command == "report":
            return cmd_report(args)
        cfg = load_config(args.config)
        if args.out:
            cfg.output_dir = args.out
        w = Writer(cfg.output_root(args.command), cfg)
        w.resolved_config()
        return COMMANDS[args.command](cfg, args, w)
    except ConfigParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.trail:
            print("residual trail: " + ", ".join(f"{x:.3e}" for x in exc.trail), file=sys.stderr)
        return EXIT_CONVERGENCE


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    sys.exit(dispatch(argv))
