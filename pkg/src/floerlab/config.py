"""Run configuration: JSON loading, defaults and cross-field validation."""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .dynamics import CouplingSpec, ShapeFunction
from .mode_space import MODELS, ModelSpec, build_lattice, config_hash
from .spectrum import admissibility_profile, eigenvalues, model_small_divisors, resonant_mask
from .validation import ValidationError, check_h_prime_range, check_k_range

OUTPUT_ROOT_ENV = "FLOERLAB_OUTPUT_ROOT"
SUITES = ("isometry", "inclusions", "tail", "stars", "semifredholm", "adjoint", "genericity")


class ConfigParseError(ValueError):
    pass


MODEL_DEFAULTS = {"model": "wave", "N": 1, "a": 1, "T": 2.5, "h": 6.0, "h_prime": None, "k": 2, "n_max": 8,
                  "m_max": None}
SOLVER_DEFAULTS = {"orbit_tol": 1e-10, "orbit_max_iter": 30, "floer_tol": 1e-9, "floer_max_iter": 30,
                   "threshold": 1e-6}
SECTION_DEFAULTS = {
    "lattice": {"include_zero_mode": False},
    "coupling": {"kappa": 1.0, "interaction": "polynomial", "poly": [1.0], "external": [], "smear_external": True},
    "shape": {"sigma": 0.5},
    "solver": SOLVER_DEFAULTS,
    "sweep": {"k": [], "h_prime": [], "ell": []},
    "initial": {"q": None, "p": None},
    "simulate": {"t_final": None, "dt": None, "checkpoint_every": 0},
    "floer": {"q_minus": None, "q_plus": None, "s_half_width": None, "n_s": 64},
    "verify": {},
}
TOP_KEYS = {"model", "seed", "output_dir"} | set(SECTION_DEFAULTS)


@dataclass
class RunConfig:
    spec: ModelSpec
    lattice: dict
    coupling: CouplingSpec
    shape: ShapeFunction
    solver: dict
    sweep: dict
    initial: dict
    simulate: dict
    floer: dict
    verify: dict
    seed: int = 0
    output_dir: str | None = None
    h0_fit: float | None = None
    resolved: dict = field(default_factory=dict)

    @property
    def hash(self):
        return config_hash(self.resolved)

    def output_root(self, subcommand):
        if self.output_dir:
            return self.output_dir
        root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        return os.path.join(root, f"{subcommand}-{self.hash}")


def _section(doc, name, defaults):
    raw = doc.get(name, {})
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValidationError(name, "must be an object")
    if name in ("verify",):
        return dict(raw)
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ValidationError(f"{name}.{unknown[0]}", "unknown key")
    out = dict(defaults)
    out.update(raw)
    return out


def _number(x, path, integer=False, positive=False, allow_none=False):
    if x is None and allow_none:
        return None
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ValidationError(path, f"must be a number, got {x!r}")
    if integer and int(x) != x:
        raise ValidationError(path, f"must be an integer, got {x!r}")
    if not math.isfinite(x):
        raise ValidationError(path, "must be finite")
    if positive and x <= 0:
        raise ValidationError(path, f"must be positive, got {x!r}")
    return int(x) if integer else float(x)


def _vector(x, N, path):
    if x is None:
        return None
    if isinstance(x, (int, float)) and not isinstance(x, bool):
        x = [x]
    if not isinstance(x, list) or len(x) != N:
        raise ValidationError(path, f"must be a list of {N} numbers")
    return [_number(v, f"{path}[{i}]") for i, v in enumerate(x)]


def validate(doc):
    """Build a :class:`RunConfig` from a parsed JSON document, filling defaults."""
    if not isinstance(doc, dict):
        raise ValidationError("<root>", "config must be a JSON object")
    unknown = sorted(set(doc) - TOP_KEYS)
    if unknown:
        raise ValidationError(unknown[0], "unknown key")
    m = _section(doc, "model", MODEL_DEFAULTS)
    if m["model"] not in MODELS:
        raise ValidationError("model.model", f"must be one of {MODELS}")
    m["N"] = _number(m["N"], "model.N", integer=True, positive=True)
    m["a"] = _number(m["a"], "model.a", integer=True)
    if m["a"] < 0:
        raise ValidationError("model.a", "must be nonnegative")
    m["T"] = _number(m["T"], "model.T", positive=True)
    m["h"] = _number(m["h"], "model.h", positive=True)
    m["k"] = _number(m["k"], "model.k", integer=True)
    m["n_max"] = _number(m["n_max"], "model.n_max", integer=True, positive=True)
    m["m_max"] = _number(m["m_max"], "model.m_max", integer=True, allow_none=True)
    m["h_prime"] = _number(m["h_prime"], "model.h_prime", allow_none=True)
    d = 1 if m["model"] == "wave" else 2
    check_k_range(m["k"], m["h"], d, path="model.k")
    if m["m_max"] is not None and m["m_max"] < 0:
        raise ValidationError("model.m_max", "must be nonnegative")
    lattice = _section(doc, "lattice", SECTION_DEFAULTS["lattice"])
    zero_mean = m["model"] == "schrodinger" or m["a"] == 0
    if lattice["include_zero_mode"] and zero_mean:
        raise ValidationError("lattice.include_zero_mode",
                              "the zero mode has eigenvalue 0 for this model and must be excluded (zero-mean rule)")
    try:
        spec = ModelSpec(**m)
    except ValidationError as exc:
        raise ValidationError(f"model.{exc.path}", str(exc).split(": ", 1)[-1]) from None
    modes = build_lattice(spec)
    h0 = None
    lam = eigenvalues(spec, modes)
    eps = model_small_divisors(spec, modes)
    if not resonant_mask(lam, eps).any():
        fit = admissibility_profile(spec, modes, cf_depth=1)
        h0 = fit.h0_fit if np.isfinite(fit.h0_fit) else None
    if spec.h_prime is not None and h0 is not None:
        check_h_prime_range(spec.h_prime, h0, spec.h, path="model.h_prime")
    elif spec.h_prime is not None and not spec.h_prime < spec.h:
        raise ValidationError("model.h_prime", f"must be below h={spec.h}")

    cpl = _section(doc, "coupling", SECTION_DEFAULTS["coupling"])
    cpl["kappa"] = _number(cpl["kappa"], "coupling.kappa")
    if not isinstance(cpl["external"], list):
        raise ValidationError("coupling.external", "must be a list of terms")
    for i, term in enumerate(cpl["external"]):
        if not isinstance(term, dict):
            raise ValidationError(f"coupling.external[{i}]", "must be an object")
        bad = sorted(set(term) - {"k", "amp", "harmonic", "phase"})
        if bad:
            raise ValidationError(f"coupling.external[{i}].{bad[0]}", "unknown key")
        if "k" in term:
            _vector(term["k"], spec.N, f"coupling.external[{i}].k")
    if not isinstance(cpl["poly"], list) or not cpl["poly"]:
        raise ValidationError("coupling.poly", "must be a nonempty list")
    try:
        coupling = CouplingSpec(**cpl)
    except ValidationError as exc:
        raise ValidationError(exc.path, str(exc).split(": ", 1)[-1]) from None
    sh = _section(doc, "shape", SECTION_DEFAULTS["shape"])
    sh["sigma"] = _number(sh["sigma"], "shape.sigma", positive=True)
    solver = _section(doc, "solver", SECTION_DEFAULTS["solver"])
    for key in ("orbit_tol", "floer_tol", "threshold"):
        solver[key] = _number(solver[key], f"solver.{key}", positive=True)
    for key in ("orbit_max_iter", "floer_max_iter"):
        solver[key] = _number(solver[key], f"solver.{key}", integer=True, positive=True)
    sweep = _section(doc, "sweep", SECTION_DEFAULTS["sweep"])
    for key in sweep:
        if not isinstance(sweep[key], list):
            raise ValidationError(f"sweep.{key}", "must be a list")
    for i, kk in enumerate(sweep["k"]):
        check_k_range(kk, spec.h, spec.d, path=f"sweep.k[{i}]")
    for i, hp in enumerate(sweep["h_prime"]):
        _number(hp, f"sweep.h_prime[{i}]")
    for i, ell in enumerate(sweep["ell"]):
        e = _number(ell, f"sweep.ell[{i}]", integer=True, positive=True)
        if e > spec.n_max:
            raise ValidationError(f"sweep.ell[{i}]", f"must not exceed n_max={spec.n_max}")
    initial = _section(doc, "initial", SECTION_DEFAULTS["initial"])
    initial["q"] = _vector(initial["q"], spec.N, "initial.q") or [0.0] * spec.N
    initial["p"] = _vector(initial["p"], spec.N, "initial.p") or [0.0] * spec.N
    sim = _section(doc, "simulate", SECTION_DEFAULTS["simulate"])
    sim["t_final"] = _number(sim["t_final"], "simulate.t_final", positive=True, allow_none=True)
    sim["dt"] = _number(sim["dt"], "simulate.dt", positive=True, allow_none=True)
    sim["checkpoint_every"] = _number(sim["checkpoint_every"], "simulate.checkpoint_every", integer=True)
    fl = _section(doc, "floer", SECTION_DEFAULTS["floer"])
    fl["q_minus"] = _vector(fl["q_minus"], spec.N, "floer.q_minus")
    fl["q_plus"] = _vector(fl["q_plus"], spec.N, "floer.q_plus")
    fl["s_half_width"] = _number(fl["s_half_width"], "floer.s_half_width", positive=True, allow_none=True)
    fl["n_s"] = _number(fl["n_s"], "floer.n_s", integer=True, positive=True)
    if fl["n_s"] < 4:
        raise ValidationError("floer.n_s", "need at least 4 s-nodes")
    ver = _section(doc, "verify", {})
    bad = sorted(set(ver) - set(SUITES))
    if bad:
        raise ValidationError(f"verify.{bad[0]}", f"unknown suite; expected one of {SUITES}")
    for name, block in ver.items():
        if not isinstance(block, dict):
            raise ValidationError(f"verify.{name}", "must be an object")
    seed = _number(doc.get("seed", 0), "seed", integer=True)
    out = doc.get("output_dir")
    if out is not None and not isinstance(out, str):
        raise ValidationError("output_dir", "must be a string")
    resolved = {
        "model": spec.to_json_dict(), "lattice": lattice, "coupling": coupling.to_dict(), "shape": sh,
        "solver": solver, "sweep": sweep, "initial": initial, "simulate": sim, "floer": fl, "verify": ver,
        "seed": seed, "output_dir": out,
    }
    resolved["model"]["h_prime_resolved"] = (spec.h_prime if spec.h_prime is not None
                                             else 0.5 * (2 * spec.d + spec.h))
    resolved["model"]["h0_fit"] = h0
    return RunConfig(spec, lattice, coupling, ShapeFunction(sh["sigma"]), solver, sweep, initial, sim, fl, ver,
                     seed, out, h0, resolved)


def load_config(path):
    """Parse and validate a JSON config file.

    Raises :class:`ConfigParseError` for unreadable or malformed files and
    :class:`ValidationError` (with a field path) for invalid content.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigParseError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return validate(doc)
