"""Frequency lattices, Hilbert-scale weights and the loop/strip norm families.

Conventions
-----------
* Lattice modes ``n`` with ``|n|_inf <= n_max`` are enumerated lexicographically;
  the weight is ``theta_n = (1 + |n|^2)**0.5``.
* A loop is stored in *slots*: ``N`` particle slots followed by one slot per
  field mode.  Every slot carries a complex coordinate ``z = (x - i y)/sqrt(2)``
  built from a canonical pair ``(x, y)``; ``(q_j, p_j)`` for the particle and
  ``(lambda_n^{1/2} a_n, lambda_n^{1/2} b_n)`` for the field.  For a field slot
  ``|z|`` equals the modulus of the H-normalized coefficient.
* Slot ``s`` is expanded as ``z_s(t) = sum_m c_{s,m} exp(-i eps_s t) exp(2 pi i m t/T)``
  with ``eps_s = 0`` on particle slots.  Field slots therefore satisfy the
  twisted periodicity ``z(t+T) = exp(-i eps T) z(t)`` by construction.
* ``i d/dt`` acts on ``c_{s,m}`` as multiplication by ``mu_{s,m} = -(2 pi m/T - eps_s)``.
  Only ``|mu|`` enters any norm.
"""

import hashlib
import io
import itertools
import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from .validation import ValidationError, check_int_at_least, check_positive

MODELS = ("wave", "schrodinger")


@dataclass(frozen=True)
class ModelSpec:
    """PDE model parameters.

    ``h_prime`` may be left as ``None`` and resolved later from the fitted
    decay exponent; ``m_max`` ``None`` means ``4 * n_max**d``.
    """

    model: str = "wave"
    N: int = 1
    a: int = 1
    T: float = 2.5
    h: float = 6.0
    h_prime: float | None = None
    k: int = 2
    n_max: int = 8
    m_max: int | None = None

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValidationError("model", f"must be one of {MODELS}, got {self.model!r}")
        check_int_at_least(self.N, 1, "N")
        check_positive(self.T, "T")
        check_int_at_least(self.n_max, 1, "n_max")
        if self.model == "wave":
            check_int_at_least(self.a, 0, "a")
        if self.m_max is not None:
            check_int_at_least(self.m_max, 0, "m_max")

    @property
    def d(self):
        return 1 if self.model == "wave" else 2

    @property
    def zero_mean(self):
        return self.model == "schrodinger" or self.a == 0

    @property
    def resolved_m_max(self):
        return self.m_max if self.m_max is not None else 4 * self.n_max**self.d

    def to_json_dict(self):
        out = asdict(self)
        out["d"] = self.d
        out["m_max"] = self.resolved_m_max
        return out

    @classmethod
    def from_json_dict(cls, doc):
        keys = {"model", "N", "a", "T", "h", "h_prime", "k", "n_max", "m_max"}
        return cls(**{k: doc[k] for k in keys if k in doc})

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass(frozen=True, eq=False)
class ModeSet:
    N: int
    n_max: int
    vectors: np.ndarray
    theta: np.ndarray
    zero_excluded: bool

    def __len__(self):
        return len(self.vectors)

    @property
    def sq_norm(self):
        return np.sum(self.vectors.astype(np.int64) ** 2, axis=1)

    def index_of(self, n):
        n = np.atleast_1d(np.asarray(n))
        hit = np.nonzero(np.all(self.vectors == n, axis=1))[0]
        if hit.size == 0:
            raise KeyError(tuple(n))
        return int(hit[0])

    def radius(self):
        return np.sqrt(self.sq_norm.astype(float))


def build_lattice(spec, n_max=None):
    """Lexicographic lattice ``|n|_inf <= n_max``, zero mode dropped when the model needs zero mean."""
    n_max = spec.n_max if n_max is None else n_max
    if isinstance(n_max, bool) or int(n_max) != n_max or n_max < 1:
        raise ValidationError("n_max", f"must be an integer >= 1, got {n_max!r}")
    n_max = int(n_max)
    rng = range(-n_max, n_max + 1)
    vecs = np.array(list(itertools.product(rng, repeat=spec.N)), dtype=np.int64)
    if spec.zero_mean:
        vecs = vecs[np.any(vecs != 0, axis=1)]
    theta = np.sqrt(1.0 + np.sum(vecs**2, axis=1))
    return ModeSet(spec.N, n_max, vecs, theta, spec.zero_mean)


def lex_positive(vecs):
    """True where the first nonzero component is positive."""
    vecs = np.atleast_2d(vecs)
    out = np.zeros(len(vecs), dtype=bool)
    decided = np.zeros(len(vecs), dtype=bool)
    for j in range(vecs.shape[1]):
        c = vecs[:, j]
        out |= (~decided) & (c > 0)
        decided |= c != 0
    return out


def real_basis_values(modes, q):
    """Values and gradients of the L2-orthonormal real basis at points ``q``.

    ``xi_n = sqrt(2) cos(n.q) / (2 pi)^{N/2}`` for lexicographically positive
    ``n``, ``sqrt(2) sin(-n.q) / (2 pi)^{N/2}`` for negative ``n`` and
    ``(2 pi)^{-N/2}`` for ``n = 0``.

    Returns ``(val, grad, hess)`` with shapes ``(P, M)``, ``(P, M, N)``,
    ``(P, M, N, N)`` where ``P`` is the number of points.
    """
    q = np.atleast_2d(np.asarray(q, dtype=float))
    vecs = modes.vectors.astype(float)
    pos = lex_positive(modes.vectors)
    zero = np.all(modes.vectors == 0, axis=1)
    norm = (2 * np.pi) ** (-modes.N / 2)
    phase = q @ vecs.T  # (P, M)
    c, s = np.cos(phase), np.sin(phase)
    amp = np.where(zero, norm, np.sqrt(2) * norm)
    # positive: cos(n.q); negative: sin(-n.q) = -sin(n.q)
    val = np.where(pos, c, np.where(zero, 1.0, -s)) * amp
    dval = np.where(pos, -s, np.where(zero, 0.0, -c)) * amp  # derivative wrt phase
    ddval = -val
    ddval = np.where(zero, 0.0, ddval)
    grad = dval[:, :, None] * vecs[None, :, :]
    hess = ddval[:, :, None, None] * vecs[None, :, :, None] * vecs[None, :, None, :]
    return val, grad, hess


class LoopBasis:
    """Index bookkeeping for the twisted loop basis over a lattice.

    Packed real vectors are laid out slot-major, then ``m`` ascending, then
    ``(Re, Im)``; the Euclidean norm of a packed vector equals the L2 norm of
    the loop averaged over one period.
    """

    def __init__(self, spec, modes, m_max=None, eps=None, lam=None):
        from .spectrum import eigenvalues, model_small_divisors

        self.spec = spec
        self.modes = modes
        self.m_max = int(spec.resolved_m_max if m_max is None else m_max)
        self.N = spec.N
        self.M = len(modes)
        self.lam = eigenvalues(spec, modes) if lam is None else np.asarray(lam, dtype=float)
        self.eps = model_small_divisors(spec, modes) if eps is None else np.asarray(eps, dtype=float)
        self.T = float(spec.T)
        self.omega = 2 * np.pi / self.T
        self.m = np.arange(-self.m_max, self.m_max + 1)
        self.K = len(self.m)
        self.n_slots = self.N + self.M
        self.slot_eps = np.concatenate([np.zeros(self.N), self.eps])
        self.slot_theta = np.concatenate([np.ones(self.N), modes.theta])
        self.slot_lam = np.concatenate([np.zeros(self.N), self.lam])
        self.is_field = np.concatenate([np.zeros(self.N, bool), np.ones(self.M, bool)])
        # lambda_{s,m} = 2 pi m / T - eps_s
        self.symbol = self.omega * self.m[None, :] - self.slot_eps[:, None]
        self.dim = 2 * self.n_slots * self.K

    # packing ---------------------------------------------------------------
    def pack(self, coeffs):
        c = np.asarray(coeffs, dtype=complex).reshape(self.n_slots, self.K)
        return np.stack([c.real, c.imag], axis=-1).reshape(-1)

    def unpack(self, x):
        x = np.asarray(x, dtype=float).reshape(self.n_slots, self.K, 2)
        return x[..., 0] + 1j * x[..., 1]

    def slot_slice(self, s):
        return slice(2 * s * self.K, 2 * (s + 1) * self.K)

    def packed_symbol(self):
        return np.repeat(self.symbol.reshape(-1), 2)

    def packed_theta(self):
        return np.repeat(np.repeat(self.slot_theta, self.K), 2)

    def packed_field_mask(self):
        return np.repeat(np.repeat(self.is_field, self.K), 2)

    def packed_mode_radius(self):
        r = np.concatenate([np.zeros(self.N), modes_radius(self.modes)])
        return np.repeat(np.repeat(r, self.K), 2)

    # weights ----------------------------------------------------------------
    def weights_standard(self, k, h_prime):
        """Squared per-entry weights of the standard (k, h') loop norm."""
        lam = self.packed_symbol()
        w = self.packed_theta() ** (2 * h_prime) * (lam ** (2 * k) + 1.0)
        return w

    def weights_modified(self, k, h_prime):
        """Squared weights of the modified norm; particle slots keep standard weights."""
        lam = self.packed_symbol()
        mod = self.packed_theta() ** (2 * h_prime) * (lam ** (2 * k) + lam**2)
        return np.where(self.packed_field_mask(), mod, self.weights_standard(k, h_prime))

    def zeros(self):
        return LoopVector(self, np.zeros((self.n_slots, self.K), dtype=complex))

    def describe(self):
        return {
            "N": self.N,
            "n_modes": self.M,
            "m_max": self.m_max,
            "T": self.T,
            "slot_order": "particle slots then field modes in lexicographic order",
        }


def modes_radius(modes):
    return np.sqrt(modes.sq_norm.astype(float))


@dataclass(eq=False)
class LoopVector:
    """Coefficients ``c_{s,m}`` over a :class:`LoopBasis` (shape ``(n_slots, K)``)."""

    basis: LoopBasis
    coeffs: np.ndarray

    @property
    def particle(self):
        return self.coeffs[: self.basis.N]

    @property
    def field(self):
        return self.coeffs[self.basis.N :]

    def packed(self):
        return self.basis.pack(self.coeffs)

    @classmethod
    def from_packed(cls, basis, x):
        return cls(basis, basis.unpack(x))

    def i_dt(self):
        """``i d/dt`` applied termwise: multiplication by ``-(2 pi m/T - eps_s)``."""
        return LoopVector(self.basis, -self.basis.symbol * self.coeffs)

    def __add__(self, other):
        return LoopVector(self.basis, self.coeffs + other.coeffs)

    def __sub__(self, other):
        return LoopVector(self.basis, self.coeffs - other.coeffs)

    def __mul__(self, c):
        return LoopVector(self.basis, c * self.coeffs)

    __rmul__ = __mul__

    def copy(self):
        return LoopVector(self.basis, self.coeffs.copy())

    def basis_vector(self, slot, m, value=1.0):
        out = np.zeros_like(self.coeffs)
        out[slot, m + self.basis.m_max] = value
        return LoopVector(self.basis, out)


def _slot_rows(basis, include_particle):
    rows = np.ones(basis.n_slots, dtype=bool)
    if not include_particle:
        rows[: basis.N] = False
    return rows


def loop_norm_standard(xi, k, h_prime, include_particle=True):
    """``(sum theta^{2h'} (lambda_{n,m}^{2k} + 1) |c|^2)^{1/2}`` plus the particle H^k part."""
    if k < 0:
        raise ValidationError("k", "must be >= 0")
    b = xi.basis
    w = b.slot_theta[:, None] ** (2 * h_prime) * (b.symbol ** (2 * k) + 1.0)
    rows = _slot_rows(b, include_particle)
    return float(np.sqrt(np.sum((w * np.abs(xi.coeffs) ** 2)[rows])))


def loop_norm_modified(xi, k, h_prime, include_particle=True):
    """``(sum theta^{2h'} (lambda^{2k} + lambda^2) |c|^2)^{1/2}``; particle slots use the standard norm."""
    if k < 1:
        raise ValidationError("k", "must be >= 1")
    b = xi.basis
    lam = b.symbol
    w = b.slot_theta[:, None] ** (2 * h_prime) * (lam ** (2 * k) + lam**2)
    w[: b.N] = lam[: b.N] ** (2 * k) + 1.0
    rows = _slot_rows(b, include_particle)
    return float(np.sqrt(np.sum((w * np.abs(xi.coeffs) ** 2)[rows])))


def scale_norm(v, h, modes):
    """H_h norm of a field: ``(sum theta^{2h} |u_hat|^2)^{1/2}``."""
    u = v.complex_coefficients()
    return float(np.sqrt(np.sum(modes.theta ** (2 * h) * np.abs(u) ** 2)))


# strips -------------------------------------------------------------------------


def s_derivative_matrix(n, ds):
    """Second-order difference matrix: centered inside, one-sided at the ends."""
    import scipy.sparse as sp

    if n < 3:
        raise ValidationError("n_s", "strip needs at least 3 nodes")
    rows, cols, vals = [], [], []
    for j in range(1, n - 1):
        rows += [j, j]
        cols += [j - 1, j + 1]
        vals += [-0.5 / ds, 0.5 / ds]
    rows += [0, 0, 0, n - 1, n - 1, n - 1]
    cols += [0, 1, 2, n - 1, n - 2, n - 3]
    vals += [-1.5 / ds, 2.0 / ds, -0.5 / ds, 1.5 / ds, -2.0 / ds, 0.5 / ds]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def trapezoid_weights(n, ds):
    w = np.full(n, ds)
    w[0] = w[-1] = 0.5 * ds
    return w


@dataclass(eq=False)
class StripField:
    """Loop coefficients on a uniform grid ``s_j`` in ``[-S0, S0]``.

    ``values`` has shape ``(n_s, n_slots, K)``.  ``tags`` records the asymptotic
    behavior at the two ends (``"zero"`` means the field is required to decay).
    """

    basis: LoopBasis
    s: np.ndarray
    values: np.ndarray
    tags: tuple = ("zero", "zero")

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        if s.size < 3:
            raise ValidationError("n_s", "strip needs at least 3 nodes")
        d = np.diff(s)
        if not np.allclose(d, d[0], rtol=1e-10, atol=0):
            raise ValidationError("s", "grid must be uniform")
        self.s = s

    @property
    def ds(self):
        return float(self.s[1] - self.s[0])

    @property
    def half_width(self):
        return float(self.s[-1])

    @classmethod
    def zeros(cls, basis, s_half_width, n_s):
        s = np.linspace(-s_half_width, s_half_width, n_s)
        return cls(basis, s, np.zeros((n_s, basis.n_slots, basis.K), dtype=complex))

    def slice(self, j):
        return LoopVector(self.basis, self.values[j])

    def dbar(self):
        """``d/ds + i d/dt`` with second-order s-differences."""
        D = s_derivative_matrix(len(self.s), self.ds)
        flat = self.values.reshape(len(self.s), -1)
        ds_part = (D @ flat).reshape(self.values.shape)
        return StripField(self.basis, self.s, ds_part - self.basis.symbol[None] * self.values, self.tags)


def strip_norm_standard(f, k, h_prime, include_particle=True):
    """Discrete H^k(s, t) norm: ``||f||^2 + ||d_t^k f||^2 + ||d_s^k f||^2`` with theta^{h'} weights."""
    b = f.basis
    wt = trapezoid_weights(len(f.s), f.ds)
    theta_w = b.slot_theta[None, :, None] ** (2 * h_prime)
    rows = _slot_rows(b, include_particle)
    amp2 = np.abs(f.values) ** 2
    tot = (theta_w * (np.abs(b.symbol[None]) ** (2 * k) + 1.0) * amp2)[:, rows]
    if k > 0:
        D = s_derivative_matrix(len(f.s), f.ds)
        g = f.values.reshape(len(f.s), -1)
        for _ in range(k):
            g = D @ g
        g = g.reshape(f.values.shape)
        tot = tot + (theta_w * np.abs(g) ** 2)[:, rows]
    return float(np.sqrt(np.sum(wt[:, None, None] * tot)))


def strip_norm_modified(f, k, h_prime, include_particle=True):
    """Modified strip norm: the discrete H^{k-1} norm of ``dbar f``."""
    if tuple(f.tags) != ("zero", "zero"):
        raise ValidationError("tags", f"strip norm needs decaying ends, got tags {f.tags}")
    return strip_norm_standard(f.dbar(), k - 1, h_prime, include_particle)


# serialization ---------------------------------------------------------------------

CONTAINER_MAGIC = b"FLCN"


def config_hash(doc):
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_container(path, header, arrays):
    """Binary container: magic, header length, JSON header, little-endian float64 data."""
    header = dict(header)
    header["arrays"] = []
    chunks = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if np.iscomplexobj(arr):
            data = np.stack([arr.real, arr.imag], axis=-1).astype("<f8")
            kind = "complex"
        else:
            data = arr.astype("<f8")
            kind = "real"
        header["arrays"].append({"name": name, "shape": list(arr.shape), "kind": kind})
        chunks.append(data.tobytes(order="C"))
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(np.array([len(hb)], dtype="<u8").tobytes())
        fh.write(hb)
        for c in chunks:
            fh.write(c)


def read_container(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CONTAINER_MAGIC:
        raise ValidationError("container", f"{path} is not a coefficient container")
    n = int(np.frombuffer(blob[4:12], dtype="<u8")[0])
    header = json.loads(blob[12 : 12 + n].decode())
    off = 12 + n
    arrays = {}
    for meta in header["arrays"]:
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) * (2 if meta["kind"] == "complex" else 1)
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
        off += 8 * count
        if meta["kind"] == "complex":
            data = data.reshape(shape + (2,))
            arrays[meta["name"]] = data[..., 0] + 1j * data[..., 1]
        else:
            arrays[meta["name"]] = data.reshape(shape).copy()
    return header, arrays


def loop_to_csv(xi):
    """CSV rows ``n components, m, re, im``; particle slots are labelled ``particle<j>``."""
    b = xi.basis
    buf = io.StringIO()
    ncols = ",".join(f"n{j}" for j in range(b.N))
    buf.write(f"{ncols},m,re,im\n")
    for s in range(b.n_slots):
        if s < b.N:
            label = ",".join(f"particle{s}" if j == 0 else "" for j in range(b.N))
        else:
            label = ",".join(str(int(v)) for v in b.modes.vectors[s - b.N])
        for j, m in enumerate(b.m):
            c = xi.coeffs[s, j]
            buf.write(f"{label},{m},{c.real:.17g},{c.imag:.17g}\n")
    return buf.getvalue()
