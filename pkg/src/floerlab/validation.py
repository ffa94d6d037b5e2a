"""Error types and small argument checks shared by every module."""

import numpy as np


class ValidationError(ValueError):
    """Invalid configuration or argument; ``path`` names the offending field."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


class InadmissibleError(ValidationError):
    """The spectrum has an exact resonance (some small divisor vanishes)."""


class ConvergenceError(RuntimeError):
    """A nonlinear solver failed to reach its tolerance."""

    def __init__(self, message, trail=None):
        super().__init__(message)
        self.trail = list(trail or [])


def check_positive(value, path):
    if not np.isfinite(value) or value <= 0:
        raise ValidationError(path, f"must be positive, got {value!r}")
    return value


def check_int_at_least(value, lower, path):
    if isinstance(value, bool) or int(value) != value:
        raise ValidationError(path, f"must be an integer, got {value!r}")
    if value < lower:
        raise ValidationError(path, f"must be >= {lower}, got {value!r}")
    return int(value)


def check_finite_array(x, path):
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise ValidationError(path, "contains non-finite entries")
    return x


def check_k_range(k, h, d, path="k"):
    """Sobolev index rule 1 < k <= floor(h/d)."""
    upper = int(np.floor(h / d + 1e-12))
    if isinstance(k, bool) or int(k) != k:
        raise ValidationError(path, f"must be an integer, got {k!r}")
    if not 1 < k <= upper:
        raise ValidationError(path, f"must satisfy 1 < k <= floor(h/d) = {upper}, got {k}")
    return int(k)


def check_h_prime_range(h_prime, h0, h, path="h_prime"):
    if not h0 < h_prime < h:
        raise ValidationError(path, f"must lie strictly between h0={h0:.6g} and h={h:.6g}, got {h_prime}")
    return float(h_prime)
