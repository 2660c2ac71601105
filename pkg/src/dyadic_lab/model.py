"""Model constants, wavenumbers, Sobolev-type norms and the stationary profile.

Public functions use 1-based mode numbers n = 1..N; arrays store mode n at
offset n - 1.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np

# above this exponent, powers of lambda go through exp/log
_LOG_SWITCH = 300.0
_LOG_MAX = math.log(np.finfo(float).max)


class RangeError(ArithmeticError):
    """A quantity left the double-precision range (or a step size is too large)."""


class Boundary(str, enum.Enum):
    CONSERVATIVE = "conservative"
    ABSORBING = "absorbing"


@dataclass(frozen=True)
class ModelParams:
    lam: float = 2.0
    sigma: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam > 1.0):
            raise ValueError(f"lambda must be > 1, got {self.lam}")
        if not (math.isfinite(self.sigma) and self.sigma >= 0.0):
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")

    @property
    def theta(self):
        return 1.0 / (1.0 + self.lam**-2)


@dataclass(frozen=True)
class TruncationSpec:
    n_modes: int = 16
    boundary: Boundary = Boundary.CONSERVATIVE

    def __post_init__(self):
        if int(self.n_modes) != self.n_modes or self.n_modes < 3:
            raise ValueError(f"n_modes must be an integer >= 3, got {self.n_modes}")
        object.__setattr__(self, "n_modes", int(self.n_modes))
        object.__setattr__(self, "boundary", Boundary(self.boundary))

    @property
    def absorbing(self):
        return self.boundary is Boundary.ABSORBING


def lam_power(lam, exponent, what="lambda power"):
    """``lam ** exponent`` with a log-domain path and an explicit overflow check."""
    log_value = exponent * math.log(lam)
    if abs(log_value) <= _LOG_SWITCH:
        return lam**exponent
    if log_value > _LOG_MAX:
        raise RangeError(f"{what} overflows double precision (lambda={lam}, exponent={exponent})")
    return math.exp(log_value)


def wavenumber(n, params):
    """k_n = lambda**n for n >= 0."""
    if int(n) != n or n < 0:
        raise ValueError(f"mode index must be a nonnegative integer, got {n}")
    n = int(n)
    if 2 * n * math.log(params.lam) > _LOG_MAX:
        raise RangeError(f"k_{n}^2 overflows double precision (n={n}, lambda={params.lam})")
    return lam_power(params.lam, n, what=f"k_{n}")


def wavenumbers(n_max, params, start=1):
    """Array (k_start, ..., k_n_max)."""
    return np.array([wavenumber(n, params) for n in range(start, n_max + 1)])


def sobolev_weights(n_modes, s, params):
    """k_n^{2s} for n = 1..n_modes, via logs where plain powers would overflow."""
    out = np.empty(n_modes)
    for i in range(n_modes):
        n = i + 1
        out[i] = lam_power(params.lam, 2.0 * s * n, what=f"k_{n}^(2s) with s={s}")
    return out


def as_state(x, n_modes=None):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("a state vector must be one-dimensional")
    if n_modes is not None and x.shape[0] != n_modes:
        raise ValueError(f"state has {x.shape[0]} entries, expected {n_modes}")
    if not np.all(np.isfinite(x)):
        raise ValueError("state vector has non-finite entries")
    return x


def sobolev_norm(x, s, params):
    """(sum_n k_n^{2s} x_n^2)^{1/2}; s = 0 is the Euclidean norm."""
    x = as_state(x)
    w = sobolev_weights(x.shape[0], s, params)
    with np.errstate(over="raise"):
        try:
            total = float(np.sum(w * x * x))
        except FloatingPointError:
            raise RangeError(f"H^{s} norm overflows") from None
    if not math.isfinite(total):
        raise RangeError(f"H^{s} norm overflows")
    return math.sqrt(total)


def stationary_second_moments(params, n_modes):
    """s_n = sigma^2 lambda^{-2n} / (1 - lambda^{-2}) for n = 1..n_modes."""
    lam = params.lam
    decay = sobolev_weights(n_modes, -1.0, params)
    return params.sigma**2 * decay / (1.0 - lam**-2)
