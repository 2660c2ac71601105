"""Second-moment (forward Kolmogorov) equations on finite truncations.

The generator is the tridiagonal q-matrix with rates ``k_n^2`` between
neighbouring modes. Rates span ``lambda^(2N)``, so the propagator is built
with an expm1-form scaling and squaring that never subtracts: off-diagonal
transition mass is carried explicitly, diagonals are recovered from row
sums on a state space augmented with a cemetery for absorbed mass.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, sparse

from .model import Boundary, ModelParams, RangeError, TruncationSpec, lam_power, sobolev_weights

CLAMP_ABS = 1e-12
FAIL_REL = 1e-9
EXPM_MAX_N = 64
_THETA = 0.5


class SolverError(RuntimeError):
    """The forward solver could not reach the requested accuracy."""


@dataclass(frozen=True)
class QMatrix:
    """Tridiagonal generator; ``sub[i]`` couples modes i+1 and i+2 (1-based)."""

    size: int
    sub: np.ndarray
    diag: np.ndarray
    boundary: Boundary

    @property
    def leak(self):
        """Rate from the last mode into the cemetery (0 when conservative)."""
        return float(-(self.diag[-1] + self.sub[-1]))

    def dense(self):
        q = np.diag(self.diag)
        idx = np.arange(self.size - 1)
        q[idx, idx + 1] = self.sub
        q[idx + 1, idx] = self.sub
        return q

    def row_sums(self):
        return self.dense().sum(axis=1)


def build_q_matrix(params, trunc):
    n = trunc.n_modes
    try:
        k2 = np.array([lam_power(params.lam, 2 * m, what=f"k_{m}^2") for m in range(1, n + 1)])
    except RangeError as exc:
        raise RangeError(f"{exc} while building the q-matrix with N={n}") from None
    sub = k2[:-1].copy()
    diag = np.empty(n)
    diag[0] = -k2[0]
    diag[1:-1] = -(k2[:-2] + k2[1:-1])
    diag[-1] = -(k2[-2] + k2[-1]) if trunc.absorbing else -k2[-2]
    return QMatrix(size=n, sub=sub, diag=diag, boundary=trunc.boundary)


def as_moment_vector(u, n_modes=None):
    """Validate second moments: tiny negatives are clamped, larger ones rejected."""
    u = np.array(u, dtype=float)
    if u.ndim != 1 or (n_modes is not None and u.shape[0] != n_modes):
        raise ValueError(f"moment vector must be 1-d of length {n_modes}")
    if not np.all(np.isfinite(u)):
        raise ValueError("moment vector has non-finite entries")
    return _clamp(u)


def _clamp(u):
    lo = u.min(initial=0.0)
    if lo < 0.0:
        scale = np.abs(u).max()
        if lo < -max(CLAMP_ABS, FAIL_REL * scale):
            raise ValueError(f"second moments must be nonnegative (min entry {lo:.3e})")
        u = np.maximum(u, 0.0)
    return u


def _augmented_offdiag(q):
    """Off-diagonal rates on modes + cemetery, shape (N+1, N+1)."""
    n = q.size
    f = np.zeros((n + 1, n + 1))
    idx = np.arange(n - 1)
    f[idx, idx + 1] = q.sub
    f[idx + 1, idx] = q.sub
    f[n - 1, n] = q.leak
    return f


def _propagator(q, dt, extra_squarings=0):
    """Return (P, g): P = exp(dt Q) on the modes, g = int_0^dt e_1 exp(rQ) dr."""
    rates = _augmented_offdiag(q)
    m = rates.shape[0]
    rho = rates.sum(axis=1).max() * dt
    s = max(0, math.ceil(math.log2(rho / _THETA))) if rho > 0 else 0
    s += extra_squarings
    h = dt / 2.0**s
    a = rates * h
    a[np.diag_indices(m)] = -a.sum(axis=1)

    # Taylor series of expm1(a) and of int_0^1 exp(ra) dr (row for mode 1)
    e = np.zeros_like(a)
    term = np.eye(m)
    row = np.zeros(m)
    row[0] = 1.0
    gterm = row.copy()
    g = row.copy()
    for j in range(1, 30):
        term = term @ a / j
        e += term
        gterm = gterm @ a / (j + 1)
        g += gterm
        if np.abs(term).max() < 1e-20 and np.abs(gterm).max() < 1e-20:
            break
    g *= h

    # The diagonal is always recovered as 1 - (row mass that has left), which
    # keeps rows stochastic through every squaring. Squaring the diagonal
    # directly would double its rounding error each time. The cost is that a
    # diagonal entry far below 1 is only accurate to roundoff in absolute terms.
    f = np.maximum(e, 0.0)
    f[np.diag_indices(m)] = 0.0
    d = -f.sum(axis=1)
    for _ in range(s):
        keep = np.maximum(2.0 + d[:, None] + d[None, :], 0.0)
        g = g + g * (1.0 + d) + g @ f
        f = f * keep + f @ f
        f[np.diag_indices(m)] = 0.0
        d = -f.sum(axis=1)
    p = f
    p[np.diag_indices(m)] = np.maximum(1.0 + d, 0.0)
    n = q.size
    return p[:n, :n], g[:n]


@dataclass(frozen=True)
class ForwardSolution:
    times: np.ndarray
    u: np.ndarray  # shape (len(times), N)
    error_estimate: float  # halved-step self-check, relative

    def __iter__(self):
        return iter(self.u)

    def __len__(self):
        return len(self.times)

    @property
    def final(self):
        return self.u[-1]


def _march(q, u0, sigma, dt, n_steps, extra_squarings=0):
    p, g = _propagator(q, dt, extra_squarings)
    out = np.empty((n_steps + 1, q.size))
    out[0] = u0
    src = sigma**2 * g
    for k in range(n_steps):
        out[k + 1] = _clamp(out[k] @ p + src)
    return out


def _implicit_fallback(q, u0, sigma, times):
    mat = sparse.diags([q.sub, q.diag, q.sub], [-1, 0, 1], format="csr")
    src = np.zeros(q.size)
    src[0] = sigma**2

    def rhs(_, u):
        return mat @ u + src

    scale = max(np.abs(u0).max(), sigma**2 * times[-1], 1e-300)
    sol = integrate.solve_ivp(
        rhs, (0.0, times[-1]), u0, method="Radau", t_eval=times, jac=mat,
        rtol=1e-10, atol=1e-14 * scale,
    )
    if not sol.success:
        raise SolverError(f"implicit fallback failed: {sol.message}")
    return np.array([_clamp(col) for col in sol.y.T])


def solve_forward(q, u0, sigma, t, n_checkpoints=1, self_check=True):
    """Solve u' = u Q + sigma^2 e_1, u(0) = u0, on ``n_checkpoints`` equal intervals.

    Returned rows are at ``linspace(0, t, n_checkpoints + 1)``. For N up to
    64 the propagator is exact up to roundoff; ``error_estimate`` compares it
    against the same computation with the scaled step halved.
    """
    if not (t >= 0.0 and math.isfinite(t)):
        raise ValueError(f"t must be finite and >= 0, got {t}")
    if n_checkpoints < 1:
        raise ValueError("n_checkpoints must be >= 1")
    u0 = as_moment_vector(u0, q.size)
    times = np.linspace(0.0, t, n_checkpoints + 1)
    if t == 0.0:
        return ForwardSolution(times, np.tile(u0, (len(times), 1)), 0.0)
    dt = t / n_checkpoints
    if q.size > EXPM_MAX_N:
        return ForwardSolution(times, _implicit_fallback(q, u0, sigma, times), float("nan"))
    u = _march(q, u0, sigma, dt, n_checkpoints)
    err = 0.0
    if self_check:
        v = _march(q, u0, sigma, dt, n_checkpoints, extra_squarings=1)
        scale = np.maximum(np.abs(u), np.abs(u).max(axis=1, keepdims=True) * 1e-300)
        with np.errstate(invalid="ignore"):
            rel = np.where(scale > 0, np.abs(u - v) / np.abs(u).max(axis=1, keepdims=True), 0.0)
        err = float(np.nanmax(rel))
    return ForwardSolution(times, u, err)


def truncated_stationary(q, sigma):
    """Stationary second moments of the absorbing truncation with forcing sigma.

    Solves u Q + sigma^2 e_1 = 0 by Gaussian elimination written in terms of
    each row's excess (its leak to the cemetery), so no subtraction occurs.
    """
    if q.boundary is not Boundary.ABSORBING:
        raise ValueError("conservative truncation has no stationary solution with forcing")
    n = q.size
    c = q.sub
    # leak of each row to the cemetery; only the last row leaks
    leak = np.zeros(n)
    leak[-1] = q.leak
    piv = np.empty(n)
    rhs = np.zeros(n)
    rhs[0] = sigma**2
    x_prev = 0.0
    for i in range(n):
        # excess = pivot minus the coupling to the next row
        e_i = leak[i]
        if i:
            e_i += c[i - 1] * x_prev / (c[i - 1] + x_prev) if x_prev > 0 else 0.0
            rhs[i] += c[i - 1] * rhs[i - 1] / piv[i - 1]
        piv[i] = e_i + (c[i] if i < n - 1 else 0.0)
        x_prev = e_i
    if piv[-1] <= 0.0:
        raise RangeError("singular stationary system")
    u = np.empty(n)
    u[-1] = rhs[-1] / piv[-1]
    for i in range(n - 2, -1, -1):
        u[i] = (rhs[i] + c[i] * u[i + 1]) / piv[i]
    return u


def h_minus_one_functional(u, params):
    """sum_n k_n^{-2} u_n (the mean squared H^{-1} norm)."""
    u = as_moment_vector(u)
    return float(np.dot(sobolev_weights(u.shape[0], -1.0, params), u))


def h_minus_one_drift(u, params):
    """Time derivative of the H^{-1} functional on the absorbing truncation."""
    u = as_moment_vector(u)
    r = params.lam**-2
    return float(-(1.0 - r) * u[0] - r * u[-1])


@dataclass(frozen=True)
class RegularityBound:
    value: float
    last_term: float
    tail_ratio: float
    diverging: bool
    partial_sums: np.ndarray


def regularity_bound(ubar, beta, params, cutoff=None):
    """Time-unbounded majorant of the L^2([0,T] x Omega; H^beta) norm squared.

    Sums k_j^{2 beta} ubar_i E_i(T_j) over the square i, j <= cutoff, where
    E_i(T_j) is the expected occupation of mode j from mode i. The tail
    terms S(m) - S(m-1) are inspected: non-decreasing tails flag divergence.
    """
    ubar = as_moment_vector(ubar)
    m = ubar.shape[0] if cutoff is None else int(cutoff)
    if m < ubar.shape[0]:
        raise ValueError("cutoff must be >= len(ubar)")
    u = np.zeros(m)
    u[: ubar.shape[0]] = ubar
    idx = np.arange(1, m + 1)
    log_lam = math.log(params.lam)
    expo = (2.0 * beta * idx[None, :] - 2.0 * np.maximum(idx[:, None], idx[None, :])) * log_lam
    if expo.max() > 700:
        raise RangeError(f"regularity weights overflow for beta={beta}, cutoff={m}")
    w = np.exp(expo) / (1.0 - params.lam**-2)
    contrib = u[:, None] * w
    tails = np.empty(m)
    for k in range(m):
        tails[k] = contrib[: k + 1, k].sum() + contrib[k, :k].sum()
    partial = np.cumsum(tails)
    ratio = tails[-1] / tails[-2] if m > 1 and tails[-2] > 0 else 0.0
    diverging = bool(tails[-1] > 0 and ratio >= 1.0 - 1e-12)
    return RegularityBound(float(partial[-1]), float(tails[-1]), float(ratio), diverging, partial)


def absorbing(params, n_modes):
    return build_q_matrix(params, TruncationSpec(n_modes, Boundary.ABSORBING))


def conservative(params, n_modes):
    return build_q_matrix(params, TruncationSpec(n_modes, Boundary.CONSERVATIVE))


__all__ = [
    "QMatrix", "ForwardSolution", "RegularityBound", "SolverError", "ModelParams",
    "build_q_matrix", "solve_forward", "truncated_stationary", "h_minus_one_functional",
    "h_minus_one_drift", "regularity_bound", "as_moment_vector",
]
