"""Pathwise simulation of the truncated Galerkin SDE system.

Three one-step maps are provided:

* ``ito_splitting``: exact exponential of the diagonal Ito drift, then
  Euler-Maruyama diffusion evaluated at the pre-step state.
* ``cayley_stratonovich``: Cayley transform of the skew-symmetric increment
  matrix; orthogonal, so the unforced norm is preserved to roundoff.
* ``rotation_splitting``: symmetric sweep of exact Givens rotations, one per
  coupled pair of modes; also orthogonal, and much less biased than the
  Cayley map when ``k_n^2 dt`` is large.

Brownian increments come from :mod:`dyadic_lab.rng` keyed by
``(seed, path_index, step, component)``. ``SchemeSpec.refine = r`` runs the
scheme with step ``dt / 2**r`` on the *same* Brownian path as ``refine = 0``
(Levy midpoint refinement), which is what strong-convergence studies need.
"""

import enum
import math
import os
from dataclasses import dataclass, field

import numba
import numpy as np

from .model import RangeError, TruncationSpec, as_state, wavenumbers
from .rng import STREAM_INIT, STREAM_REFINE, STREAM_SDE, _key, _philox_scalar, _unit, normals_for_step

DRIFT_GUARD = 50.0
STABILITY_GUARD = 10.0
THREADS_ENV = "DYADIC_LAB_THREADS"

# the bundled TBB is often too old for numba; prefer OpenMP
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


class SchemeKind(str, enum.Enum):
    ITO_SPLITTING = "ito_splitting"
    CAYLEY = "cayley_stratonovich"
    ROTATION = "rotation_splitting"


class ForcingOrder(str, enum.Enum):
    PRE = "pre"
    POST = "post"
    STRANG = "strang"


_KIND_CODE = {SchemeKind.ITO_SPLITTING: 0, SchemeKind.CAYLEY: 1, SchemeKind.ROTATION: 2}
_ORDER_CODE = {ForcingOrder.PRE: 0, ForcingOrder.POST: 1, ForcingOrder.STRANG: 2}


def default_dt(kind, params, trunc):
    """Step size used when none is given.

    The Ito scheme needs ``dt * max rate`` small; the orthogonal schemes are
    unconditionally stable, so they get a fixed modest step.
    """
    kind = SchemeKind(kind)
    if kind is SchemeKind.ITO_SPLITTING:
        return 0.1 / params.lam ** (2 * (trunc.n_modes - 1))
    return 1e-3


@dataclass(frozen=True)
class SchemeSpec:
    kind: SchemeKind = SchemeKind.CAYLEY
    dt: float = 1e-3
    t_final: float = 0.25
    forcing_order: ForcingOrder = ForcingOrder.STRANG
    refine: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", SchemeKind(self.kind))
        object.__setattr__(self, "forcing_order", ForcingOrder(self.forcing_order))
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not (math.isfinite(self.t_final) and self.t_final > 0):
            raise ValueError(f"t_final must be positive, got {self.t_final}")
        if self.dt > self.t_final:
            raise ValueError(f"dt={self.dt} exceeds t_final={self.t_final}")
        if int(self.refine) != self.refine or not 0 <= self.refine <= 20:
            raise ValueError(f"refine must be an integer in [0, 20], got {self.refine}")

    @property
    def n_steps(self):
        """Number of coarse steps; the last one is shortened to hit t_final."""
        n = math.ceil(self.t_final / self.dt - 1e-9)
        return max(n, 1)

    @property
    def coarse_sizes(self):
        n = self.n_steps
        sizes = np.full(n, self.dt)
        sizes[-1] = self.t_final - (n - 1) * self.dt
        return sizes

    @property
    def effective_dt(self):
        return self.dt / 2**self.refine

    def fine_times(self):
        sub = 2**self.refine
        sizes = np.repeat(self.coarse_sizes / sub, sub)
        times = np.concatenate(([0.0], np.cumsum(sizes)))
        times[-1] = self.t_final
        return times

    def refined(self, levels=1):
        return SchemeSpec(self.kind, self.dt, self.t_final, self.forcing_order, self.refine + levels)


@dataclass(frozen=True)
class PathRecord:
    sample_times: np.ndarray
    states: np.ndarray  # (n_samples, N)
    w0_integral: float
    seed: int
    path_index: int
    sigma: float = 0.0

    def energy(self):
        return np.einsum("ij,ij->i", self.states, self.states)

    def energy_residual(self):
        """||X(t)||^2 - ||x0||^2 - 2 sigma int X_1 dW_0 - sigma^2 t at the final time."""
        e = self.energy()
        return float(e[-1] - e[0] - 2.0 * self.sigma * self.w0_integral - self.sigma**2 * self.sample_times[-1])


@dataclass(frozen=True)
class InitialLaw:
    """Deterministic start ``mean`` or independent centred Gaussians with ``variances``."""

    mean: np.ndarray = None
    variances: np.ndarray = None

    def __post_init__(self):
        if (self.mean is None) == (self.variances is None):
            raise ValueError("give exactly one of mean or variances")
        if self.mean is not None:
            object.__setattr__(self, "mean", as_state(self.mean))
        else:
            v = as_state(self.variances)
            if np.any(v < 0):
                raise ValueError("variances must be nonnegative")
            object.__setattr__(self, "variances", v)

    @classmethod
    def deterministic(cls, x0):
        return cls(mean=np.asarray(x0, dtype=float))

    @classmethod
    def gaussian(cls, variances):
        return cls(variances=np.asarray(variances, dtype=float))

    @property
    def n_modes(self):
        return (self.mean if self.mean is not None else self.variances).shape[0]

    @property
    def second_moments(self):
        return self.mean**2 if self.mean is not None else self.variances.copy()

    def sample(self, seed, path_indices):
        path_indices = np.asarray(path_indices, dtype=np.uint64)
        if self.mean is not None:
            return np.tile(self.mean, (path_indices.shape[0], 1))
        z = normals_for_step(seed, path_indices, 0, STREAM_INIT, self.n_modes)
        return z * np.sqrt(self.variances)


@dataclass(frozen=True)
class EnsembleStats:
    n_paths: int
    sample_times: np.ndarray
    mean_second_moments: np.ndarray  # (n_samples, N)
    std_errors: np.ndarray
    mean_energy: np.ndarray
    energy_std_errors: np.ndarray
    energy_residual_max: float
    extras: dict = field(default_factory=dict)

    def to_bytes(self):
        parts = [self.sample_times, self.mean_second_moments, self.std_errors, self.mean_energy,
                 self.energy_std_errors, np.array([self.energy_residual_max, self.n_paths])]
        return b"".join(np.ascontiguousarray(p, dtype=np.float64).tobytes() for p in parts)


# ----------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True)
def _fill_normals(k0, k1, counter, path, tag, out):
    mask = numba.uint64(0xFFFFFFFF)
    width = out.shape[0]
    for lane in range((width + 1) // 2):
        x0, x1, x2, x3 = _philox_scalar(counter & mask, counter >> numba.uint64(32), path & mask,
                                        tag | numba.uint64(lane), k0, k1)
        r = np.sqrt(-2.0 * np.log(_unit(x0, x1)))
        th = 2.0 * np.pi * _unit(x2, x3)
        out[2 * lane] = r * np.cos(th)
        if 2 * lane + 1 < width:
            out[2 * lane + 1] = r * np.sin(th)


@numba.njit(cache=True)
def _brownian_block(k0, k1, path, step, h, refine, buf, tmp, z):
    """Increments of W_0..W_N for the 2**refine fine steps inside coarse step ``step``."""
    width = buf.shape[1]
    _fill_normals(k0, k1, numba.uint64(step), path, numba.uint64(STREAM_SDE << 16), z)
    sh = np.sqrt(h)
    for c in range(width):
        buf[0, c] = sh * z[c]
    count = 1
    hp = h
    for lev in range(refine):
        tag = numba.uint64((STREAM_REFINE + lev + 1) << 16)
        half = 0.5 * np.sqrt(hp)
        for j in range(count):
            node = numba.uint64(step) * numba.uint64(count) + numba.uint64(j)
            _fill_normals(k0, k1, node, path, tag, z)
            for c in range(width):
                tmp[2 * j, c] = 0.5 * buf[j, c] + half * z[c]
                tmp[2 * j + 1, c] = 0.5 * buf[j, c] - half * z[c]
        count *= 2
        hp *= 0.5
        for j in range(count):
            for c in range(width):
                buf[j, c] = tmp[j, c]


@numba.njit(cache=True)
def _ito_step(x, dw, h, k, absorbing, sigma, out):
    n = x.shape[0]
    for i in range(n):
        if i == 0:
            rate = k[0] * k[0]
        elif i == n - 1:
            rate = k[n - 2] * k[n - 2]
            if absorbing:
                rate += k[n - 1] * k[n - 1]
        else:
            rate = k[i - 1] * k[i - 1] + k[i] * k[i]
        v = np.exp(-0.5 * rate * h) * x[i]
        # dX_i = k_{i-1} X_{i-1} dW_{i-1} - k_i X_{i+1} dW_i (1-based modes, dw[m] = dW_m)
        if i > 0:
            v += k[i - 1] * x[i - 1] * dw[i]
        if i < n - 1:
            v -= k[i] * x[i + 1] * dw[i + 1]
        out[i] = v
    out[0] += sigma * dw[0]


@numba.njit(cache=True)
def _cayley_rotate(x, dw, k, sup, piv, rhs, out):
    """out = (I - G/2)^{-1} (I + G/2) x with G_{i,i+1} = -k_i dW_i, G_{i+1,i} = +k_i dW_i."""
    n = x.shape[0]
    for i in range(n - 1):
        sup[i] = 0.5 * k[i] * dw[i + 1]  # b_i / 2
    for i in range(n):
        r = x[i]
        if i < n - 1:
            r -= sup[i] * x[i + 1]
        if i > 0:
            r += sup[i - 1] * x[i - 1]
        rhs[i] = r
    # (I - G/2): diag 1, super +b/2, sub -b/2; pivots 1 + (b/2)^2 / piv >= 1
    piv[0] = 1.0
    for i in range(1, n):
        m = -sup[i - 1] / piv[i - 1]
        piv[i] = 1.0 - m * sup[i - 1]
        rhs[i] -= m * rhs[i - 1]
    out[n - 1] = rhs[n - 1] / piv[n - 1]
    for i in range(n - 2, -1, -1):
        out[i] = (rhs[i] - sup[i] * out[i + 1]) / piv[i]


@numba.njit(cache=True)
def _rotation_sweep(x, dw, k, cs, sn):
    n = x.shape[0]
    for i in range(n - 1):
        phi = 0.5 * k[i] * dw[i + 1]
        cs[i] = np.cos(phi)
        sn[i] = np.sin(phi)
    for i in range(n - 1):
        a = x[i]
        b = x[i + 1]
        x[i] = cs[i] * a - sn[i] * b
        x[i + 1] = sn[i] * a + cs[i] * b
    for i in range(n - 2, -1, -1):
        a = x[i]
        b = x[i + 1]
        x[i] = cs[i] * a - sn[i] * b
        x[i + 1] = sn[i] * a + cs[i] * b


@numba.njit(cache=True)
def _orthogonal_step(kind, x, dw, h, k, absorbing, sigma, order, out, sup, piv, rhs, cs, sn):
    n = x.shape[0]
    for i in range(n):
        rhs[i] = x[i]
    damp_half = np.exp(-0.25 * k[n - 1] * k[n - 1] * h) if absorbing else 1.0
    if order == 0:
        rhs[0] += sigma * dw[0]
    elif order == 2:
        rhs[0] += 0.5 * sigma * dw[0]
    rhs[n - 1] *= damp_half
    if kind == 1:
        for i in range(n):
            cs[i] = rhs[i]
        _cayley_rotate(cs, dw, k, sup, piv, rhs, out)
    else:
        _rotation_sweep(rhs, dw, k, cs, sn)
        for i in range(n):
            out[i] = rhs[i]
    out[n - 1] *= damp_half
    if order == 1:
        out[0] += sigma * dw[0]
    elif order == 2:
        out[0] += 0.5 * sigma * dw[0]


@numba.njit(cache=True)
def _step(kind, x, dw, h, k, absorbing, sigma, order, out, sup, piv, rhs, cs, sn):
    if kind == 0:
        _ito_step(x, dw, h, k, absorbing, sigma, out)
    else:
        _orthogonal_step(kind, x, dw, h, k, absorbing, sigma, order, out, sup, piv, rhs, cs, sn)


@numba.njit(cache=True, parallel=True)
def _simulate_batch(kind, order, k, sigma, absorbing, sizes, refine, k0, k1, paths, x0,
                    sample_idx, track_diff, d0, states, diffs, w0):
    n_paths = paths.shape[0]
    n = k.shape[0]
    sub = 1 << refine
    n_coarse = sizes.shape[0]
    for p in numba.prange(n_paths):
        path = paths[p]
        buf = np.empty((sub, n + 1))
        tmp = np.empty((sub, n + 1))
        z = np.empty(n + 1)
        x = x0[p].copy()
        y = np.empty(n)
        d = d0.copy()
        e = np.empty(n)
        sup = np.empty(n)
        piv = np.empty(n)
        rhs = np.empty(n)
        cs = np.empty(n)
        sn = np.empty(n)
        acc = 0.0
        fine = 0
        nxt = 0
        if sample_idx[0] == 0:
            states[p, 0, :] = x
            if track_diff:
                diffs[p, 0, :] = d
            nxt = 1
        for s in range(n_coarse):
            h = sizes[s] / sub
            _brownian_block(k0, k1, path, s, sizes[s], refine, buf, tmp, z)
            for j in range(sub):
                dw = buf[j]
                acc += x[0] * dw[0]
                _step(kind, x, dw, h, k, absorbing, sigma, order, y, sup, piv, rhs, cs, sn)
                for i in range(n):
                    x[i] = y[i]
                if track_diff:
                    _step(kind, d, dw, h, k, absorbing, 0.0, order, e, sup, piv, rhs, cs, sn)
                    for i in range(n):
                        d[i] = e[i]
                fine += 1
                if nxt < sample_idx.shape[0] and sample_idx[nxt] == fine:
                    states[p, nxt, :] = x
                    if track_diff:
                        diffs[p, nxt, :] = d
                    nxt += 1
        w0[p] = acc


# ----------------------------------------------------------------------------
# python front end


def brownian_increments(seed, path_index, scheme, n_modes):
    """The fine-grid increments dW_0..dW_N used by :func:`simulate_path`, shape (steps, N+1)."""
    k0, k1 = _key(seed)
    sub = 2**scheme.refine
    out = []
    buf = np.empty((sub, n_modes + 1))
    tmp = np.empty_like(buf)
    z = np.empty(n_modes + 1)
    for s, h in enumerate(scheme.coarse_sizes):
        _brownian_block(np.uint64(k0), np.uint64(k1), np.uint64(path_index), s, h, scheme.refine, buf, tmp, z)
        out.append(buf.copy())
    return np.concatenate(out)


def _wavenumbers(params, trunc):
    return wavenumbers(trunc.n_modes, params)


def _check_step(x, increments, dt, params, trunc):
    x = as_state(x, trunc.n_modes)
    dw = np.asarray(increments, dtype=float)
    if dw.shape != (trunc.n_modes + 1,):
        raise ValueError(f"expected {trunc.n_modes + 1} increments (W_0..W_N), got shape {dw.shape}")
    if not (dt > 0 and math.isfinite(dt)):
        raise ValueError(f"dt must be positive, got {dt}")
    return x, dw, _wavenumbers(params, trunc)


def _drift_guard(k, dt, n_modes):
    worst = int(np.argmax(k))
    if k[worst] ** 2 * dt > DRIFT_GUARD:
        raise RangeError(
            f"k_{worst + 1}^2 * dt = {k[worst] ** 2 * dt:.3g} > {DRIFT_GUARD}: dt too large for N={n_modes}"
        )


def ito_splitting_step(x, increments, dt, params, trunc):
    """One step of the Ito splitting scheme; ``increments`` are dW_0..dW_N."""
    x, dw, k = _check_step(x, increments, dt, params, trunc)
    _drift_guard(k, dt, trunc.n_modes)
    out = np.empty_like(x)
    _ito_step(x, dw, dt, k, trunc.absorbing, params.sigma, out)
    return out


def _orthogonal(kind, x, increments, dt, params, trunc, forcing_order):
    x, dw, k = _check_step(x, increments, dt, params, trunc)
    if not np.all(np.isfinite(dw)):
        raise ValueError("increments must be finite")
    n = trunc.n_modes
    out = np.empty(n)
    work = [np.empty(n) for _ in range(5)]
    code = _ORDER_CODE[ForcingOrder(forcing_order)]
    _orthogonal_step(kind, x, dw, dt, k, trunc.absorbing, params.sigma, code, out, *work)
    if not np.all(np.isfinite(out)):
        raise ArithmeticError("linear solve produced non-finite values")
    return out


def cayley_step(x, increments, dt, params, trunc, forcing_order=ForcingOrder.STRANG):
    """One Cayley step on the Stratonovich form; orthogonal when sigma = 0."""
    return _orthogonal(1, x, increments, dt, params, trunc, forcing_order)


def rotation_step(x, increments, dt, params, trunc, forcing_order=ForcingOrder.STRANG):
    """One symmetric sweep of pair rotations by angles k_n dW_n."""
    return _orthogonal(2, x, increments, dt, params, trunc, forcing_order)


def _validate_scheme(scheme, params, trunc):
    k = _wavenumbers(params, trunc)
    h = scheme.effective_dt
    if scheme.kind is SchemeKind.ITO_SPLITTING:
        _drift_guard(k, h, trunc.n_modes)
        k2 = k**2
        rates = np.concatenate(([k2[0]], k2[:-1] + k2[1:]))
        if not trunc.absorbing:
            rates[-1] = k2[-2]
        if rates.max() * h > STABILITY_GUARD:
            raise RangeError(
                f"dt={h:.3g} violates the ito_splitting stability guard "
                f"dt*max(k_(n-1)^2+k_n^2) = {rates.max() * h:.3g} > {STABILITY_GUARD}"
            )
    return k


def _sample_indices(scheme, sample_times):
    grid = scheme.fine_times()
    if sample_times is None:
        return np.array([0, grid.shape[0] - 1]), grid[[0, -1]]
    st = np.asarray(sample_times, dtype=float)
    if st.ndim != 1 or np.any(st < 0) or np.any(st > scheme.t_final * (1 + 1e-12)):
        raise ValueError("sample times must lie in [0, t_final]")
    idx = np.unique(np.concatenate(([0], np.abs(grid[:, None] - st[None, :]).argmin(axis=0), [grid.shape[0] - 1])))
    return idx, grid[idx]


def configure_threads():
    """Apply the DYADIC_LAB_THREADS cap to numba's thread pool."""
    value = os.environ.get(THREADS_ENV)
    if value:
        try:
            n = int(value)
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {value!r}") from None
        if n < 1:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {value!r}")
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _run(x0s, params, trunc, scheme, seed, path_indices, sample_times=None, diff0=None):
    k = _validate_scheme(scheme, params, trunc)
    configure_threads()
    idx, times = _sample_indices(scheme, sample_times)
    k0, k1 = _key(seed)
    n_paths = x0s.shape[0]
    states = np.zeros((n_paths, idx.shape[0], trunc.n_modes))
    track = diff0 is not None
    d0 = np.zeros(trunc.n_modes) if diff0 is None else as_state(diff0, trunc.n_modes)
    diffs = np.zeros((n_paths, idx.shape[0], trunc.n_modes)) if track else np.zeros((1, 1, 1))
    w0 = np.zeros(n_paths)
    _simulate_batch(
        _KIND_CODE[scheme.kind], _ORDER_CODE[scheme.forcing_order], k, float(params.sigma),
        trunc.absorbing, scheme.coarse_sizes, int(scheme.refine), np.uint64(k0), np.uint64(k1),
        np.ascontiguousarray(path_indices, dtype=np.uint64), np.ascontiguousarray(x0s, dtype=float),
        idx.astype(np.int64), track, d0, states, diffs, w0,
    )
    if not np.all(np.isfinite(states)):
        raise RangeError("simulation produced non-finite states; reduce dt")
    return times, states, (diffs if track else None), w0


def simulate_path(x0, params, trunc, scheme, seed, path_index, sample_times=None):
    """Simulate one path. ``sample_times`` are snapped to the step grid."""
    x0 = as_state(x0, trunc.n_modes)
    times, states, _, w0 = _run(x0[None, :], params, trunc, scheme, seed, [path_index], sample_times)
    return PathRecord(times, states[0], float(w0[0]), int(seed), int(path_index), float(params.sigma))


def _as_law(initial, n_modes):
    law = initial if isinstance(initial, InitialLaw) else InitialLaw.deterministic(initial)
    if law.n_modes != n_modes:
        raise ValueError(f"initial law has {law.n_modes} modes, truncation has {n_modes}")
    return law


def _mean_se(values):
    n = values.shape[0]
    mean = np.sum(values, axis=0) / n
    var = np.sum((values - mean) ** 2, axis=0) / (n - 1)
    return mean, np.sqrt(var / n)


def simulate_ensemble_states(initial, params, trunc, scheme, n_paths, seed, sample_times=None, diff0=None):
    """Raw per-path output: (times, states, diffs, w0, x0s)."""
    if int(n_paths) != n_paths or n_paths < 2:
        raise ValueError(f"n_paths must be an integer >= 2, got {n_paths}")
    law = _as_law(initial, trunc.n_modes)
    paths = np.arange(int(n_paths), dtype=np.uint64)
    x0s = law.sample(seed, paths)
    times, states, diffs, w0 = _run(x0s, params, trunc, scheme, seed, paths, sample_times, diff0)
    return times, states, diffs, w0, x0s


def run_ensemble(initial, params, trunc, scheme, n_paths, seed, sample_times=None):
    """Monte Carlo second moments and energy across ``n_paths`` independent paths.

    Aggregation runs over per-path arrays after all paths finish, so the
    result does not depend on how paths were scheduled across threads.
    """
    times, states, _, w0, x0s = simulate_ensemble_states(initial, params, trunc, scheme, n_paths, seed, sample_times)
    sq = states**2
    mean, se = _mean_se(sq)
    energy = sq.sum(axis=2)
    e_mean, e_se = _mean_se(energy)
    residual = energy[:, -1] - np.sum(x0s**2, axis=1) - 2.0 * params.sigma * w0 - params.sigma**2 * times[-1]
    return EnsembleStats(
        n_paths=int(n_paths), sample_times=times, mean_second_moments=mean, std_errors=se,
        mean_energy=e_mean, energy_std_errors=e_se, energy_residual_max=float(np.max(np.abs(residual))),
    )


__all__ = [
    "SchemeKind", "ForcingOrder", "SchemeSpec", "PathRecord", "InitialLaw", "EnsembleStats",
    "ito_splitting_step", "cayley_step", "rotation_step", "simulate_path", "run_ensemble",
    "simulate_ensemble_states", "brownian_increments", "default_dt", "TruncationSpec",
]
