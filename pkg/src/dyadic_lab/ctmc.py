"""The minimal birth-death chain attached to the q-matrix, and its closed forms.

From state j the chain waits an exponential time with rate
``k_{j-1}^2 + k_j^2`` (``k_1^2`` at j = 1) and then steps up with
probability theta = 1/(1 + lambda^-2) (always up from 1). Holding means
decay geometrically, so the chain explodes in finite time. A path that
reaches the cap state M is declared exploded; its explosion time is
completed with the exact mean remaining lifetime from M.
"""

import math
import warnings
from dataclasses import dataclass

import numba
import numpy as np

from .model import RangeError, lam_power
from .rng import STREAM_CTMC, _key, _philox_scalar, _unit
from .sde import configure_threads
from .stats import Interval, dispersion_diagnostic, mean_and_se, wilson_interval

DEFAULT_CAP = 40
MAX_JUMPS = 10**9


class CensoringWarning(UserWarning):
    """The cap-censoring bias is not negligible next to the statistical error."""


def _check_state(j, name="state"):
    if int(j) != j or j < 1:
        raise ValueError(f"{name} must be a positive integer, got {j}")
    return int(j)


def jump_up_probability(j, params):
    """1 at j = 1, theta = 1/(1 + lambda^-2) above."""
    j = _check_state(j)
    return 1.0 if j == 1 else params.theta


def holding_rate(j, params):
    """-Pi_{jj}: k_1^2 at j = 1, k_{j-1}^2 + k_j^2 above."""
    j = _check_state(j)
    k2 = lam_power(params.lam, 2 * j, what=f"k_{j}^2")
    if j == 1:
        return k2
    return lam_power(params.lam, 2 * (j - 1), what=f"k_{j - 1}^2") + k2


def never_visit_probability(i, j, params):
    """P_i(chain never visits j): 0 for i <= j, 1 - lambda^{-2(i-j)} otherwise."""
    i, j = _check_state(i, "i"), _check_state(j, "j")
    if i <= j:
        return 0.0
    return -math.expm1(-2.0 * (i - j) * math.log(params.lam))


def expected_occupation(i, j, params):
    """E_i(T_j) = lambda^{-2 max(i,j)} / (1 - lambda^-2)."""
    i, j = _check_state(i, "i"), _check_state(j, "j")
    return lam_power(params.lam, -2 * max(i, j)) / (1.0 - params.lam**-2)


def mean_explosion_time(i, params):
    """E_i(tau) = sum_j E_i(T_j) in closed form."""
    i = _check_state(i, "i")
    r = params.lam**-2
    return (i * lam_power(params.lam, -2 * i) + lam_power(params.lam, -2 * (i + 1)) / (1.0 - r)) / (1.0 - r)


def survival_threshold(params):
    """Time beyond which :func:`survival_upper_bound` drops below 1."""
    lam2 = params.lam**2
    return math.log(2.0) * lam2**2 / (lam2 - 1.0) ** 3


def survival_upper_bound(t, params):
    """(exp((lambda^2-1)^3 t / lambda^4) - 1)^{-1}, an upper bound on P_1(tau > t)."""
    if not t > 0:
        raise ValueError(f"t must be positive, got {t}")
    lam2 = params.lam**2
    a = (lam2 - 1.0) ** 3 / lam2**2 * t
    if a > 700:
        return math.exp(-a)
    return 1.0 / math.expm1(a)


def censoring_bias(i0, cap, params):
    """Bound on the probability that capping misclassifies survival at a fixed t.

    A path counted dead at t but truly alive reached the cap at some
    T_M <= t and then survived past t. Splitting at T_M > t - d and using
    Markov's inequality on the remaining lifetime gives
    E_M(tau)/d + q_i0 d, minimised at 2 sqrt(q_i0 E_M(tau)).
    """
    return 2.0 * math.sqrt(holding_rate(i0, params) * mean_explosion_time(cap, params))


@numba.njit(cache=True)
def _chain_run(k0, k1, path, i0, cap, rates, theta, horizon, t_grid, max_jumps,
               rec_states, rec_hold, occ, visits, state_at):
    """Simulate one path. Returns (n_jumps, elapsed, reached_cap, min_state)."""
    mask = numba.uint64(0xFFFFFFFF)
    tag = numba.uint64(STREAM_CTMC << 16)
    state = i0
    elapsed = 0.0
    g = 0
    n_grid = t_grid.shape[0]
    n_rec = rec_states.shape[0]
    jumps = 0
    min_state = i0
    while True:
        c = numba.uint64(jumps)
        x0, x1, x2, x3 = _philox_scalar(c & mask, c >> numba.uint64(32), path & mask, tag, k0, k1)
        hold = -np.log(_unit(x0, x1)) / rates[state]
        up = state == 1 or _unit(x2, x3) < theta
        if jumps < n_rec:
            rec_states[jumps] = state
            rec_hold[jumps] = hold
        end = elapsed + hold
        if end > horizon:
            hold = horizon - elapsed
            end = horizon
        occ[state - 1] += hold
        visits[state - 1] += 1
        while g < n_grid and t_grid[g] < end:
            state_at[g] = state
            g += 1
        elapsed = end
        if elapsed >= horizon:
            return jumps + 1, elapsed, False, min_state
        jumps += 1
        if jumps >= max_jumps:
            return -1, elapsed, False, min_state
        state = state + 1 if up else state - 1
        if state < min_state:
            min_state = state
        if state >= cap:
            if jumps < n_rec:
                rec_states[jumps] = state
            while g < n_grid:
                state_at[g] = cap
                g += 1
            return jumps, elapsed, True, min_state


@numba.njit(cache=True, parallel=True)
def _chain_batch(k0, k1, paths, i0, cap, rates, theta, horizon, t_grid, max_jumps,
                 occ, visits, state_at, hit_time, reached, min_state, n_jumps):
    empty_i = np.empty(0, dtype=np.int64)
    empty_f = np.empty(0)
    for p in numba.prange(paths.shape[0]):
        j, el, r, m = _chain_run(k0, k1, paths[p], i0, cap, rates, theta, horizon, t_grid, max_jumps,
                                 empty_i, empty_f, occ[p], visits[p], state_at[p])
        n_jumps[p] = j
        hit_time[p] = el
        reached[p] = r
        min_state[p] = m


def _rates(cap, params):
    rates = np.zeros(cap + 1)
    for j in range(1, cap + 1):
        rates[j] = holding_rate(j, params)
    return rates


def _check_cap(i0, cap):
    i0 = _check_state(i0, "i0")
    cap = int(cap)
    if cap <= i0:
        raise ValueError(f"cap={cap} must exceed the start state {i0}")
    return i0, cap


@dataclass(frozen=True)
class ChainPath:
    start_state: int
    visit_states: np.ndarray
    holding_times: np.ndarray
    occupation: dict
    exploded: bool
    explosion_time: float  # nan when the path survived the horizon
    censored_at_cap: bool

    @property
    def lifetime(self):
        return float(np.sum(self.holding_times))


def simulate_chain(i0, horizon, cap, seed, path_index, params):
    """One path of the chain until ``horizon`` or until it reaches ``cap``."""
    i0, cap = _check_cap(i0, cap)
    if not horizon > 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    k0, k1 = _key(seed)
    rates = _rates(cap, params)
    size = 256
    while True:
        rec_s = np.zeros(size, dtype=np.int64)
        rec_h = np.zeros(size)
        occ = np.zeros(cap)
        visits = np.zeros(cap, dtype=np.int64)
        jumps, elapsed, reached, _ = _chain_run(
            np.uint64(k0), np.uint64(k1), np.uint64(path_index), i0, cap, rates, params.theta,
            float(horizon), np.empty(0), MAX_JUMPS, rec_s, rec_h, occ, visits, np.empty(0, dtype=np.int64),
        )
        if jumps < 0:
            raise RangeError(f"path {path_index} exceeded {MAX_JUMPS} jumps")
        if jumps + 1 <= size:
            break
        size = 2 * (jumps + 1)
    n_hold = jumps
    states = rec_s[: jumps + (1 if reached else 0)]
    holds = rec_h[:n_hold].copy()
    if not reached:
        holds[-1] = horizon - np.sum(holds[:-1])
    occupation = {j + 1: float(occ[j]) for j in np.nonzero(visits)[0]}
    tau = elapsed + mean_explosion_time(cap, params) if reached else float("nan")
    return ChainPath(i0, states, holds, occupation, bool(reached), tau, bool(reached))


@dataclass(frozen=True)
class ChainBatch:
    """Per-path summaries of ``n_paths`` independent chains from one start state."""

    i0: int
    cap: int
    seed: int
    t_grid: np.ndarray
    occupation: np.ndarray  # (paths, cap) time in states 1..cap
    visits: np.ndarray  # (paths, cap) number of visits
    state_at: np.ndarray  # (paths, len(t_grid)); cap means beyond the cap
    explosion_time: np.ndarray  # cap hitting time + E_cap(tau); inf if not reached
    min_state: np.ndarray
    n_jumps: np.ndarray
    bias_bound: float

    @property
    def n_paths(self):
        return self.occupation.shape[0]

    def alive(self, t):
        return self.explosion_time > t


def run_chains(i0, params, n_paths, seed, cap=DEFAULT_CAP, horizon=math.inf, t_grid=()):
    i0, cap = _check_cap(i0, cap)
    if int(n_paths) != n_paths or n_paths < 1:
        raise ValueError(f"n_paths must be a positive integer, got {n_paths}")
    n_paths = int(n_paths)
    t_grid = np.sort(np.asarray(t_grid, dtype=float))
    configure_threads()
    k0, k1 = _key(seed)
    occ = np.zeros((n_paths, cap))
    visits = np.zeros((n_paths, cap), dtype=np.int64)
    state_at = np.zeros((n_paths, t_grid.shape[0]), dtype=np.int64)
    hit = np.zeros(n_paths)
    reached = np.zeros(n_paths, dtype=np.bool_)
    min_state = np.zeros(n_paths, dtype=np.int64)
    n_jumps = np.zeros(n_paths, dtype=np.int64)
    _chain_batch(np.uint64(k0), np.uint64(k1), np.arange(n_paths, dtype=np.uint64), i0, cap,
                 _rates(cap, params), params.theta, float(horizon), t_grid, MAX_JUMPS,
                 occ, visits, state_at, hit, reached, min_state, n_jumps)
    if np.any(n_jumps < 0):
        raise RangeError(f"a path exceeded {MAX_JUMPS} jumps; check lambda and cap")
    tau = np.where(reached, hit + mean_explosion_time(cap, params), math.inf)
    return ChainBatch(i0, cap, int(seed), t_grid, occ, visits, state_at, tau, min_state, n_jumps,
                      censoring_bias(i0, cap, params))


@dataclass(frozen=True)
class SurvivalEstimate:
    t: float
    point: float
    half_width: float
    n_paths: int
    ci_low: float
    ci_high: float
    bias_bound: float = 0.0


def _survival_from_batch(batch, t):
    ci = wilson_interval(int(np.count_nonzero(batch.alive(t))), batch.n_paths)
    if batch.bias_bound > 0.1 * ci.half_width:
        warnings.warn(
            f"cap censoring bias bound {batch.bias_bound:.2e} exceeds a tenth of the CI half-width",
            CensoringWarning, stacklevel=3,
        )
    return SurvivalEstimate(float(t), ci.point, ci.half_width, batch.n_paths, ci.low, ci.high, batch.bias_bound)


def estimate_survival(i0, t, params, n_paths, seed, cap=DEFAULT_CAP):
    """Monte Carlo P_i0(tau > t) with a Wilson 95% interval."""
    return survival_curve(i0, [t], params, n_paths, seed, cap)[0]


def survival_curve(i0, times, params, n_paths, seed, cap=DEFAULT_CAP):
    """Survival estimates at several times from one common set of paths."""
    if n_paths < 100:
        raise ValueError(f"n_paths must be >= 100, got {n_paths}")
    times = [float(t) for t in times]
    if any(t < 0 for t in times):
        raise ValueError("times must be nonnegative")
    batch = run_chains(i0, params, n_paths, seed, cap, horizon=max(times) * (1 + 1e-12) + 1e-300)
    return [_survival_from_batch(batch, t) for t in times]


def estimate_transition(i, j, t, params, n_paths, seed, cap=DEFAULT_CAP):
    """Monte Carlo f_ij(t) = P_i(xi_t = j) with a Wilson 95% interval."""
    j = _check_state(j, "j")
    if n_paths < 100:
        raise ValueError(f"n_paths must be >= 100, got {n_paths}")
    batch = run_chains(i, params, n_paths, seed, cap, horizon=t * (1 + 1e-12) + 1e-300, t_grid=[t])
    return transition_from_batch(batch, j, 0)


def transition_from_batch(batch, j, grid_index):
    hits = int(np.count_nonzero(batch.state_at[:, grid_index] == j))
    return wilson_interval(hits, batch.n_paths)


@dataclass(frozen=True)
class OccupationReport:
    j: int
    n_paths: int
    mean: float
    std_error: float
    expected: float
    variance: float
    dispersion: Interval  # var/mean^2 - 1 and its CI
    passed: bool

    @property
    def abs_dispersion(self):
        return abs(self.dispersion.point)


def occupation_law_check(j, params, n_paths, seed, cap=DEFAULT_CAP, batch=None):
    """Compare T_j from start 1 with the exponential law of mean E_1(T_j)."""
    j = _check_state(j, "j")
    if batch is None:
        batch = run_chains(1, params, n_paths, seed, cap)
    elif batch.i0 != 1:
        raise ValueError("occupation law check needs paths started at 1")
    samples = batch.occupation[:, j - 1]
    mean, se = mean_and_se(samples)
    expected = expected_occupation(1, j, params)
    disp, _ = dispersion_diagnostic(samples)
    passed = abs(mean - expected) <= 3 * se and disp.covers(0.0)
    return OccupationReport(j, batch.n_paths, float(mean), float(se), expected,
                            float(np.var(samples, ddof=1)), disp, bool(passed))


__all__ = [
    "ChainPath", "ChainBatch", "SurvivalEstimate", "OccupationReport", "CensoringWarning",
    "jump_up_probability", "holding_rate", "never_visit_probability", "expected_occupation",
    "mean_explosion_time", "survival_threshold", "survival_upper_bound", "censoring_bias",
    "simulate_chain", "run_chains", "estimate_survival", "survival_curve", "estimate_transition",
    "transition_from_batch", "occupation_law_check", "Interval",
]
