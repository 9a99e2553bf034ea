"""Reference limit processes used as oracles.

* the n-type Wright-Fisher diffusion with covariance ``theta p_i (delta_ij - p_j)``;
* the Moran model with per-individual death rate ``lam``;
* the Q-process, a reflected diffusion with drift ``b + sigma^2 phi'/phi``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import _rng
from .domain import CoefficientField, KilledPath, simulate_killed_path, _as_stream
from .spectral import EigenTriple, q_process_field

__all__ = [
    "SimplexState",
    "wf_step",
    "wf_fixation",
    "wf_fixation_batch",
    "wf_at",
    "wf_variance_curve",
    "wf_fixation_time_ode",
    "MoranResult",
    "moran_simulate",
    "QProcessConfig",
    "q_process_simulate",
    "sample_tilted",
]

ABSORB_TOL = 1e-12


@dataclass(frozen=True)
class SimplexState:
    p: np.ndarray
    theta: float

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.ndim != 1 or p.size < 1:
            raise ValueError("p must be a non-empty vector")
        if np.any(p < -1e-10) or abs(p.sum() - 1) > 1e-10:
            raise ValueError(f"p is not in the simplex: {p}")
        if self.theta < 0:
            raise ValueError("theta must be non-negative")
        object.__setattr__(self, "p", p)

    @property
    def fixed(self) -> bool:
        return int(np.count_nonzero(self.p)) == 1


@njit(cache=True, inline="always")
def _wf_increment(p, z, theta, dt, out):
    n = p.shape[0]
    s = 0.0
    for i in range(n):
        s += math.sqrt(p[i]) * z[i]
    amp = math.sqrt(theta * dt)
    for i in range(n):
        out[i] = p[i] + amp * (math.sqrt(p[i]) * z[i] - p[i] * s)


@njit(cache=True, inline="always")
def _project(q, tol):
    """Clip, absorb near-zero entries and renormalise; returns the number of live types."""
    n = q.shape[0]
    tot = 0.0
    for i in range(n):
        if q[i] < tol:
            q[i] = 0.0
        tot += q[i]
    alive = 0
    for i in range(n):
        q[i] /= tot
        if q[i] > 1.0 - tol:
            for k in range(n):
                q[k] = 0.0
            q[i] = 1.0
            return 1
    for i in range(n):
        if q[i] > 0.0:
            alive += 1
    return alive


@njit(cache=True)
def _wf_step_kernel(p, theta, dt, seed, step, tol):
    n = p.shape[0]
    z = np.empty(n)
    for i in range(n):
        z[i] = _rng.normal(seed, _rng.MORAN, step, i)
    out = np.empty(n)
    _wf_increment(p, z, theta, dt, out)
    _project(out, tol)
    return out


def wf_step(state: SimplexState, dt: float, rng) -> SimplexState:
    """One Euler step of the WF diffusion followed by projection onto the simplex.

    ``rng`` may be an int seed or a :class:`~fvsim.domain.Stream`; each call
    draws a fresh sub-seed.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if state.fixed:
        return state
    q = _wf_step_kernel(state.p, float(state.theta), float(dt), _as_stream(rng).next_seed(), 0, ABSORB_TOL)
    return SimplexState(q, state.theta)


@njit(cache=True)
def _wf_fix_kernel(p0, theta, dt, seeds, max_steps, tol, times, winners):
    n = p0.shape[0]
    p = np.empty(n)
    q = np.empty(n)
    z = np.empty(n)
    for r in range(seeds.shape[0]):
        for i in range(n):
            p[i] = p0[i]
        alive = _project(p, tol)
        step = 0
        while alive > 1 and step < max_steps:
            for i in range(n):
                z[i] = _rng.normal(seeds[r], _rng.MORAN, step, i)
            _wf_increment(p, z, theta, dt, q)
            alive = _project(q, tol)
            for i in range(n):
                p[i] = q[i]
            step += 1
        if alive == 1:
            times[r] = step * dt
            best = 0
            for i in range(n):
                if p[i] > p[best]:
                    best = i
            winners[r] = best
        else:
            times[r] = np.nan
            winners[r] = -1


def wf_fixation_batch(p0, theta: float, dt: float, replicates: int, seed: int, max_time: float = 1e4):
    """Fixation times and fixed types of independent WF paths (``nan``/``-1`` if not fixed by ``max_time``)."""
    p0 = SimplexState(p0, theta).p
    seeds = _rng.seed_table(int(seed), int(replicates))
    times = np.empty(replicates)
    winners = np.empty(replicates, dtype=np.int64)
    _wf_fix_kernel(p0, float(theta), float(dt), seeds, int(max_time / dt), ABSORB_TOL, times, winners)
    return times, winners


@njit(cache=True)
def _wf_at_kernel(p0, theta, dt, seeds, n_steps, tol, out):
    n = p0.shape[0]
    p = np.empty(n)
    q = np.empty(n)
    z = np.empty(n)
    for r in range(seeds.shape[0]):
        for i in range(n):
            p[i] = p0[i]
        alive = _project(p, tol)
        for step in range(n_steps):
            if alive <= 1:
                break
            for i in range(n):
                z[i] = _rng.normal(seeds[r], _rng.MORAN, step, i)
            _wf_increment(p, z, theta, dt, q)
            alive = _project(q, tol)
            for i in range(n):
                p[i] = q[i]
        for i in range(n):
            out[r, i] = p[i]


def wf_at(p0, theta: float, dt: float, t: float, replicates: int, seed: int) -> np.ndarray:
    """States at time ``t`` of independent WF paths, one row per replicate.

    Uses the same noise keys as :func:`wf_fixation_batch`, so row ``r`` is the
    time ``t`` state of fixation replicate ``r``.
    """
    p0 = SimplexState(p0, theta).p
    out = np.empty((replicates, p0.size))
    _wf_at_kernel(p0, float(theta), float(dt), _rng.seed_table(int(seed), int(replicates)),
                  int(round(t / dt)), ABSORB_TOL, out)
    return out


def wf_fixation(p0, theta: float, dt: float, rng, max_time: float = 1e4) -> tuple[float, int]:
    """Simulate until a single type is left; returns ``(fixation time, index)``."""
    t, w = wf_fixation_batch(p0, theta, dt, 1, _as_stream(rng).next_seed(), max_time)
    if w[0] < 0:
        raise RuntimeError(f"no fixation before t={max_time}")
    return float(t[0]), int(w[0])


def wf_variance_curve(p0: float, theta: float, t) -> np.ndarray:
    """``Var p(t)`` for the two-type diffusion: ``p0 (1 - p0) (1 - exp(-theta t))``."""
    return p0 * (1 - p0) * (1 - np.exp(-theta * np.asarray(t, dtype=float)))


def wf_fixation_time_ode(p0: float, theta: float, n: int = 20000) -> float:
    """Mean fixation time from ``p0``: solve ``theta/2 p(1-p) u'' = -1``, ``u(0) = u(1) = 0``.

    Second-order finite differences on ``n`` cells; the right-hand side is
    singular only at the absorbing ends, which are Dirichlet nodes.
    """
    from scipy.linalg import solve_banded

    h = 1.0 / n
    x = np.linspace(0, 1, n + 1)[1:-1]
    a = 0.5 * theta * x * (1 - x) / h**2
    ab = np.zeros((3, n - 1))
    ab[0, 1:] = a[:-1]
    ab[1] = -2 * a
    ab[2, :-1] = a[1:]
    u = solve_banded((1, 1), ab, -np.ones(n - 1))
    return float(np.interp(p0, np.concatenate([[0], x, [1]]), np.concatenate([[0], u, [0]])))


# ---------------------------------------------------------------- Moran


@njit(cache=True)
def _moran_kernel(col, n_types, lam, horizon, seed, sample_times, freq, stop_on_fix):
    N = col.shape[0]
    counts = np.zeros(n_types, dtype=np.int64)
    for i in range(N):
        counts[col[i]] += 1
    distinct = 0
    for k in range(n_types):
        if counts[k] > 0:
            distinct += 1
    rate = N * lam
    t = 0.0
    e = 0
    si = 0
    n_s = sample_times.shape[0]
    fix_t = np.nan
    while True:
        t_new = t - math.log(_rng.uniform(seed, _rng.MORAN, e, 0)) / rate
        while si < n_s and sample_times[si] < t_new:
            for k in range(n_types):
                freq[si, k] = counts[k] / N
            si += 1
        if t_new > horizon:
            break
        t = t_new
        v = int(_rng.uniform(seed, _rng.MORAN, e, 1) * N)
        j = int(_rng.uniform(seed, _rng.MORAN, e, 2) * (N - 1))
        if j >= v:
            j += 1
        e += 1
        if col[v] != col[j]:
            counts[col[v]] -= 1
            if counts[col[v]] == 0:
                distinct -= 1
            counts[col[j]] += 1
            col[v] = col[j]
            if distinct == 1:
                fix_t = t
                if stop_on_fix:
                    break
    while si < n_s:
        for k in range(n_types):
            freq[si, k] = counts[k] / N
        si += 1
    return fix_t, e


@dataclass
class MoranResult:
    fixation_time: float | None
    fixed_colour: int | None
    sample_times: np.ndarray
    frequencies: np.ndarray
    events: int


def moran_simulate(N: int, lam: float, colours, horizon: float, rng, sample_times=(), stop_on_fixation: bool = True) -> MoranResult:
    """Moran model: each individual dies at rate ``lam`` and copies a uniformly chosen other.

    ``colours`` is a length ``N`` integer array. Frequencies of every colour are
    recorded at ``sample_times`` (after fixation they stay constant).
    """
    col = np.array(colours, dtype=np.int64)
    if col.shape != (N,) or N < 2:
        raise ValueError("need N >= 2 and one colour per individual")
    n_types = int(col.max()) + 1
    st = np.asarray(sorted(sample_times), dtype=float)
    freq = np.zeros((st.size, n_types))
    if np.unique(col).size == 1:
        freq[:] = np.bincount(col, minlength=n_types) / N
        return MoranResult(0.0, int(col[0]), st, freq, 0)
    fix_t, e = _moran_kernel(col, n_types, float(lam), float(horizon), _as_stream(rng).next_seed(), st, freq,
                             stop_on_fixation)
    if np.isnan(fix_t):
        return MoranResult(None, None, st, freq, int(e))
    return MoranResult(float(fix_t), int(col[0]), st, freq, int(e))


# ---------------------------------------------------------------- Q-process


@dataclass(frozen=True)
class QProcessConfig:
    field: CoefficientField
    triple: EigenTriple

    def __post_init__(self):
        if np.any(self.triple.phi_values <= 0):
            raise ValueError("phi must be positive on the grid")

    @property
    def q_field(self) -> CoefficientField:
        return q_process_field(self.field, self.triple)

    def stationary_density(self) -> np.ndarray:
        """``phi * pi`` density on the grid; equals ``phi^2`` up to a constant when the drift is zero."""
        d = self.triple.phi_values * self.triple.pi_density()
        return d / float(np.sum(0.5 * (d[1:] + d[:-1]) * np.diff(self.triple.grid)))


def q_process_simulate(x0, cfg: QProcessConfig, horizon: float, dt: float, rng) -> KilledPath:
    """A reflected path with the Doob-transformed drift and no killing, on ``[0, horizon]``."""
    return simulate_killed_path(x0, 0.0, horizon, dt, cfg.q_field, rng)


def sample_tilted(sampler, phi, n: int, rng: np.random.Generator, phi_max: float | None = None) -> np.ndarray:
    """Rejection sampling of the ``phi``-tilt of the law drawn by ``sampler(k) -> (k, d)`` array."""
    out = []
    have = 0
    while have < n:
        k = max(16, 2 * (n - have))
        x = np.asarray(sampler(k), dtype=float).reshape(k, -1)
        w = np.asarray(phi(x[:, 0]), dtype=float)
        m = phi_max if phi_max is not None else float(w.max())
        if np.any(w > m * (1 + 1e-12)):
            raise ValueError("phi exceeds the supplied bound")
        acc = x[rng.random(k) * m < w]
        out.append(acc)
        have += acc.shape[0]
    return np.concatenate(out)[:n]
