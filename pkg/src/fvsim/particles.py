"""The N-particle multi-colour Fleming-Viot engine.

Kill events come from one superposed Poisson stream of rate ``N * kappa_max``.
Each candidate picks a particle uniformly at random and is accepted with
probability ``kappa(X) / kappa_max``; an accepted candidate moves the victim
onto a uniformly chosen other particle, which it copies in position and in
colour. Particles sit still between the grid times ``m * dt`` and take one
folded Euler step at each grid time.

The kernel is resumable: :func:`run` may be called repeatedly on a
:class:`SystemState` and the concatenated output equals one long run. Every
random number is a hash of ``(seed, stream, counter)`` (diffusion by
``(grid step, particle, coordinate)``, kill candidates by candidate number),
so the output does not depend on how the work is scheduled.

Particle indices are 0-based throughout.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from numba import njit

from . import _rng
from .domain import (
    OK,
    CoefficientField,
    InvariantViolation,
    _raise_status,
    check_kappa,
    diffuse_rows,
    kappa_at,
)
from .measures import DiscreteMeasure, DiscreteMetric, EuclideanMetric, Metric
from .spectral import EigenTriple, carre_du_champ

__all__ = [
    "ColourTable",
    "EventLog",
    "PathStore",
    "SystemState",
    "Snapshot",
    "RunResult",
    "TieWarning",
    "init_system",
    "run",
    "empirical_measure",
    "colour_empirical",
    "tilted_colour_measure",
    "tilt_accessors",
    "lambda_statistic",
    "replay_colours",
    "save_run",
    "load_run",
]

FIXED = 10
BUFFER_FULL = 11
MAX_EVENT_BUFFER = 1 << 20


class TieWarning(RuntimeWarning):
    """Two kill events were drawn at the same floating point time."""


# ---------------------------------------------------------------- kernel


@njit(cache=True)
def _advance(t_stop, X, col, counts, sc, ic, seed, dseed, t0, dt, lo, hi, dcode, dpar, scode, spar, kcode, kpar,
             kmax, ev_t, ev_v, ev_j, ev_x, G, stop_on_fix):
    """Advance the system to ``t_stop``.

    ``sc = [t, t_next_candidate]``; ``ic = [grid step, candidate counter,
    distinct colours, events written, ties, error coordinate]``. Grid step
    ``m`` ends at ``t0 + (m + 1) dt`` and its noise is keyed by ``dseed``.
    """
    N, d = X.shape
    rate = N * kmax
    active = np.ones(N, dtype=np.bool_)
    seeds = np.full(N, dseed, dtype=np.int64)
    offsets = np.arange(N) * d
    err = np.zeros(2, dtype=np.int64)
    m = ic[0]
    c = ic[1]
    n = ic[3]
    t_next = sc[1]
    cap = ev_t.shape[0]
    while True:
        t_grid = t0 + (m + 1) * dt
        do_grid = t_grid <= t_stop + 1e-9 * dt
        bound = t_grid if do_grid else t_stop
        while t_next <= bound:
            if n >= cap:
                ic[0] = m
                ic[1] = c
                ic[3] = n
                sc[1] = t_next
                return BUFFER_FULL
            k = int(_rng.uniform(seed, _rng.CANDIDATE, c, 0) * N)
            kv = kappa_at(kcode, kpar, X[k])
            st = check_kappa(kv, kmax)
            if st != OK:
                ic[0] = m
                ic[1] = c
                ic[3] = n
                sc[0] = t_next
                sc[1] = t_next
                return st
            accepted = _rng.uniform(seed, _rng.CANDIDATE, c, 1) * kmax < kv
            if accepted:
                j = int(_rng.uniform(seed, _rng.CANDIDATE, c, 2) * (N - 1))
                if j >= k:
                    j += 1
                old = col[k]
                new = col[j]
                if old != new:
                    counts[old] -= 1
                    if counts[old] == 0:
                        ic[2] -= 1
                    counts[new] += 1
                    col[k] = new
                for q in range(d):
                    X[k, q] = X[j, q]
                    ev_x[n, q] = X[j, q]
                ev_t[n] = t_next
                ev_v[n] = k
                ev_j[n] = j
                if n > 0 and ev_t[n - 1] == t_next:
                    ic[4] += 1
                n += 1
            t_here = t_next
            c += 1
            t_next = t_here - np.log(_rng.uniform(seed, _rng.CANDIDATE, c, 3)) / rate
            if accepted and stop_on_fix and ic[2] == 1:
                ic[0] = m
                ic[1] = c
                ic[3] = n
                sc[0] = t_here
                sc[1] = t_next
                return FIXED
        if not do_grid:
            break
        st = diffuse_rows(X, active, seeds, offsets, m, dt, lo, hi, dcode, dpar, scode, spar, err)
        if st != OK:
            ic[0] = m
            ic[1] = c
            ic[3] = n
            ic[5] = err[1]
            sc[1] = t_next
            return st
        m += 1
        if m < G.shape[0]:
            for i in range(N):
                for q in range(d):
                    G[m, i, q] = X[i, q]
    ic[0] = m
    ic[1] = c
    ic[3] = n
    sc[0] = t_stop
    sc[1] = t_next
    return OK


# ---------------------------------------------------------------- colours


@dataclass
class ColourTable:
    """Colour ids ``0..K-1`` with payloads.

    ``kind`` is ``"label"`` (opaque, discrete metric), ``"point"`` (a point of
    the box, Euclidean metric capped at 1) or ``"path"`` (the index of the
    particle whose future the colour follows; its metric needs a path store).
    """

    kind: str
    payloads: list

    def __post_init__(self):
        if self.kind not in ("label", "point", "path"):
            raise ValueError(f"unknown colour kind {self.kind!r}")

    def __len__(self) -> int:
        return len(self.payloads)

    def metric(self, dim: int = 1, paths: "PathStore | None" = None, t0: float = 0.0, t1: float | None = None) -> Metric:
        if self.kind == "point":
            return EuclideanMetric(dim)
        if self.kind == "label":
            return DiscreteMetric()
        if paths is None:
            raise ValueError("path-valued colours need a path store for their metric")
        from .measures import CallableMetric

        t1 = paths.horizon if t1 is None else t1
        return CallableMetric(lambda a, b: paths.sup_distance(int(a), int(b), t0, t1))

    def payload_array(self, dim: int = 1):
        if self.kind == "point":
            return np.asarray(self.payloads, dtype=float).reshape(-1, dim)
        return list(self.payloads)


# ---------------------------------------------------------------- log


@dataclass
class EventLog:
    """Time ordered kill events: victim ``i`` jumps onto target ``j != i`` at ``times``.

    ``positions[n]`` is the position the victim landed on.
    """

    N: int
    times: np.ndarray
    victims: np.ndarray
    targets: np.ndarray
    positions: np.ndarray

    def __len__(self) -> int:
        return self.times.size

    @classmethod
    def empty(cls, N: int, d: int = 1) -> "EventLog":
        return cls(N, np.empty(0), np.empty(0, np.int64), np.empty(0, np.int64), np.empty((0, d)))

    @classmethod
    def from_events(cls, N: int, events: Sequence[tuple], d: int = 1) -> "EventLog":
        """Build a log from ``(time, victim, target)`` triples (positions set to nan)."""
        ev = sorted(events, key=lambda e: (e[0], e[1]))
        t = np.array([e[0] for e in ev], dtype=float)
        v = np.array([e[1] for e in ev], dtype=np.int64)
        j = np.array([e[2] for e in ev], dtype=np.int64)
        log = cls(N, t, v, j, np.full((len(ev), d), np.nan))
        log.validate()
        return log

    def validate(self) -> None:
        if self.times.size and np.any(np.diff(self.times) < 0):
            raise InvariantViolation("event times are not ordered")
        if np.any(self.victims == self.targets):
            raise InvariantViolation("an event has victim equal to target")
        for a in (self.victims, self.targets):
            if a.size and (a.min() < 0 or a.max() >= self.N):
                raise InvariantViolation("event index out of range")

    def count(self, t: float) -> int:
        return int(np.searchsorted(self.times, t, side="right"))

    def J(self, t: float) -> float:
        """Number of deaths up to ``t`` divided by ``N``."""
        return self.count(t) / self.N

    def window(self, s: float, t: float) -> slice:
        """Indices of events with time in ``(s, t]``."""
        return slice(int(np.searchsorted(self.times, s, side="right")), int(np.searchsorted(self.times, t, side="right")))

    def extend(self, other: "EventLog") -> "EventLog":
        return EventLog(self.N, np.concatenate([self.times, other.times]), np.concatenate([self.victims, other.victims]),
                        np.concatenate([self.targets, other.targets]), np.concatenate([self.positions, other.positions]))

    def to_csv(self, path) -> None:
        """Columns ``time, victim, target, x0, ...`` (landing position of the victim)."""
        d = self.positions.shape[1]
        header = ",".join(["time", "victim", "target"] + [f"x{k}" for k in range(d)])
        data = np.column_stack([self.times, self.victims, self.targets, self.positions])
        np.savetxt(path, data, fmt=["%.17g", "%d", "%d"] + ["%.17g"] * d, delimiter=",", header=header, comments="")

    @classmethod
    def from_csv(cls, path, N: int, d: int = 1) -> "EventLog":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        if header[:3] != ["time", "victim", "target"]:
            raise ValueError(f"{path}: expected columns time,victim,target")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if data.size == 0:
            return cls.empty(N, d)
        pos = data[:, 3:3 + d] if data.shape[1] >= 3 + d else np.full((data.shape[0], d), np.nan)
        log = cls(N, data[:, 0].copy(), data[:, 1].astype(np.int64), data[:, 2].astype(np.int64),
                  np.ascontiguousarray(pos))
        log.validate()
        return log


# ---------------------------------------------------------------- paths


@njit(cache=True)
def _path_query(G, dt, t_sorted, x_sorted, starts, ks, ss, left, out):
    M = G.shape[0] - 1
    for q in range(ks.shape[0]):
        k = ks[q]
        s = ss[q]
        if left:
            m = int(math.ceil(s / dt - 1e-9)) - 1
        else:
            m = int(math.floor(s / dt + 1e-9))
        if m < 0:
            m = 0
        if m > M:
            return q
        tm = m * dt
        a = starts[k]
        b = starts[k + 1]
        # last event of particle k with time <= s (or < s for left limits)
        lo_i = a
        hi_i = b
        while lo_i < hi_i:
            mid = (lo_i + hi_i) // 2
            if (t_sorted[mid] < s) if left else (t_sorted[mid] <= s):
                lo_i = mid + 1
            else:
                hi_i = mid
        e = lo_i - 1
        if e >= a and t_sorted[e] > tm + 1e-12 * dt:
            for r in range(G.shape[2]):
                out[q, r] = x_sorted[e, r]
        else:
            for r in range(G.shape[2]):
                out[q, r] = G[m, k, r]
    return -1


@dataclass
class PathStore:
    """Positions of every particle on ``[0, horizon]``.

    ``grid[m]`` holds the configuration at time ``m * dt`` (after the Euler
    step); within a grid interval a particle's position changes only when it
    is a victim, and then ``log.positions`` gives the landing point.
    """

    dt: float
    grid: np.ndarray
    log: EventLog
    horizon: float

    def __post_init__(self):
        order = np.argsort(self.log.victims, kind="stable")
        self._t = np.ascontiguousarray(self.log.times[order])
        self._x = np.ascontiguousarray(self.log.positions[order])
        self._starts = np.searchsorted(self.log.victims[order], np.arange(self.log.N + 1)).astype(np.int64)

    @property
    def N(self) -> int:
        return self.grid.shape[1]

    @property
    def dim(self) -> int:
        return self.grid.shape[2]

    def values(self, ks, ss, left: bool = False) -> np.ndarray:
        """Positions ``X^{k}(s)`` (or left limits ``X^{k}(s-)``) for paired arrays of indices and times."""
        ks = np.atleast_1d(np.asarray(ks, dtype=np.int64))
        ss = np.atleast_1d(np.asarray(ss, dtype=float))
        ks, ss = np.broadcast_arrays(ks, ss)
        ks = np.ascontiguousarray(ks)
        ss = np.ascontiguousarray(ss)
        if np.any(ss > self.horizon + 1e-9) or np.any(ss < -1e-12):
            raise ValueError(f"path storage covers [0, {self.horizon}] only")
        out = np.empty((ks.size, self.dim))
        bad = _path_query(self.grid, self.dt, self._t, self._x, self._starts, ks, ss, left, out)
        if bad >= 0:
            raise ValueError("missing path storage for the requested time")
        return out

    def value(self, k: int, s: float, left: bool = False) -> np.ndarray:
        return self.values([k], [s], left)[0]

    def breakpoints(self, k: int, t0: float, t1: float) -> np.ndarray:
        """Times in ``[t0, t1]`` where the path of ``k`` may change (grid times and its victim events)."""
        m0 = int(math.floor(t0 / self.dt + 1e-9))
        m1 = int(math.floor(t1 / self.dt + 1e-9))
        g = np.arange(m0, m1 + 1) * self.dt
        a, b = self._starts[k], self._starts[k + 1]
        ev = self._t[a:b]
        ev = ev[(ev > t0) & (ev <= t1)]
        pts = np.concatenate([[t0], g[(g > t0) & (g <= t1)], ev])
        return np.unique(pts)

    def sup_distance(self, a: int, b: int, t0: float, t1: float) -> float:
        ts = np.union1d(self.breakpoints(a, t0, t1), self.breakpoints(b, t0, t1))
        va = self.values(np.full(ts.size, a), ts)
        vb = self.values(np.full(ts.size, b), ts)
        return float(np.sqrt(((va - vb) ** 2).sum(1)).max())


# ---------------------------------------------------------------- state


@dataclass
class Snapshot:
    time: float
    positions: np.ndarray
    colours: np.ndarray

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            d = self.positions.shape[1]
            w.writerow(["index"] + [f"x{k}" for k in range(d)] + ["colour"])
            for i in range(self.positions.shape[0]):
                w.writerow([i] + [repr(float(v)) for v in self.positions[i]] + [int(self.colours[i])])


@dataclass
class SystemState:
    field: CoefficientField
    N: int
    dt: float
    seed: int
    positions: np.ndarray
    colours: np.ndarray
    table: ColourTable
    time: float = 0.0
    _sc: np.ndarray = dc_field(default=None, repr=False)
    _ic: np.ndarray = dc_field(default=None, repr=False)
    _counts: np.ndarray = dc_field(default=None, repr=False)
    initial_positions: np.ndarray = dc_field(default=None, repr=False)
    initial_colours: np.ndarray = dc_field(default=None, repr=False)
    events: EventLog = dc_field(default=None, repr=False)
    _grid: np.ndarray | None = dc_field(default=None, repr=False)
    _t0: float = dc_field(default=0.0, repr=False)
    _dseed: int = dc_field(default=None, repr=False)
    _epoch: int = dc_field(default=0, repr=False)
    _grid_rows: int | None = dc_field(default=None, repr=False)
    _grid_dt: float | None = dc_field(default=None, repr=False)

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("N must be at least 2")
        self.positions = np.ascontiguousarray(self.positions, dtype=float).reshape(self.N, self.field.dim)
        self.colours = np.ascontiguousarray(self.colours, dtype=np.int64)
        a = self.field.arrays
        if np.any(self.positions < a.lo) or np.any(self.positions > a.hi):
            raise ValueError("initial positions outside the box")
        if self.colours.shape != (self.N,) or self.colours.min() < 0 or self.colours.max() >= len(self.table):
            raise ValueError("colour ids do not match the colour table")
        if self._dseed is None:
            self._dseed = self.seed
        if self._sc is None:
            self.initial_positions = self.positions.copy()
            self.initial_colours = self.colours.copy()
            rate = self.N * a.kappa_max
            t_next = -math.log(_rng.uniform(self.seed, _rng.CANDIDATE, 0, 3)) / rate if rate > 0 else math.inf
            self._sc = np.array([self.time, t_next])
            self._ic = np.zeros(6, dtype=np.int64)
            self.events = EventLog.empty(self.N, self.field.dim)
            self._reset_counts()

    def _reset_counts(self) -> None:
        self._counts = np.bincount(self.colours, minlength=len(self.table)).astype(np.int64)
        self._ic[2] = int(np.count_nonzero(self._counts))

    @property
    def n_colours(self) -> int:
        return int(self._ic[2])

    @property
    def grid_step(self) -> int:
        return int(self._ic[0])

    def recolour(self, colours, table: ColourTable) -> None:
        """Replace the colours in place (the spatial dynamics are untouched)."""
        self.colours = np.ascontiguousarray(colours, dtype=np.int64)
        self.table = table
        if self.colours.shape != (self.N,) or self.colours.max() >= len(table):
            raise ValueError("colour ids do not match the colour table")
        self._reset_counts()

    def recolour_by_index(self) -> None:
        """Give particle ``i`` colour ``i``; its payload is the index (a path handle)."""
        self.recolour(np.arange(self.N), ColourTable("path", list(range(self.N))))

    def enable_path_storage(self, horizon: float) -> None:
        """Keep the grid configurations up to ``horizon`` (must be called at time 0)."""
        if self.time != 0.0:
            raise ValueError("path storage must start at time 0")
        M = int(math.ceil(horizon / self.dt - 1e-9))
        self._grid = np.empty((M + 1, self.N, self.field.dim))
        self._grid[0] = self.positions

    def path_store(self) -> PathStore:
        if self._grid is None:
            raise ValueError("path storage was not enabled")
        M = self._grid_rows - 1 if self._grid_rows is not None else min(self._grid.shape[0] - 1, self.grid_step)
        dt = self._grid_dt if self._grid_rows is not None else self.dt
        return PathStore(dt, self._grid[: M + 1], self.events, min(self.time, M * dt))

    def change_time_step(self, dt: float) -> None:
        """Continue with Euler step ``dt`` from the current time, which must be a grid time.

        Stored paths are frozen at the current time; later grid steps use a
        fresh diffusion stream so no noise key is reused.
        """
        if dt <= 0:
            raise ValueError("dt must be positive")
        here = self._t0 + self.grid_step * self.dt
        if abs(here - self.time) > 1e-9 * self.dt:
            raise ValueError(f"time {self.time} is not on the grid of step {self.dt}")
        if self._grid is not None and self._grid_rows is None:
            self._grid_rows = min(self._grid.shape[0], self.grid_step + 1)
            self._grid_dt = self.dt
        self._t0 = here
        self._ic[0] = 0
        self.dt = float(dt)
        self._epoch += 1
        self._dseed = _rng.derive_seed(self.seed, 0xD7, self._epoch)

    def snapshot(self) -> Snapshot:
        return Snapshot(self.time, self.positions.copy(), self.colours.copy())


@dataclass
class RunResult:
    state: SystemState
    log: EventLog
    snapshots: dict
    fixation_time: float | None
    fixed_colour: int | None

    def summary(self) -> dict:
        return {
            "N": self.state.N,
            "time": self.state.time,
            "events": len(self.log),
            "J": self.log.J(self.state.time),
            "fixation_time": self.fixation_time,
            "fixed_colour": self.fixed_colour,
            "n_colours": self.state.n_colours,
        }


# ---------------------------------------------------------------- initial conditions


def _sample_density(grid, density, n, gen) -> np.ndarray:
    """Exact inverse-CDF sampling from the piecewise-linear interpolant of ``density``."""
    dens = np.clip(np.asarray(density, dtype=float), 0, None)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
    target = gen.random(n) * cum[-1]
    k = np.clip(np.searchsorted(cum, target, side="right") - 1, 0, grid.size - 2)
    a = dens[k]
    h = grid[k + 1] - grid[k]
    slope = (dens[k + 1] - a) / h
    r = target - cum[k]
    # solve a*s + slope*s^2/2 = r on [0, h]
    disc = np.sqrt(np.maximum(a * a + 2 * slope * r, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(np.abs(slope) * h > 1e-12 * np.maximum(a, 1e-300), 2 * r / (a + disc), r / a)
    return grid[k] + np.clip(np.nan_to_num(s), 0.0, h)


def initial_positions(field: CoefficientField, N: int, spec: Any, seed: int, triple: EigenTriple | None = None) -> np.ndarray:
    """Initial positions from a spec.

    ``spec`` is an ``(N, d)`` array, ``"uniform"``, ``"pi"`` (needs ``triple``),
    ``{"atoms": [...]}`` (particle ``i`` on atom ``i mod K``), or
    ``{"density": values, "grid": grid}``.
    """
    gen = np.random.default_rng(_rng.derive_seed(seed, 0x1A17))
    d = field.dim
    if isinstance(spec, str):
        if spec == "uniform":
            lo, hi = np.array(field.lo), np.array(field.hi)
            return lo + (hi - lo) * gen.random((N, d))
        if spec == "pi":
            if triple is None:
                raise ValueError("'pi' initial condition needs an eigentriple")
            return _sample_density(triple.grid, triple.pi_density(), N, gen)[:, None]
        raise ValueError(f"unknown position spec {spec!r}")
    if isinstance(spec, dict):
        if "atoms" in spec:
            atoms = np.asarray(spec["atoms"], dtype=float).reshape(-1, d)
            return atoms[np.arange(N) % atoms.shape[0]]
        if "density" in spec:
            return _sample_density(np.asarray(spec["grid"], float), spec["density"], N, gen)[:, None]
        raise ValueError(f"unknown position spec keys {sorted(spec)}")
    arr = np.asarray(spec, dtype=float)
    if arr.ndim == 1 and d == 1:
        arr = arr[:, None]
    if arr.shape != (N, d):
        raise ValueError(f"explicit positions have shape {arr.shape}, expected {(N, d)}")
    return arr.copy()


def initial_colours(positions: np.ndarray, spec: Any) -> tuple[np.ndarray, ColourTable]:
    """Colour ids and table from a spec.

    ``"position"`` gives each distinct initial position its own colour (the
    payload is the point), ``"index"`` gives every particle its own colour,
    ``"single"`` one colour for all, and an integer array sets labels directly.
    """
    N = positions.shape[0]
    if isinstance(spec, str):
        if spec == "position":
            uniq, inv = np.unique(positions, axis=0, return_inverse=True)
            return inv.ravel().astype(np.int64), ColourTable("point", [p.copy() for p in uniq])
        if spec == "index":
            return np.arange(N, dtype=np.int64), ColourTable("path", list(range(N)))
        if spec == "single":
            return np.zeros(N, dtype=np.int64), ColourTable("label", [0])
        raise ValueError(f"unknown colour spec {spec!r}")
    labels = np.asarray(spec)
    if labels.shape != (N,):
        raise ValueError(f"colour labels have shape {labels.shape}, expected {(N,)}")
    uniq, inv = np.unique(labels, return_inverse=True)
    return inv.astype(np.int64), ColourTable("label", [u.item() if hasattr(u, "item") else u for u in uniq])


def init_system(field: CoefficientField, N: int, positions: Any = "uniform", colours: Any = "single",
                seed: int = 0, dt: float = 1e-3, triple: EigenTriple | None = None,
                store_paths_until: float | None = None) -> SystemState:
    if N < 2:
        raise ValueError("N must be at least 2")
    if dt <= 0:
        raise ValueError("dt must be positive")
    X = initial_positions(field, N, positions, seed, triple)
    col, table = initial_colours(X, colours)
    st = SystemState(field, int(N), float(dt), int(seed) & 0x7FFFFFFFFFFFFFFF, X, col, table)
    if store_paths_until is not None:
        st.enable_path_storage(store_paths_until)
    return st


# ---------------------------------------------------------------- running


def _advance_to(state: SystemState, t_stop: float, stop_on_fix: bool) -> int:
    a = state.field.arrays
    G = state._grid if state._grid is not None and state._epoch == 0 else np.empty((0, state.N, state.field.dim))
    cap = int(min(max(1024.0, 1.2 * state.N * a.kappa_max * max(t_stop - state.time, 0.0) + 64), MAX_EVENT_BUFFER))
    bufs = [np.empty(cap), np.empty(cap, np.int64), np.empty(cap, np.int64), np.empty((cap, state.field.dim))]
    written = 0
    state._ic[3] = 0
    while True:
        st = _advance(float(t_stop), state.positions, state.colours, state._counts, state._sc, state._ic,
                      state.seed, state._dseed, state._t0, state.dt, a.lo, a.hi, a.drift_code, a.drift_params, a.sigma_code, a.sigma_params,
                      a.kappa_code, a.kappa_params, a.kappa_max, bufs[0][written:], bufs[1][written:],
                      bufs[2][written:], bufs[3][written:], G, stop_on_fix)
        written += int(state._ic[3])
        state._ic[3] = 0
        if st != BUFFER_FULL:
            break
        new = max(2 * written, 1024)
        bufs = [np.concatenate([b[:written], np.empty((new,) + b.shape[1:], b.dtype)]) for b in bufs]
    if written:
        state.events = state.events.extend(EventLog(state.N, bufs[0][:written].copy(), bufs[1][:written].copy(),
                                                    bufs[2][:written].copy(), bufs[3][:written].copy()))
    state.time = float(state._sc[0])
    if st not in (OK, FIXED):
        _raise_status(st, int(state._ic[5]), f"FV run at t={state.time:.6g}")
    ties = int(state._ic[4])
    if ties:
        warnings.warn(f"{ties} kill events share a floating point time; order kept by draw sequence", TieWarning)
    return st


def run(state: SystemState, horizon: float, snapshot_times: Sequence[float] = (), stop_on_fixation: bool = False) -> RunResult:
    """Advance ``state`` in place to ``horizon`` (or to fixation).

    Returns the state, the full event log so far, the snapshots keyed by time,
    and the fixation time and colour if fixation happened in this call.
    """
    if horizon <= state.time:
        raise ValueError(f"horizon {horizon} is not after the current time {state.time}")
    snaps = {}
    fix_t, fix_c = None, None
    if stop_on_fixation and state.n_colours == 1:
        return RunResult(state, state.events, snaps, state.time, int(state.colours[0]))
    for s in sorted(t for t in snapshot_times if state.time <= t <= horizon):
        if s > state.time:
            st = _advance_to(state, s, stop_on_fixation)
            if st == FIXED:
                fix_t, fix_c = state.time, int(state.colours[0])
                break
        snaps[float(s)] = state.snapshot()
    if fix_t is None and state.time < horizon:
        st = _advance_to(state, horizon, stop_on_fixation)
        if st == FIXED:
            fix_t, fix_c = state.time, int(state.colours[0])
    return RunResult(state, state.events, snaps, fix_t, fix_c)


def replay_colours(initial: np.ndarray, log: EventLog, upto: float | None = None) -> np.ndarray:
    """Apply the colour copies of ``log`` (up to time ``upto``) to ``initial``."""
    col = np.array(initial, dtype=np.int64)
    n = len(log) if upto is None else log.count(upto)
    for v, j in zip(log.victims[:n], log.targets[:n]):
        col[v] = col[j]
    return col


# ---------------------------------------------------------------- measures


def empirical_measure(state: SystemState) -> DiscreteMeasure:
    """Spatial empirical measure, equal positions merged."""
    return DiscreteMeasure.from_samples(state.positions)


def colour_empirical(state: SystemState, paths: PathStore | None = None) -> DiscreteMeasure:
    """Colour empirical measure; atoms carry colour ids and their payloads."""
    pay = state.table.payload_array(state.field.dim)
    metric = state.table.metric(state.field.dim, paths) if (state.table.kind != "path" or paths) else DiscreteMetric()
    return DiscreteMeasure.from_labels(state.colours, metric=metric, payloads=pay)


def _phi_weights(state: SystemState, triple: EigenTriple) -> np.ndarray:
    if state.field.dim != 1:
        raise ValueError("tilting uses the one dimensional eigenfunction")
    w = triple.phi_at(state.positions[:, 0])
    if not np.all(w > 0):
        raise InvariantViolation("phi is not positive at every particle")
    return w


def tilted_colour_measure(state: SystemState, triple: EigenTriple | None) -> DiscreteMeasure:
    """Colour measure with each particle weighted by ``phi`` at its position.

    ``triple=None`` means ``phi = 1``.
    """
    w = np.ones(state.N) if triple is None else _phi_weights(state, triple)
    pay = state.table.payload_array(state.field.dim)
    metric = state.table.metric(state.field.dim) if state.table.kind != "path" else DiscreteMetric()
    return DiscreteMeasure.from_labels(state.colours, weights=w, metric=metric, payloads=pay)


@dataclass(frozen=True)
class TiltAccessors:
    phi: np.ndarray
    colours: np.ndarray
    N: int

    @property
    def Q(self) -> float:
        return float(self.phi.sum() / self.N)

    def P(self, E) -> float:
        return float(self.phi[np.isin(self.colours, list(E))].sum() / self.N)

    def Y(self, E) -> float:
        return self.P(E) / self.Q


def tilt_accessors(state: SystemState, triple: EigenTriple) -> TiltAccessors:
    """``P^{N,E}``, ``Q^N`` and ``Y^{N,E} = P/Q`` for colour sets ``E``."""
    w = _phi_weights(state, triple)
    acc = TiltAccessors(w, state.colours.copy(), state.N)
    if acc.Q <= 0:
        raise InvariantViolation("Q^N is not positive")
    return acc


def lambda_statistic(state: SystemState, triple: EigenTriple, E) -> float:
    """``<m^E, Gamma0(phi) + kappa phi^2> + <m^E, phi^2> <m, kappa>``, ``m^E`` the sub-empirical measure of ``E``."""
    E = list(E)
    if not E:
        return 0.0
    x = state.positions[:, 0]
    sel = np.isin(state.colours, E)
    g = np.interp(x, triple.grid, carre_du_champ(triple, state.field))
    phi = triple.phi_at(x)
    kap = state.field.kappa_values(x)
    mE = lambda f: float(f[sel].sum() / state.N)  # noqa: E731
    return mE(g + kap * phi**2) + mE(phi**2) * float(kap.mean())


def save_run(result: RunResult, out, store: PathStore | None = None) -> None:
    """Write ``events.csv``, ``snapshot_<t>.csv``, ``summary.json`` (and ``paths.csv``)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    result.log.to_csv(out / "events.csv")
    for t, snap in result.snapshots.items():
        snap.to_csv(out / f"snapshot_{t:g}.csv")
    summary = result.summary()
    summary.update({"dt": result.state.dt, "dim": result.state.field.dim, "seed": result.state.seed,
                    "field": result.state.field.to_json()})
    if store is not None:
        summary.update({"path_dt": store.dt, "path_horizon": store.horizon})
        M, N, d = store.grid.shape
        steps = np.repeat(np.arange(M), N)
        data = np.column_stack([steps, steps * store.dt, np.tile(np.arange(N), M), store.grid.reshape(M * N, d)])
        header = ",".join(["step", "time", "index"] + [f"x{k}" for k in range(d)])
        np.savetxt(out / "paths.csv", data, fmt=["%d", "%.17g", "%d"] + ["%.17g"] * d, delimiter=",",
                   header=header, comments="")
    (out / "summary.json").write_text(json.dumps(summary, indent=2))


def load_run(path) -> tuple[dict, EventLog, PathStore | None]:
    """Read a directory written by :func:`save_run`."""
    path = Path(path)
    summary = json.loads((path / "summary.json").read_text())
    N, d = int(summary["N"]), int(summary.get("dim", 1))
    log = EventLog.from_csv(path / "events.csv", N, d)
    store = None
    if (path / "paths.csv").exists():
        data = np.loadtxt(path / "paths.csv", delimiter=",", skiprows=1, ndmin=2)
        M = int(data[:, 0].max()) + 1
        grid = data[:, 3:3 + d].reshape(M, N, d)
        store = PathStore(float(summary["path_dt"]), np.ascontiguousarray(grid), log, float(summary["path_horizon"]))
    return summary, log, store
