"""Genealogies read off an event log.

``rho(s, t)`` maps a particle index at time ``t`` to the index, at time
``s``, of the particle it descends from: scanning the events in ``(s, t]``
backwards, whenever the current index is a victim it is replaced by the
target. The historical path (DHP) of ``i`` at ``t`` follows
``X^{rho(s, t)(i)}_s`` for ``s <= t``.

Marked trees use Ulam-Harris labels written as strings over ``{"1", "2"}``
(the root is ``""``). Each vertex carries a :class:`Mark` ``(t_b, path,
t_d)`` where ``t_d = None`` stands for "alive at the horizon". Vertex ``u``
is born at its parent's death time; child ``u1`` continues the parent's
particle and ``u2`` is the particle that jumped onto it (or, in a branching
process, the second offspring).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np
from numba import njit

from . import _rng
from .domain import OK, CoefficientField, KilledPath, _as_stream, _raise_status, check_kappa, diffuse_rows, kappa_at
from .particles import EventLog, PathStore

__all__ = [
    "Unfixed",
    "ancestor_index",
    "ancestor_map",
    "dhp",
    "FixationResult",
    "fixation_scan",
    "spine",
    "spine_index",
    "BranchEvent",
    "branch_events",
    "Mark",
    "MarkedTree",
    "ParticlePath",
    "GridPath",
    "HistoricalPath",
    "descendant_tree",
    "glue",
    "v_primary",
    "augmented_dhp",
    "skeleton",
    "simulate_critical_tree",
    "mark_distance",
    "tree_distance",
    "trees_equal",
    "canonical_form",
]


class Unfixed(RuntimeError):
    """The log ends before the ancestry of every particle coalesces."""


# ---------------------------------------------------------------- ancestry


def _check_index(log: EventLog, i: int) -> None:
    if not 0 <= i < log.N:
        raise IndexError(f"particle index {i} out of range for N={log.N}")


def ancestor_index(log: EventLog, s: float, t: float, i: int) -> int:
    """``rho_{s,t}(i)``."""
    if not 0 <= s <= t:
        raise ValueError("need 0 <= s <= t")
    _check_index(log, i)
    w = log.window(s, t)
    cur = int(i)
    v = log.victims[w]
    j = log.targets[w]
    for n in range(v.size - 1, -1, -1):
        if v[n] == cur:
            cur = int(j[n])
    return cur


def ancestor_map(log: EventLog, s: float, t: float) -> np.ndarray:
    """``rho_{s,t}`` for every index at once (forward relabelling)."""
    if not 0 <= s <= t:
        raise ValueError("need 0 <= s <= t")
    anc = np.arange(log.N)
    w = log.window(s, t)
    for v, j in zip(log.victims[w], log.targets[w]):
        anc[v] = anc[j]
    return anc


@dataclass(frozen=True)
class FixationResult:
    fixed: bool
    time: float | None
    index: int | None


@njit(cache=True)
def _fix_scan(victims, targets, start, N):
    anc = np.arange(N)
    counts = np.ones(N, dtype=np.int64)
    distinct = N
    for n in range(start, victims.shape[0]):
        v = victims[n]
        j = targets[n]
        a, b = anc[v], anc[j]
        if a != b:
            counts[a] -= 1
            if counts[a] == 0:
                distinct -= 1
            counts[b] += 1
            anc[v] = b
            if distinct == 1:
                return n, b
    return -1, -1


def fixation_scan(log: EventLog, t: float) -> FixationResult:
    """First time ``t' >= t`` at which ``rho_{t,t'}`` is constant, and its value.

    Returns an unfixed result if the log ends first.
    """
    start = int(np.searchsorted(log.times, t, side="right"))
    n, b = _fix_scan(log.victims, log.targets, start, log.N)
    if n < 0:
        return FixationResult(False, None, None)
    return FixationResult(True, float(log.times[n]), int(b))


def spine_index(log: EventLog, T: float) -> int:
    """``zeta_T``, the index the spine follows at time ``T``."""
    res = fixation_scan(log, T)
    if not res.fixed:
        raise Unfixed(f"ancestry at time {T} has not coalesced by the end of the log")
    return res.index


# ---------------------------------------------------------------- paths


class PathLike(Protocol):
    def value(self, s: float, left: bool = False) -> np.ndarray: ...

    def values(self, ss: np.ndarray, left: bool = False) -> np.ndarray: ...

    def breakpoints(self, t0: float, t1: float) -> np.ndarray: ...

    def key(self) -> tuple: ...


@dataclass(frozen=True)
class ParticlePath:
    store: PathStore
    k: int

    def value(self, s, left=False):
        return self.store.value(self.k, s, left)

    def values(self, ss, left=False):
        ss = np.asarray(ss, dtype=float)
        return self.store.values(np.full(ss.size, self.k), ss, left)

    def breakpoints(self, t0, t1):
        return self.store.breakpoints(self.k, t0, t1)

    def key(self):
        return ("particle", self.k)


@dataclass(frozen=True)
class GridPath:
    """Positions on ``t0 + k dt`` held constant in between."""

    t0: float
    dt: float
    positions: np.ndarray

    def _idx(self, ss, left):
        x = (np.asarray(ss, dtype=float) - self.t0) / self.dt
        k = np.ceil(x - 1e-9).astype(np.int64) - 1 if left else np.floor(x + 1e-9).astype(np.int64)
        return np.clip(k, 0, self.positions.shape[0] - 1)

    def value(self, s, left=False):
        return self.positions[int(self._idx([s], left)[0])]

    def values(self, ss, left=False):
        return self.positions[self._idx(ss, left)]

    def breakpoints(self, t0, t1):
        g = self.t0 + self.dt * np.arange(self.positions.shape[0])
        return np.concatenate([[t0], g[(g > t0) & (g <= t1)]])

    def key(self):
        return ("grid", self.t0, id(self.positions))


@dataclass(frozen=True)
class HistoricalPath:
    """Concatenation of particle paths: follows ``particles[r]`` on ``[starts[r], starts[r+1])``."""

    store: PathStore
    particles: tuple
    starts: tuple
    end: float

    def _segment(self, s, left):
        st = np.asarray(self.starts)
        r = np.searchsorted(st, s, side="left" if left else "right") - 1
        return np.clip(r, 0, len(self.particles) - 1)

    def index_at(self, s: float, left: bool = False) -> int:
        return int(self.particles[int(self._segment(np.array([s]), left)[0])])

    def value(self, s, left=False):
        return self.store.value(self.index_at(s, left), s, left)

    def values(self, ss, left=False):
        ss = np.asarray(ss, dtype=float)
        ks = np.asarray(self.particles)[self._segment(ss, left)]
        return self.store.values(ks, ss, left)

    def breakpoints(self, t0, t1):
        pts = [np.array([t0])]
        bounds = list(self.starts) + [self.end]
        for r, k in enumerate(self.particles):
            a, b = max(bounds[r], t0), min(bounds[r + 1], t1)
            if a <= b:
                pts.append(self.store.breakpoints(k, a, b))
        return np.unique(np.concatenate(pts))

    def key(self):
        return ("history", self.particles, self.starts)

    def sample(self, times) -> np.ndarray:
        return self.values(times)


def dhp(log: EventLog, paths: PathStore | None, i: int, t: float) -> HistoricalPath:
    """Historical path of particle ``i`` at time ``t`` on ``[0, t]``."""
    _check_index(log, i)
    if paths is None:
        raise ValueError("missing path storage")
    if t > paths.horizon + 1e-9:
        raise ValueError(f"paths are stored up to {paths.horizon}, not {t}")
    w = log.window(0.0, t)
    parts, starts = [int(i)], []
    cur = int(i)
    v = log.victims[w]
    j = log.targets[w]
    tt = log.times[w]
    for n in range(v.size - 1, -1, -1):
        if v[n] == cur:
            starts.append(float(tt[n]))
            cur = int(j[n])
            parts.append(cur)
    starts.append(0.0)
    return HistoricalPath(paths, tuple(reversed(parts)), tuple(reversed(starts)), float(t))


def spine(log: EventLog, paths: PathStore, T: float) -> HistoricalPath:
    """The spine on ``[0, T]``: the historical path of ``zeta_T`` at ``T``."""
    return dhp(log, paths, spine_index(log, T), T)


@dataclass(frozen=True)
class BranchEvent:
    time: float
    victim: int
    target: int
    followed: int  # index the historical path follows from this time on
    side: int  # root particle of the side tree


def branch_events(log: EventLog, i: int, T: float) -> list[BranchEvent]:
    """Events in ``(0, T]`` at which some particle jumps onto the historical path of ``i`` at ``T``."""
    _check_index(log, i)
    w = log.window(0.0, T)
    cur = int(i)
    out = []
    v = log.victims[w]
    j = log.targets[w]
    tt = log.times[w]
    for n in range(v.size - 1, -1, -1):
        after = cur
        if v[n] == cur:
            cur = int(j[n])
        if j[n] == cur:
            side = int(v[n]) if after == j[n] else int(j[n])
            out.append(BranchEvent(float(tt[n]), int(v[n]), int(j[n]), after, side))
    out.reverse()
    return out


# ---------------------------------------------------------------- marked trees


@dataclass(frozen=True)
class Mark:
    t_b: float
    path: PathLike
    t_d: float | None
    index: int | None = None

    def end(self, T: float) -> float:
        return T if self.t_d is None else self.t_d

    def sample(self, ts: np.ndarray, T: float) -> np.ndarray:
        """``f(t_b v t ^ t_d)`` with the left limit at ``t_d``."""
        ts = np.clip(np.asarray(ts, dtype=float), self.t_b, self.end(T))
        out = self.path.values(ts)
        if self.t_d is not None:
            at_end = ts >= self.t_d
            if np.any(at_end):
                out[at_end] = self.path.value(self.t_d, left=True)
        return out

    def start_value(self) -> np.ndarray:
        return self.path.value(self.t_b)

    def end_value(self, T: float) -> np.ndarray:
        return self.path.value(self.t_d, left=True) if self.t_d is not None else self.path.value(T)

    def key(self) -> tuple:
        return (round(self.t_b, 12), None if self.t_d is None else round(self.t_d, 12), self.path.key())


def _parent(v: str) -> str:
    return v[:-1]


def _sibling(v: str) -> str:
    return v[:-1] + ("2" if v[-1] == "1" else "1")


@dataclass
class MarkedTree:
    marks: dict
    T: float

    def __post_init__(self):
        self.marks = dict(sorted(self.marks.items(), key=lambda kv: (len(kv[0]), kv[0])))

    @property
    def labels(self) -> set:
        return set(self.marks)

    def __len__(self) -> int:
        return len(self.marks)

    def __getitem__(self, v: str) -> Mark:
        return self.marks[v]

    def children(self, v: str) -> list[str]:
        return [c for c in (v + "1", v + "2") if c in self.marks]

    def leaves(self) -> list[str]:
        return [v for v in self.marks if not self.children(v)]

    def primary_length(self) -> int:
        n = 0
        while "1" * (n + 1) in self.marks:
            n += 1
        return n

    def subtree(self, v: str) -> "MarkedTree":
        """Tree of ``v`` and its descendants, relabelled with ``v`` as root."""
        return MarkedTree({u[len(v):]: m for u, m in self.marks.items() if u.startswith(v)}, self.T)

    def validate(self, tol: float = 1e-9) -> None:
        """Check closure, birth/death matching, path continuity and leaf structure."""
        if "" not in self.marks:
            raise ValueError("tree has no root")
        for v, m in self.marks.items():
            if set(v) - {"1", "2"}:
                raise ValueError(f"bad label {v!r}")
            if m.t_d is not None and m.t_d < m.t_b - tol:
                raise ValueError(f"vertex {v!r} dies before it is born")
            if v:
                if _parent(v) not in self.marks or _sibling(v) not in self.marks:
                    raise ValueError(f"label set not closed at {v!r}")
                pm = self.marks[_parent(v)]
                if pm.t_d is None or abs(pm.t_d - m.t_b) > tol:
                    raise ValueError(f"birth of {v!r} does not match the death of its parent")
                gap = np.abs(m.start_value() - pm.end_value(self.T)).max()
                if gap > tol:
                    raise ValueError(f"path of {v!r} does not start where its parent ends (gap {gap:.3g})")
            if m.t_d is None and self.children(v):
                raise ValueError(f"vertex {v!r} survives to the horizon but has children")

    def to_json(self) -> dict:
        def ref(p):
            if isinstance(p, ParticlePath):
                return {"particle": p.k}
            if isinstance(p, HistoricalPath):
                return {"particles": list(p.particles), "starts": list(p.starts)}
            if isinstance(p, GridPath):
                return {"t0": p.t0, "dt": p.dt, "positions": p.positions.tolist()}
            return None

        def node(v):
            m = self.marks[v]
            return {"label": v, "t_b": m.t_b, "t_d": m.t_d, "index": m.index, "path_ref": ref(m.path),
                    "children": [node(c) for c in self.children(v)]}

        return node("")

    @classmethod
    def from_json(cls, data: dict, T: float, store: PathStore | None = None) -> "MarkedTree":
        marks = {}

        def path(r):
            if "particle" in r:
                return ParticlePath(store, int(r["particle"]))
            if "particles" in r:
                return HistoricalPath(store, tuple(r["particles"]), tuple(r["starts"]), T)
            return GridPath(float(r["t0"]), float(r["dt"]), np.asarray(r["positions"], dtype=float))

        def walk(n):
            marks[n["label"]] = Mark(float(n["t_b"]), path(n["path_ref"]), None if n["t_d"] is None else float(n["t_d"]),
                                     n.get("index"))
            for c in n["children"]:
                walk(c)

        walk(data)
        return cls(marks, T)


def descendant_tree(log: EventLog, paths: PathStore | None, i: int, t: float, T: float) -> MarkedTree:
    """Particle ``i`` at time ``t`` and its descendants up to ``T``."""
    _check_index(log, i)
    if not 0 <= t <= T:
        raise ValueError("need 0 <= t <= T")
    open_v = {int(i): ""}  # particle -> label of its current vertex
    born = {"": float(t)}
    owner = {"": int(i)}
    died = {}
    w = log.window(t, T)
    for tau, v, j in zip(log.times[w], log.victims[w], log.targets[w]):
        v, j = int(v), int(j)
        if v in open_v:
            u = open_v.pop(v)
            died[u] = float(tau)
        if j in open_v:
            u = open_v[j]
            died[u] = float(tau)
            for c, k in ((u + "1", j), (u + "2", v)):
                born[c] = float(tau)
                owner[c] = k
            open_v[j] = u + "1"
            open_v[v] = u + "2"
    marks = {}
    for u, tb in born.items():
        p = ParticlePath(paths, owner[u]) if paths is not None else _NoPath(owner[u])
        marks[u] = Mark(tb, p, died.get(u), owner[u])
    return MarkedTree(marks, T)


@dataclass(frozen=True)
class _NoPath:
    k: int

    def _fail(self, *a, **k):
        raise ValueError("missing path storage")

    value = values = breakpoints = _fail

    def key(self):
        return ("particle", self.k)


def glue(trunk: tuple, subtrees: Sequence[MarkedTree], T: float | None = None) -> MarkedTree:
    """Attach trees along a path: the primary path is the trunk.

    ``trunk = (t_b, path, t_d)``. Subtrees are sorted by root birth time
    ``s_1 < ... < s_n``; trunk piece ``e_k = "1" * k`` lives on
    ``[s_k, s_{k+1}]`` (with ``s_0 = t_b``, ``s_{n+1} = t_d``) and subtree
    ``k`` (1-based) hangs at ``e_{k-1} + "2"``.
    """
    t_b, path, t_d = trunk
    if T is None:
        T = subtrees[0].T if subtrees else (t_d if t_d is not None else t_b)
    subs = sorted(subtrees, key=lambda s: s[""].t_b)
    times = [float(t_b)] + [s[""].t_b for s in subs]
    end = T if t_d is None else t_d
    for a, b in zip(times, times[1:]):
        if b < a:
            raise ValueError("subtree born before the trunk")
    if times[-1] > end + 1e-12:
        raise ValueError("subtree born after the trunk ends")
    marks = {}
    n = len(subs)
    for k in range(n + 1):
        marks["1" * k] = Mark(times[k], path, times[k + 1] if k < n else t_d, None)
    for k, sub in enumerate(subs, start=1):
        prefix = "1" * (k - 1) + "2"
        for w, m in sub.marks.items():
            marks[prefix + w] = m
    return MarkedTree(marks, T)


def v_primary(tree: MarkedTree, v: str) -> MarkedTree:
    """Relabel ``tree`` so that the lineage of the leaf ``v`` becomes the primary path.

    Writing ``u = v[:n] + w`` with ``v[:n]`` the longest prefix of ``v`` that is
    a prefix of ``u``, the new label is ``"1" * n`` followed by ``w`` with its
    first letter replaced by ``"2"``. Marks are carried over unchanged.
    """
    if v not in tree.marks or tree.children(v):
        raise ValueError(f"{v!r} is not a leaf")
    out = {}
    for u, m in tree.marks.items():
        n = 0
        while n < len(u) and n < len(v) and u[n] == v[n]:
            n += 1
        w = u[n:]
        out["1" * n + ("2" + w[1:] if w else "")] = m
    return MarkedTree(out, tree.T)


def augmented_dhp(log: EventLog, paths: PathStore, i: int, T: float) -> MarkedTree:
    """Historical path of ``i`` at ``T`` with the descendant trees of the branch events glued on."""
    h = dhp(log, paths, i, T)
    subs = [descendant_tree(log, paths, b.side, b.time, T) for b in branch_events(log, i, T)]
    return glue((0.0, h, None), subs, T)


def skeleton(log: EventLog, paths: PathStore, T: float) -> MarkedTree:
    return augmented_dhp(log, paths, spine_index(log, T), T)


# ---------------------------------------------------------------- comparisons


def _mark_times(a: Mark, b: Mark, T: float) -> np.ndarray:
    pts = [a.path.breakpoints(a.t_b, a.end(T)), b.path.breakpoints(b.t_b, b.end(T)),
           np.array([0.0, T, a.t_b, b.t_b, a.end(T), b.end(T)])]
    return np.unique(np.clip(np.concatenate(pts), 0.0, T))


def _tdiff(x: float | None, y: float | None) -> float:
    if x is None and y is None:
        return 0.0
    if x is None or y is None:
        return 1.0
    return abs(x - y)


def mark_distance(a: Mark, b: Mark, T: float) -> float:
    """``|t_b - t_b'| + sup_t |f(t) - f'(t)| + |t_d - t_d'|`` with ``|t - *| = 1``."""
    ts = _mark_times(a, b, T)
    diff = np.sqrt(((a.sample(ts, T) - b.sample(ts, T)) ** 2).sum(-1)).max()
    return abs(a.t_b - b.t_b) + float(diff) + _tdiff(a.t_d, b.t_d)


def tree_distance(x: MarkedTree, y: MarkedTree) -> float:
    if x.labels != y.labels:
        return 1.0
    return min(1.0, max(mark_distance(x[v], y[v], x.T) for v in x.marks))


def trees_equal(x: MarkedTree, y: MarkedTree, tol: float = 1e-9) -> bool:
    if x.labels != y.labels:
        return False
    return all(mark_distance(x[v], y[v], x.T) <= tol for v in x.marks)


def canonical_form(tree: MarkedTree, v: str = "") -> tuple:
    """Order-free description of the subtree at ``v`` (for comparing trees up to relabelling)."""
    kids = sorted((canonical_form(tree, c) for c in tree.children(v)), key=repr)
    return (tree[v].key(), tuple(kids))


# ---------------------------------------------------------------- critical branching tree


@njit(cache=True)
def _line(x0, t0, T, dt, seed, lo, hi, dcode, dpar, scode, spar, kcode, kpar, kmax, r_times, r_vals, r_max,
          out_pos, err):
    """One line of the branching tree until it is killed, branches or reaches ``T``.

    Returns ``(status, kind, t_end, n_grid)``; ``kind`` is 0 (reached T),
    1 (killed) or 2 (branched).
    """
    d = x0.shape[0]
    X = x0.copy().reshape(1, d)
    out_pos[0, :] = X[0]
    active = np.ones(1, dtype=np.bool_)
    seeds = np.full(1, seed, dtype=np.int64)
    offs = np.zeros(1, dtype=np.int64)
    total = kmax + r_max
    n_steps = int(math.ceil((T - t0) / dt - 1e-9))
    if n_steps < 0:
        n_steps = 0
    c = 0
    t_next = t0 - math.log(_rng.uniform(seed, _rng.TREE, 0, 0)) / total if total > 0 else np.inf
    for m in range(n_steps):
        t_end = min(t0 + (m + 1) * dt, T)
        while t_next <= t_end:
            u = _rng.uniform(seed, _rng.TREE, c, 1) * total
            acc = _rng.uniform(seed, _rng.TREE, c, 2)
            if u < kmax:
                kv = kappa_at(kcode, kpar, X[0])
                st = check_kappa(kv, kmax)
                if st != OK:
                    return st, 1, t_next, m + 1
                if acc * kmax < kv:
                    return OK, 1, t_next, m + 1
            else:
                if r_times.shape[0] == 1:
                    rv = r_vals[0]
                else:
                    rv = np.interp(t_next, r_times, r_vals)
                if rv < 0.0 or rv > r_max * (1.0 + 1e-12):
                    return 5, 2, t_next, m + 1
                if acc * r_max < rv:
                    return OK, 2, t_next, m + 1
            c += 1
            t_next -= math.log(_rng.uniform(seed, _rng.TREE, c, 0)) / total
        st = diffuse_rows(X, active, seeds, offs, m, t_end - (t0 + m * dt), lo, hi, dcode, dpar, scode, spar, err)
        if st != OK:
            return st, 0, t_end, m + 1
        out_pos[m + 1, :] = X[0]
    return OK, 0, T, n_steps + 1


def _rate_table(rate, t: float, T: float):
    if callable(rate):
        ts = np.linspace(t, T, 1025)
        vals = np.array([float(rate(s)) for s in ts])
        return ts, vals
    if isinstance(rate, tuple):
        return np.asarray(rate[0], dtype=float), np.asarray(rate[1], dtype=float)
    return np.array([t]), np.array([float(rate)])


def simulate_critical_tree(t: float, x, rate, field: CoefficientField, T: float, rng, dt: float = 1e-3,
                           max_vertices: int = 1_000_000) -> MarkedTree:
    """Branching reflected diffusion started at ``(t, x)`` and observed up to ``T``.

    Lines follow the killed diffusion of ``field`` and split in two at rate
    ``rate(s)``. ``rate`` is a constant, a callable of time, or a
    ``(times, values)`` table interpolated linearly. Every vertex gets its own
    seed derived from its parent's, so the tree is a deterministic function of
    the seed.
    """
    a = field.arrays
    r_times, r_vals = _rate_table(rate, t, T)
    if np.any(r_vals < 0):
        raise ValueError("branching rate must be non-negative")
    r_max = float(r_vals.max()) if r_vals.size else 0.0
    x = np.array(x, dtype=float, ndmin=1)
    root_seed = _as_stream(rng).next_seed()
    marks = {}
    stack = [("", float(t), x, root_seed)]
    err = np.zeros(2, dtype=np.int64)
    while stack:
        label, tb, x0, seed = stack.pop()
        n_steps = max(0, int(math.ceil((T - tb) / dt - 1e-9)))
        pos = np.empty((n_steps + 1, field.dim))
        st, kind, t_end, n_grid = _line(x0, tb, float(T), float(dt), seed, a.lo, a.hi, a.drift_code, a.drift_params,
                                        a.sigma_code, a.sigma_params, a.kappa_code, a.kappa_params, a.kappa_max,
                                        r_times, r_vals, r_max, pos, err)
        _raise_status(st, int(err[1]), "simulate_critical_tree")
        path = GridPath(tb, float(dt), pos[:n_grid].copy())
        marks[label] = Mark(tb, path, None if kind == 0 else float(t_end))
        if kind == 2:
            x_end = path.value(t_end, left=True)
            for c, key in (("1", 1), ("2", 2)):
                stack.append((label + c, float(t_end), x_end.copy(), int(_rng.hash4(seed, _rng.TREE, key, 7) >> np.uint64(1))))
        if len(marks) > max_vertices:
            raise RuntimeError("branching tree exceeded the vertex limit")
    return MarkedTree(marks, float(T))


def alive_at_horizon(tree: MarkedTree) -> int:
    return sum(1 for m in tree.marks.values() if m.t_d is None)
