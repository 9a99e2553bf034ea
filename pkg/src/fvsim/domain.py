"""Normally reflected diffusions on a box, killed at a position dependent rate.

A :class:`CoefficientField` names its drift, diffusion and killing functions
from a small set of analytic forms. The forms are compiled to integer codes
and parameter vectors so the same definitions run inside numba kernels and
from numpy.

Discretisation used everywhere in the package:

* positions live on a uniform time grid of step ``dt``; between grid times a
  particle is frozen at its last grid position;
* a grid step is Euler-Maruyama, ``x + b(x) dt + sigma(x) sqrt(dt) xi``,
  folded back into the box coordinatewise;
* killing is exact thinning of a rate ``kappa_max`` Poisson stream, a
  candidate at time ``s`` being accepted with probability
  ``kappa(X_s) / kappa_max``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
from numba import njit

from . import _rng

__all__ = [
    "NumericDomainError",
    "InvariantViolation",
    "FormSpec",
    "CoefficientField",
    "KilledPath",
    "Stream",
    "fold",
    "reflect_step",
    "simulate_killed_path",
    "feynman_kac_survival",
    "killed_population",
]


class NumericDomainError(ArithmeticError):
    """A coefficient evaluated to a non-finite number."""


class InvariantViolation(RuntimeError):
    """A declared bound or structural invariant was observed to fail."""


DRIFT_CODES = {"zero": 0, "constant": 1, "linear": 2, "tabulated": 3}
SIGMA_CODES = {"constant": 0, "diagonal": 1}
KAPPA_CODES = {"zero": 0, "constant": 1, "linear": 2, "toy_cosine": 3, "tabulated": 4, "cosine": 5}

# kernel status codes
OK = 0
BAD_DRIFT = 1
BAD_SIGMA = 2
BAD_KAPPA = 3
KAPPA_ABOVE_MAX = 4
KAPPA_NEGATIVE = 5


class FieldArrays(NamedTuple):
    lo: np.ndarray
    hi: np.ndarray
    drift_code: int
    drift_params: np.ndarray
    sigma_code: int
    sigma_params: np.ndarray
    kappa_code: int
    kappa_params: np.ndarray
    kappa_max: float


# ---------------------------------------------------------------- kernels


@njit(cache=True, inline="always")
def _interp_table(params, x):
    glo = params[0]
    ghi = params[1]
    n = params.shape[0] - 2
    s = (x - glo) / (ghi - glo) * (n - 1)
    if s <= 0.0:
        return params[2]
    if s >= n - 1:
        return params[n + 1]
    k = int(s)
    w = s - k
    return (1.0 - w) * params[2 + k] + w * params[3 + k]


@njit(cache=True, inline="always")
def drift_at(code, params, x, k):
    """Coordinate ``k`` of the drift at ``x``."""
    if code == 0:
        return 0.0
    if code == 1:
        return params[k]
    if code == 2:
        return -params[0] * (x[k] - params[1 + k])
    if code == 3:
        return _interp_table(params, x[0])
    return np.nan


@njit(cache=True, inline="always")
def sigma_at(code, params, x, k):
    """Diagonal entry ``k`` of the (diagonal) diffusion matrix."""
    if code == 0:
        return params[0]
    if code == 1:
        return params[k]
    return np.nan


@njit(cache=True, inline="always")
def kappa_at(code, params, x):
    if code == 0:
        return 0.0
    if code == 1:
        return params[0]
    if code == 2:
        s = params[0]
        for k in range(x.shape[0]):
            s += params[1 + k] * x[k]
        return s
    if code == 3:
        c = np.cos(np.pi * x[0])
        return 2.0 - np.pi * np.pi * c / (4.0 + 2.0 * c)
    if code == 4:
        return _interp_table(params, x[0])
    if code == 5:
        return params[0] + params[1] * np.cos(np.pi * params[2] * x[0])
    return np.nan


@njit(cache=True, inline="always")
def fold_coord(y, lo, hi):
    while y < lo or y > hi:
        if y < lo:
            y = 2.0 * lo - y
        if y > hi:
            y = 2.0 * hi - y
    return y


@njit(cache=True)
def diffuse_rows(X, active, seeds, offsets, m, h, lo, hi, dcode, dpar, scode, spar, err):
    """Folded Euler step, in place, of every row ``i`` of ``X`` with ``active[i]``.

    Row ``i`` uses the normals keyed ``(seeds[i], DIFFUSION, m, offsets[i] + coord)``.
    Returns ``OK`` or an error status; on error ``err = [row, coord]``.

    The arithmetic is written out here rather than in a helper so that numba
    compiles a single loop without per-row calls.
    """
    N, d = X.shape
    sq = np.sqrt(h)
    z = np.empty(d)
    for i in range(N):
        if not active[i]:
            continue
        for k in range(d):
            xi = _rng.normal(seeds[i], _rng.DIFFUSION, m, offsets[i] + k)
            b = drift_at(dcode, dpar, X[i], k)
            s = sigma_at(scode, spar, X[i], k)
            z[k] = X[i, k] + b * h + s * sq * xi
            if not math.isfinite(z[k]):
                err[0] = i
                err[1] = k
                return BAD_SIGMA if math.isfinite(b) and not math.isfinite(s) else BAD_DRIFT
        for k in range(d):
            X[i, k] = fold_coord(z[k], lo[k], hi[k])
    return OK


@njit(cache=True)
def check_kappa(kv, kmax):
    if not math.isfinite(kv):
        return BAD_KAPPA
    if kv < 0.0:
        return KAPPA_NEGATIVE
    if kv > kmax * (1.0 + 1e-12):
        return KAPPA_ABOVE_MAX
    return OK


@njit(cache=True)
def _killed_population(X0, t0, n_steps, dt, horizon, seeds, lo, hi, dcode, dpar, scode, spar,
                       kcode, kpar, kmax, store, out_pos, t_death, err):
    """Independent killed paths, one per row of ``X0``, each with its own seed.

    ``t_death[r]`` is set to the death time or ``nan`` (survived). When
    ``store`` is set, grid positions of row 0 go to ``out_pos``. Returns
    ``(status, n_grid)`` where ``n_grid`` counts the stored grid points of row 0.
    """
    R, d = X0.shape
    X = X0.copy()
    active = np.ones(R, dtype=np.bool_)
    offsets = np.zeros(R, dtype=np.int64)
    cand = np.zeros(R, dtype=np.int64)
    t_next = np.empty(R)
    for r in range(R):
        t_death[r] = np.nan
        t_next[r] = t0 - np.log(_rng.uniform(seeds[r], _rng.CANDIDATE, 0, 0)) / kmax if kmax > 0.0 else np.inf
    if store:
        out_pos[0, :] = X[0]
    n_grid = 1
    n_alive = R
    for m in range(n_steps):
        t_end = min(t0 + (m + 1) * dt, horizon)
        for r in range(R):
            if not active[r]:
                continue
            while t_next[r] <= t_end:
                kv = kappa_at(kcode, kpar, X[r])
                st = check_kappa(kv, kmax)
                if st != OK:
                    err[0] = r
                    return st, n_grid
                c = cand[r]
                if _rng.uniform(seeds[r], _rng.CANDIDATE, c, 1) * kmax < kv:
                    t_death[r] = t_next[r]
                    active[r] = False
                    n_alive -= 1
                    break
                cand[r] = c + 1
                t_next[r] -= np.log(_rng.uniform(seeds[r], _rng.CANDIDATE, c + 1, 0)) / kmax
        if n_alive == 0:
            break
        st = diffuse_rows(X, active, seeds, offsets, m, t_end - (t0 + m * dt), lo, hi, dcode, dpar,
                          scode, spar, err)
        if st != OK:
            return st, n_grid
        if store and active[0]:
            out_pos[m + 1, :] = X[0]
            n_grid = m + 2
    return OK, n_grid


# ---------------------------------------------------------------- python API


@dataclass(frozen=True)
class FormSpec:
    name: str
    params: dict = dc_field(default_factory=dict)

    def to_json(self) -> dict:
        return {"name": self.name, "params": _jsonable(self.params)}


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _table(params: dict) -> np.ndarray:
    vals = np.asarray(params["values"], dtype=float)
    if vals.ndim != 1 or vals.size < 2:
        raise ValueError("tabulated form needs at least two values")
    return np.concatenate([[float(params["grid_lo"]), float(params["grid_hi"])], vals])


def _vector(v, d: int, what: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(v, dtype=float))
    if arr.size == 1 and d > 1:
        arr = np.full(d, arr[0])
    if arr.size != d:
        raise ValueError(f"{what}: expected {d} values, got {arr.size}")
    return arr


@dataclass(frozen=True)
class CoefficientField:
    """Drift, diffusion and killing on the box ``[lo, hi]``.

    ``kappa_max`` is the declared upper bound on the killing rate; it sets the
    candidate rate for thinning.
    """

    lo: tuple
    hi: tuple
    drift: FormSpec = FormSpec("zero")
    sigma: FormSpec = FormSpec("constant", {"value": 1.0})
    kappa: FormSpec = FormSpec("zero")
    kappa_max: float = 0.0

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "kappa_max", float(self.kappa_max))
        if len(lo) != len(hi) or not lo:
            raise ValueError("box bounds must have equal positive length")
        if not all(math.isfinite(a) and math.isfinite(b) and a < b for a, b in zip(lo, hi)):
            raise ValueError(f"box bounds must be finite with lo < hi, got {lo}, {hi}")
        if self.drift.name not in DRIFT_CODES:
            raise ValueError(f"unknown drift form {self.drift.name!r}")
        if self.sigma.name not in SIGMA_CODES:
            raise ValueError(f"unknown sigma form {self.sigma.name!r}")
        if self.kappa.name not in KAPPA_CODES:
            raise ValueError(f"unknown kappa form {self.kappa.name!r}")
        if "tabulated" in (self.drift.name, self.kappa.name) and len(lo) != 1:
            raise ValueError("tabulated forms are one dimensional")
        if self.kappa_max < 0:
            raise ValueError("kappa_max must be non-negative")
        object.__setattr__(self, "_arrays", self._compile())

    @property
    def dim(self) -> int:
        return len(self.lo)

    # -- construction helpers

    @classmethod
    def toy(cls) -> "CoefficientField":
        """Reflected Brownian motion on [0, 1] with the cosine killing example.

        ``kappa(x) = 2 - pi^2 cos(pi x) / (4 + 2 cos(pi x))`` has principal
        right eigenfunction ``2 + cos(pi x)`` and eigenvalue ``-2``.
        """
        return cls((0.0,), (1.0,), kappa=FormSpec("toy_cosine"), kappa_max=2.0 + math.pi**2 / 2.0)

    @classmethod
    def constant_killing(cls, c: float, lo=(0.0,), hi=(1.0,), sigma: float = 1.0) -> "CoefficientField":
        return cls(lo, hi, sigma=FormSpec("constant", {"value": sigma}),
                   kappa=FormSpec("constant", {"value": c}), kappa_max=c)

    def with_drift(self, drift: FormSpec) -> "CoefficientField":
        return CoefficientField(self.lo, self.hi, drift, self.sigma, self.kappa, self.kappa_max)

    def without_killing(self) -> "CoefficientField":
        return CoefficientField(self.lo, self.hi, self.drift, self.sigma, FormSpec("zero"), 0.0)

    # -- compilation

    def _compile(self) -> FieldArrays:
        d = self.dim
        p = self.drift.params
        name = self.drift.name
        if name == "zero":
            dpar = np.zeros(1)
        elif name == "constant":
            dpar = _vector(p["value"], d, "drift.value")
        elif name == "linear":
            dpar = np.concatenate([[float(p["rate"])], _vector(p.get("center", 0.0), d, "drift.center")])
        else:
            dpar = _table(p)
        p = self.sigma.params
        if self.sigma.name == "constant":
            spar = np.array([float(p.get("value", 1.0))])
        else:
            spar = _vector(p["values"], d, "sigma.values")
        p = self.kappa.params
        name = self.kappa.name
        if name in ("zero", "toy_cosine"):
            kpar = np.zeros(1)
        elif name == "constant":
            kpar = np.array([float(p["value"])])
        elif name == "linear":
            kpar = np.concatenate([[float(p.get("intercept", 0.0))], _vector(p["slope"], d, "kappa.slope")])
        elif name == "tabulated":
            kpar = _table(p)
        else:
            kpar = np.array([float(p.get("base", 0.0)), float(p["amplitude"]), float(p.get("frequency", 1.0))])
        return FieldArrays(np.array(self.lo), np.array(self.hi), DRIFT_CODES[self.drift.name], dpar,
                           SIGMA_CODES[self.sigma.name], spar, KAPPA_CODES[self.kappa.name], kpar,
                           self.kappa_max)

    @property
    def arrays(self) -> FieldArrays:
        return self._arrays  # type: ignore[attr-defined]

    # -- vectorised evaluation

    def _points(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.dim == 1 and x.ndim <= 1:
            return x.reshape(-1, 1)
        return np.atleast_2d(x)

    def kappa_values(self, x) -> np.ndarray:
        pts = self._points(x)
        a = self.arrays
        return _eval_kappa_many(a.kappa_code, a.kappa_params, pts)

    def drift_values(self, x) -> np.ndarray:
        pts = self._points(x)
        a = self.arrays
        return _eval_drift_many(a.drift_code, a.drift_params, pts)

    def sigma_values(self, x) -> np.ndarray:
        """Diagonal of sigma at each point, shape ``(n, d)``."""
        pts = self._points(x)
        a = self.arrays
        return _eval_sigma_many(a.sigma_code, a.sigma_params, pts)

    def check(self, n_per_dim: int = 257) -> None:
        """Check kappa bounds and non-degeneracy of sigma on a grid of the box."""
        axes = [np.linspace(a, b, n_per_dim if self.dim == 1 else 17) for a, b in zip(self.lo, self.hi)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.dim)
        kv = self.kappa_values(pts)
        if not np.all(np.isfinite(kv)):
            raise NumericDomainError("kappa is not finite on the box")
        if kv.min() < 0:
            raise InvariantViolation(f"kappa takes negative value {kv.min():.6g}")
        if kv.max() > self.kappa_max * (1 + 1e-12):
            raise InvariantViolation(f"kappa reaches {kv.max():.6g} > kappa_max = {self.kappa_max:.6g}")
        sv = self.sigma_values(pts)
        if not np.all(np.isfinite(sv)) or np.any(np.abs(sv) <= 0):
            raise InvariantViolation("sigma sigma^T is not positive definite on the box")

    # -- JSON

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "box": {"lo": list(self.lo), "hi": list(self.hi)},
            "drift": self.drift.to_json(),
            "sigma": self.sigma.to_json(),
            "kappa": {**self.kappa.to_json(), "kappa_max": self.kappa_max},
        }

    @classmethod
    def from_json(cls, data: dict) -> "CoefficientField":
        box = data["box"]
        lo, hi = box["lo"], box["hi"]
        if "dim" in data and len(np.atleast_1d(lo)) != int(data["dim"]):
            raise ValueError("dim does not match box")
        drift = data.get("drift", {"name": "zero"})
        sigma = data.get("sigma", {"name": "constant", "params": {"value": 1.0}})
        kappa = data.get("kappa", {"name": "zero"})
        return cls(lo, hi,
                   FormSpec(drift["name"], dict(drift.get("params", {}))),
                   FormSpec(sigma["name"], dict(sigma.get("params", {}))),
                   FormSpec(kappa["name"], dict(kappa.get("params", {}))),
                   float(kappa.get("kappa_max", 0.0)))

    @classmethod
    def load(cls, path) -> "CoefficientField":
        return cls.from_json(json.loads(Path(path).read_text()))


@njit(cache=True)
def _eval_kappa_many(code, params, pts):
    out = np.empty(pts.shape[0])
    for i in range(pts.shape[0]):
        out[i] = kappa_at(code, params, pts[i])
    return out


@njit(cache=True)
def _eval_drift_many(code, params, pts):
    out = np.empty(pts.shape)
    for i in range(pts.shape[0]):
        for k in range(pts.shape[1]):
            out[i, k] = drift_at(code, params, pts[i], k)
    return out


@njit(cache=True)
def _eval_sigma_many(code, params, pts):
    out = np.empty(pts.shape)
    for i in range(pts.shape[0]):
        for k in range(pts.shape[1]):
            out[i, k] = sigma_at(code, params, pts[i], k)
    return out


class Stream:
    """A seeded counter-based stream; each draw of a sub-seed advances it."""

    def __init__(self, seed: int, key: int = 0):
        self.seed = int(seed)
        self.key = int(key)
        self.counter = 0

    def next_seed(self) -> int:
        s = _rng.derive_seed(self.seed, self.key, self.counter)
        self.counter += 1
        return s

    def normals(self, n: int) -> np.ndarray:
        out = np.empty(n)
        _rng.fill_normals(self.next_seed(), _rng.DIFFUSION, 0, out)
        return out


def _as_stream(rng) -> Stream:
    if isinstance(rng, Stream):
        return rng
    return Stream(int(rng))


@dataclass
class KilledPath:
    """A path sampled on ``t_b + k dt``; ``t_d is None`` means it survived to ``horizon``."""

    t_b: float
    dt: float
    positions: np.ndarray
    t_d: float | None
    horizon: float

    @property
    def times(self) -> np.ndarray:
        t = self.t_b + self.dt * np.arange(self.positions.shape[0])
        return np.minimum(t, self.horizon)

    @property
    def t_end(self) -> float:
        return self.horizon if self.t_d is None else self.t_d

    def at(self, t: float) -> np.ndarray:
        """Position at time ``t`` (left limit at ``t_d``)."""
        if t < self.t_b - 1e-12 or t > self.t_end + 1e-12:
            raise ValueError(f"time {t} outside [{self.t_b}, {self.t_end}]")
        k = int(math.floor((t - self.t_b) / self.dt + 1e-9))
        return self.positions[min(k, self.positions.shape[0] - 1)]

    def end(self) -> np.ndarray:
        return self.positions[-1]


def _raise_status(status: int, coord: int, where: str) -> None:
    if status == OK:
        return
    if status in (BAD_DRIFT, BAD_SIGMA):
        what = "drift" if status == BAD_DRIFT else "sigma"
        raise NumericDomainError(f"{where}: non-finite {what} in coordinate {coord}")
    if status == BAD_KAPPA:
        raise NumericDomainError(f"{where}: non-finite kappa")
    if status == KAPPA_ABOVE_MAX:
        raise InvariantViolation(f"{where}: kappa exceeded the declared kappa_max")
    if status == KAPPA_NEGATIVE:
        raise InvariantViolation(f"{where}: negative kappa")
    raise RuntimeError(f"{where}: kernel status {status}")


def fold(y, lo, hi) -> np.ndarray:
    """Fold a point back into the box by repeated coordinatewise reflection."""
    y = np.array(y, dtype=float, ndmin=1)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), y.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=float), y.shape)
    if not np.all(np.isfinite(y)):
        raise NumericDomainError(f"cannot fold non-finite point {y}")
    out = np.empty_like(y)
    for k in range(y.size):
        out[k] = fold_coord(y[k], lo[k], hi[k])
    return out


def reflect_step(x, dt: float, field: CoefficientField, rng=None, noise=None) -> np.ndarray:
    """One folded Euler step; ``noise`` overrides the Gaussian draw from ``rng``."""
    x = np.array(x, dtype=float, ndmin=1)
    if dt <= 0:
        raise ValueError("dt must be positive")
    if x.size != field.dim:
        raise ValueError("point dimension does not match the field")
    a = field.arrays
    if np.any(x < a.lo) or np.any(x > a.hi):
        raise ValueError(f"point {x} is outside the box")
    if noise is None:
        noise = _as_stream(0 if rng is None else rng).normals(field.dim)
    z = np.array(noise, dtype=float, ndmin=1)
    if z.size != field.dim:
        raise ValueError("noise dimension does not match the field")
    out = np.empty_like(x)
    for k in range(field.dim):
        b = float(field.drift_values(x)[0, k])
        s = float(field.sigma_values(x)[0, k])
        y = x[k] + b * dt + s * math.sqrt(dt) * z[k]
        if not math.isfinite(y):
            _raise_status(BAD_SIGMA if math.isfinite(b) and not math.isfinite(s) else BAD_DRIFT, k, "reflect_step")
        out[k] = fold_coord(y, a.lo[k], a.hi[k])
    return out


def _n_steps(t0: float, horizon: float, dt: float) -> int:
    return max(1, int(math.ceil((horizon - t0) / dt - 1e-9)))


def simulate_killed_path(x0, t0: float, horizon: float, dt: float, field: CoefficientField, rng) -> KilledPath:
    x0 = np.array(x0, dtype=float, ndmin=1)
    if not 0 < dt <= horizon - t0 + 1e-12:
        raise ValueError("need 0 < dt <= horizon - t0")
    a = field.arrays
    if np.any(x0 < a.lo) or np.any(x0 > a.hi):
        raise ValueError("start point outside the box")
    n = _n_steps(t0, horizon, dt)
    pos = np.empty((n + 1, field.dim))
    seeds = np.array([_as_stream(rng).next_seed()], dtype=np.int64)
    td = np.empty(1)
    err = np.full(2, -1, dtype=np.int64)
    st, n_grid = _killed_population(x0.reshape(1, -1), float(t0), n, float(dt), float(horizon), seeds, a.lo, a.hi,
                                    a.drift_code, a.drift_params, a.sigma_code, a.sigma_params,
                                    a.kappa_code, a.kappa_params, a.kappa_max, True, pos, td, err)
    _raise_status(st, int(err[1]), "simulate_killed_path")
    t_d = None if np.isnan(td[0]) else float(td[0])
    return KilledPath(float(t0), float(dt), pos[:n_grid].copy(), t_d, float(horizon))


def killed_population(x0, t0: float, horizon: float, dt: float, field: CoefficientField, replicates: int, rng) -> np.ndarray:
    """Death times (``nan`` for survivors) of independent killed paths started at ``x0``."""
    x0 = np.array(x0, dtype=float, ndmin=1)
    a = field.arrays
    if np.any(x0 < a.lo) or np.any(x0 > a.hi):
        raise ValueError("start point outside the box")
    n = _n_steps(t0, horizon, dt)
    seeds = _rng.seed_table(_as_stream(rng).next_seed(), int(replicates))
    td = np.empty(replicates)
    err = np.full(2, -1, dtype=np.int64)
    X0 = np.repeat(x0.reshape(1, -1), replicates, axis=0)
    st, _ = _killed_population(X0, float(t0), n, float(dt), float(horizon), seeds, a.lo, a.hi,
                               a.drift_code, a.drift_params, a.sigma_code, a.sigma_params,
                               a.kappa_code, a.kappa_params, a.kappa_max, False, np.empty((1, field.dim)), td, err)
    _raise_status(st, int(err[1]), "killed_population")
    return td


def feynman_kac_survival(x, t: float, replicates: int, dt: float, field: CoefficientField, rng) -> float:
    """Monte Carlo estimate of the probability of surviving to time ``t`` from ``x``."""
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    x = np.array(x, dtype=float, ndmin=1)
    a = field.arrays
    if a.kappa_max == 0.0:
        return 1.0
    td = killed_population(x, 0.0, t, dt, field, replicates, rng)
    return float(np.isnan(td).mean())
