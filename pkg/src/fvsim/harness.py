"""Experiment orchestration: configs, reports, replicate farming and SVG plots.

Every experiment is a function of an :class:`ExperimentConfig` and returns a
:class:`Report` holding each checked statistic with its oracle, tolerance
and provenance. Replicates are farmed out with joblib; the worker count is
capped by the ``FV_THREADS`` environment variable.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field as dc_field
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np
from joblib import Parallel, delayed

from . import genealogy, limits, measures, particles, spectral
from ._rng import derive_seed
from ._version import describe
from .domain import CoefficientField

EXPERIMENTS = (
    "eigen-toy",
    "right-efn",
    "qsd",
    "death-rate",
    "theta-variance",
    "fixation-law",
    "spine-marginal",
    "skeleton-rate",
    "neff-compare",
    "metrics-selftest",
)

# Scaled-down defaults; each entry overrides the ExperimentConfig fields.
DEFAULTS: dict[str, dict] = {
    "eigen-toy": {"params": {"n": 1024}},
    "right-efn": {"N": 100_000, "horizon": 5.0, "dt": 1e-3},
    "qsd": {"N": 10_000, "horizon": 10.0, "dt": 1e-3, "params": {"bins": 50, "run_to": 10.0}},
    "death-rate": {"N": 10_000, "horizon": 5.0, "dt": 1e-3, "params": {"run_to": 10.0}},
    "theta-variance": {"N": 2000, "horizon": 0.02, "dt": 1e-3, "replicates": 200},
    "fixation-law": {"N": 200, "dt": 2e-3, "replicates": 500, "params": {"weights": [0.1, 0.2, 0.3, 0.4]}},
    "spine-marginal": {"N": 1000, "horizon": 4.0, "dt": 1e-3, "replicates": 50,
                       "params": {"window": [2.0, 4.0], "bins": 25, "tail_dt": 1e-2}},
    "skeleton-rate": {"N": 1000, "horizon": 4.0, "dt": 1e-3, "replicates": 50,
                      "params": {"window": [2.0, 4.0], "tail_dt": 1e-2}},
    "neff-compare": {"N": 1000, "horizon": 0.05, "replicates": 400},
    "metrics-selftest": {"replicates": 200},
}


def thread_count() -> int:
    cpus = os.cpu_count() or 1
    env = os.environ.get("FV_THREADS")
    if env:
        try:
            return max(1, min(int(env), cpus))
        except ValueError:
            raise ValueError(f"FV_THREADS must be an integer, got {env!r}") from None
    return cpus


def farm(fn: Callable, jobs: list) -> list:
    """Run ``fn(*job)`` for every job, in order, on at most :func:`thread_count` workers."""
    n = thread_count()
    if n == 1 or len(jobs) < 2:
        return [fn(*j) for j in jobs]
    return Parallel(n_jobs=n)(delayed(fn)(*j) for j in jobs)


# ---------------------------------------------------------------- config and report


@dataclass
class ExperimentConfig:
    name: str
    field: dict | None = None
    N: int = 1000
    horizon: float = 1.0
    dt: float = 1e-3
    seed: int = 1
    replicates: int = 1
    out: str | None = None
    params: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.name!r}; choose from {', '.join(EXPERIMENTS)}")
        if self.N < 2:
            raise ValueError("N must be at least 2")
        if self.replicates < 1:
            raise ValueError("replicates must be positive")
        self.coefficient_field()

    @classmethod
    def default(cls, name: str, **overrides) -> "ExperimentConfig":
        if name not in DEFAULTS:
            raise ValueError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
        base = json.loads(json.dumps(DEFAULTS[name]))
        params = base.pop("params", {})
        params.update(overrides.pop("params", {}) or {})
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(name=name, params=params, **base)

    @classmethod
    def from_json(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        name = data.pop("name")
        return cls.default(name, **data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(json.loads(Path(path).read_text()))

    def coefficient_field(self) -> CoefficientField:
        return CoefficientField.toy() if self.field is None else CoefficientField.from_json(self.field)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Statistic:
    name: str
    observed: float
    oracle: float
    tolerance: float
    mode: str  # "abs": |obs - oracle| < tol, "rel": relative, "below": obs < tol
    provenance: str
    note: str = ""

    @property
    def passed(self) -> bool:
        if not np.isfinite(self.observed):
            return False
        if self.mode == "abs":
            return abs(self.observed - self.oracle) < self.tolerance
        if self.mode == "rel":
            return abs(self.observed - self.oracle) < self.tolerance * abs(self.oracle)
        if self.mode == "below":
            return self.observed < self.tolerance
        raise ValueError(f"unknown comparison mode {self.mode!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d

    def line(self) -> str:
        cmp = {"abs": f"|obs-{self.oracle:.6g}| < {self.tolerance:g}",
               "rel": f"|obs/{self.oracle:.6g}-1| < {self.tolerance:g}",
               "below": f"obs < {self.tolerance:g}"}[self.mode]
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: obs={self.observed:.6g} ({cmp})"


@dataclass
class Report:
    config: ExperimentConfig
    statistics: list
    series: list = dc_field(default_factory=list)
    extra: dict = dc_field(default_factory=dict)
    runtime: float = 0.0
    version: str = dc_field(default_factory=describe)

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.statistics)

    def failing(self) -> list:
        return [s for s in self.statistics if not s.passed]

    def to_json(self) -> dict:
        return {
            "experiment": self.config.name,
            "version": self.version,
            "config": self.config.to_json(),
            "passed": self.passed,
            "runtime_s": self.runtime,
            "statistics": [s.to_json() for s in self.statistics],
            "series": self.series,
            "extra": _jsonable(self.extra),
        }

    def save(self, out) -> Path:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_json(), indent=2))
        for s in self.series:
            with open(out / f"{_slug(s['label'])}.csv", "w") as fh:
                fh.write("x,y\n")
                for x, y in zip(s["x"], s["y"]):
                    fh.write(f"{x!r},{y!r}\n")
        emit_plot(self, out / "plot.svg")
        return out

    def summary(self) -> str:
        lines = [f"{self.config.name}: {'PASS' if self.passed else 'FAIL'} ({self.runtime:.1f} s)"]
        lines += ["  " + s.line() for s in self.statistics]
        return "\n".join(lines)


def _slug(s: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in s).strip("_").lower() or "series"


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


def _series(label: str, x, y) -> dict:
    return {"label": label, "x": [float(v) for v in x], "y": [float(v) for v in y]}


# ---------------------------------------------------------------- plots


_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def emit_plot(report: Report | dict, path, width: int = 640, height: int = 400) -> Path:
    """Write the report's series as polylines in a plain SVG file.

    Output depends only on the report data, so equal reports give equal bytes.
    """
    data = report.to_json() if isinstance(report, Report) else report
    series = data.get("series", [])
    title = data.get("experiment", "")
    ml, mr, mt, mb = 60, 20, 30, 40
    pw, ph = width - ml - mr, height - mt - mb
    xs = [v for s in series for v in s["x"]]
    ys = [v for s in series for v in s["y"]]
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y0, y1 = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def sx(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return mt + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for k in range(5):
        xv = x0 + k * (x1 - x0) / 4
        yv = y0 + k * (y1 - y0) / 4
        out.append(f'<text x="{sx(xv):.1f}" y="{mt + ph + 16}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="10">{xv:.3g}</text>')
        out.append(f'<text x="{ml - 6}" y="{sy(yv) + 3:.1f}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="10">{yv:.3g}</text>')
    for n, s in enumerate(series):
        col = _COLOURS[n % len(_COLOURS)]
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(s["x"], s["y"]))
        out.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{ml + 8}" y="{mt + 14 + 14 * n}" fill="{col}" font-family="sans-serif" '
                   f'font-size="11">{s["label"]}</text>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out) + "\n")
    return path


# ---------------------------------------------------------------- shared pieces


@lru_cache(maxsize=8)
def _triple_for(field_json: str, n: int = 1024) -> spectral.EigenTriple:
    return spectral.principal_eigentriple(CoefficientField.from_json(json.loads(field_json)), n)


def _triple(cfg: ExperimentConfig) -> spectral.EigenTriple:
    return _triple_for(json.dumps(cfg.coefficient_field().to_json()), int(cfg.params.get("n", 1024)))


def _hist_l1(samples: np.ndarray, target: np.ndarray, edges: np.ndarray) -> tuple[float, np.ndarray]:
    h, _ = np.histogram(np.clip(samples, edges[0], edges[-1]), bins=edges)
    p = h / h.sum()
    return float(np.abs(p - target).sum()), p


def _balanced_colours(w: np.ndarray, fractions) -> np.ndarray:
    """Colours for weights ``w`` so that colour ``k`` carries close to ``fractions[k]`` of the total.

    Greedy: largest weights first, each to the colour furthest below its target.
    """
    fr = np.asarray(fractions, dtype=float)
    fr = fr / fr.sum()
    target = fr * w.sum()
    have = np.zeros(fr.size)
    col = np.empty(w.size, dtype=np.int64)
    for i in np.argsort(-w, kind="stable"):
        k = int(np.argmax(target - have))
        col[i] = k
        have[k] += w[i]
    return col


# ---------------------------------------------------------------- experiments


def _eigen_toy(cfg: ExperimentConfig) -> Report:
    fld = cfg.coefficient_field()
    # a tiny solve first, so the timing covers the solver and not module/JIT cache loading
    t0 = time.perf_counter()
    spectral.principal_eigentriple(fld, 16)
    warmup = time.perf_counter() - t0
    t0 = time.perf_counter()
    tr = spectral.principal_eigentriple(fld, int(cfg.params.get("n", 1024)))
    solve_time = time.perf_counter() - t0
    ref = spectral.toy_reference(tr.grid)
    ref = ref / tr.pair(ref)
    ds = spectral.derived_scalars(tr, fld)
    kap = fld.kappa_values(tr.grid)
    phi = tr.phi_values
    lhs = tr.pair(ds.gamma0_phi + kap * phi**2)
    rhs = tr.lam * tr.pair(phi**2)
    stats = [
        Statistic("lambda", tr.lam, 2.0, 1e-3, "abs", "closed form"),
        Statistic("phi sup error", float(np.abs(phi - ref).max()), 0.0, 1e-3, "below", "closed form 2+cos(pi x)"),
        Statistic("solve time [s]", solve_time, 0.0, 1.0, "below", "runtime budget"),
        Statistic("<pi,G0(phi)+kappa phi^2> - lambda <pi,phi^2>", lhs - rhs, 0.0, 1e-6, "abs", "quadrature identity"),
        Statistic("<pi,kappa> - lambda", ds.pi_kappa - tr.lam, 0.0, 1e-6, "abs", "quadrature identity"),
    ]
    extra = {"theta": ds.theta, "n_eff_ratio": ds.n_eff_ratio, "method": tr.method, "residual": tr.residual,
             "cold_start_s": warmup}
    return Report(cfg, stats, [_series("phi (solver)", tr.grid[::8], phi[::8]),
                               _series("2+cos(pi x), rescaled", tr.grid[::8], ref[::8])], extra)


def _right_efn(cfg: ExperimentConfig) -> Report:
    fld = cfg.coefficient_field()
    tr = _triple(cfg)
    atoms = np.arange(21) / 20.0
    st = particles.init_system(fld, cfg.N, positions={"atoms": atoms.tolist()}, colours="position", seed=cfg.seed,
                               dt=cfg.dt)
    particles.run(st, cfg.horizon)
    mass = np.bincount(st.colours, minlength=len(st.table)) / cfg.N
    pts = np.asarray(st.table.payloads, dtype=float).ravel()
    order = np.argsort(pts)
    obs = mass[order]
    pred = tr.phi_at(atoms)
    pred = pred / pred.sum()
    err = float(np.abs(obs - pred).max())
    stats = [Statistic("max |chi_t(k/20) - phi(k/20)/sum phi|", err, 0.0, 0.01, "below", "spectral phi")]
    return Report(cfg, stats, [_series("colour masses", atoms, obs), _series("phi/sum phi", atoms, pred)],
                  {"masses": obs, "prediction": pred})


@lru_cache(maxsize=4)
def _single_run(field_json: str, N: int, run_to: float, dt: float, seed: int):
    """One run from uniform positions with snapshots at integer times (shared by death-rate and qsd)."""
    fld = CoefficientField.from_json(json.loads(field_json))
    st = particles.init_system(fld, N, positions="uniform", seed=seed, dt=dt)
    res = particles.run(st, run_to, snapshot_times=[float(k) for k in range(1, int(run_to) + 1)] + [run_to])
    return st, res


def _shared_run(cfg: ExperimentConfig):
    run_to = float(cfg.params.get("run_to", cfg.horizon))
    if run_to < cfg.horizon:
        raise ValueError("run_to must not be before the horizon")
    return _single_run(json.dumps(cfg.coefficient_field().to_json()), cfg.N, run_to, cfg.dt, cfg.seed)


def _death_rate(cfg: ExperimentConfig) -> Report:
    st, _ = _shared_run(cfg)
    h = cfg.horizon
    dj = st.events.J(h) - st.events.J(h - 1.0)
    tr = _triple(cfg)
    stats = [Statistic(f"J_{h:g} - J_{h - 1:g}", dj, tr.lam, 0.05, "abs", "spectral lambda")]
    return Report(cfg, stats, extra={"events": len(st.events)})


def _qsd(cfg: ExperimentConfig) -> Report:
    fld = cfg.coefficient_field()
    tr = _triple(cfg)
    st, res = _shared_run(cfg)
    bins = int(cfg.params.get("bins", 50))
    edges = np.linspace(fld.lo[0], fld.hi[0], bins + 1)
    target = tr.bin_masses(edges)
    x = res.snapshots[float(cfg.horizon)].positions[:, 0]
    l1, p = _hist_l1(x, target, edges)
    # mean L1 of an exact i.i.d. sample of the same size, for reference
    floor = float(np.sum(np.sqrt(2 * target * (1 - target) / (math.pi * cfg.N))))
    mids = 0.5 * (edges[1:] + edges[:-1])
    stats = [Statistic("L1(histogram, pi)", l1, 0.0, 0.02, "below", "spectral pi",
                       note=f"expected L1 of an exact i.i.d. sample of size N: {floor:.4f}")]
    return Report(cfg, stats, [_series("m_t histogram", mids, p), _series("pi bin masses", mids, target)],
                  {"iid_noise_floor": floor})


def _theta_replicate(field_json: str, tr: spectral.EigenTriple, N: int, t: float, dt: float, seed: int):
    fld = CoefficientField.from_json(json.loads(field_json))
    st = particles.init_system(fld, N, positions="pi", seed=seed, dt=dt, triple=tr)
    w = tr.phi_at(st.positions[:, 0])
    col = _balanced_colours(w, [1, 1])
    st.recolour(col, particles.ColourTable("label", [0, 1]))
    y0 = particles.tilt_accessors(st, tr).Y([0])
    particles.run(st, t)
    return y0, particles.tilt_accessors(st, tr).Y([0])


def _theta_variance(cfg: ExperimentConfig) -> Report:
    fj = json.dumps(cfg.coefficient_field().to_json())
    tr = _triple(cfg)
    s = cfg.horizon
    out = np.array(farm(_theta_replicate, [(fj, tr, cfg.N, cfg.N * s, cfg.dt, derive_seed(cfg.seed, r))
                                           for r in range(cfg.replicates)]))
    y0, yt = out[:, 0], out[:, 1]
    th = spectral.theta(tr)
    pred = float(np.mean(y0 * (1 - y0))) * (1 - math.exp(-th * s))
    var = float(np.var(yt, ddof=1))
    stats = [Statistic(f"Var Y_(N s), s={s:g}", var, pred, 0.15, "rel", f"WF moment ODE with theta=Theta={th:.6f}")]
    return Report(cfg, stats, extra={"theta": th, "y0_mean": float(y0.mean()), "y_t": yt})


def _fixation_replicate(field_json: str, tr: spectral.EigenTriple, N: int, weights, dt: float, seed: int):
    fld = CoefficientField.from_json(json.loads(field_json))
    st = particles.init_system(fld, N, positions="uniform", seed=seed, dt=dt)
    w = tr.phi_at(st.positions[:, 0])
    col = _balanced_colours(w, weights)
    k = len(weights)
    st.recolour(col, particles.ColourTable("label", list(range(k))))
    acc = particles.tilt_accessors(st, tr)
    y0 = [acc.Y([c]) for c in range(k)]
    horizon = 200.0
    while True:
        r = particles.run(st, st.time + horizon, stop_on_fixation=True)
        if r.fixed_colour is not None or st.n_colours == 1:
            return y0, int(st.colours[0]), st.time


def _fixation_law(cfg: ExperimentConfig) -> Report:
    fj = json.dumps(cfg.coefficient_field().to_json())
    tr = _triple(cfg)
    weights = list(cfg.params.get("weights", [0.1, 0.2, 0.3, 0.4]))
    res = farm(_fixation_replicate, [(fj, tr, cfg.N, weights, cfg.dt, derive_seed(cfg.seed, r))
                                     for r in range(cfg.replicates)])
    y0 = np.array([r[0] for r in res])
    fixed = np.array([r[1] for r in res])
    freq = np.bincount(fixed, minlength=len(weights)) / len(res)
    mean_y0 = y0.mean(axis=0)
    tv = 0.5 * float(np.abs(freq - mean_y0).sum())
    stats = [Statistic("TV(fixed colour law, mean Y_0)", tv, 0.0, 0.05, "below", "martingale Y / WF fixation law")]
    return Report(cfg, stats, [_series("fixed colour frequency", range(len(weights)), freq),
                               _series("mean Y_0", range(len(weights)), mean_y0)],
                  {"frequencies": freq, "mean_y0": mean_y0, "mean_fixation_time": float(np.mean([r[2] for r in res]))})


def _genealogy_replicate(field_json: str, N: int, T: float, dt: float, tail_dt: float, window, seed: int):
    """Spine positions on the grid of ``window`` and branch-event times along the spine."""
    fld = CoefficientField.from_json(json.loads(field_json))
    st = particles.init_system(fld, N, positions="uniform", seed=seed, dt=dt, store_paths_until=T)
    particles.run(st, T)
    st.recolour_by_index()
    if tail_dt != dt:
        st.change_time_step(tail_dt)
    while st.n_colours > 1:
        particles.run(st, st.time + 500.0, stop_on_fixation=True)
    log, ps = st.events, st.path_store()
    zeta = genealogy.spine_index(log, T)
    sp = genealogy.dhp(log, ps, zeta, T)
    a, b = window
    ts = dt * np.arange(int(round(a / dt)), int(round(b / dt)) + 1)
    pos = sp.values(ts)[:, 0]
    br = np.array([e.time for e in genealogy.branch_events(log, zeta, T) if a <= e.time <= b])
    return pos, br, st.time


@lru_cache(maxsize=4)
def _genealogy_runs(field_json: str, N: int, T: float, dt: float, tail_dt: float, window: tuple, reps: int, seed: int):
    return farm(_genealogy_replicate, [(field_json, N, T, dt, tail_dt, window, derive_seed(seed, r))
                                       for r in range(reps)])


def _genealogy_cfg(cfg: ExperimentConfig):
    win = tuple(float(v) for v in cfg.params.get("window", [2.0, 4.0]))
    return _genealogy_runs(json.dumps(cfg.coefficient_field().to_json()), cfg.N, float(cfg.horizon), cfg.dt,
                           float(cfg.params.get("tail_dt", cfg.dt)), win, cfg.replicates, cfg.seed), win


def _spine_marginal(cfg: ExperimentConfig) -> Report:
    fld = cfg.coefficient_field()
    tr = _triple(cfg)
    runs, win = _genealogy_cfg(cfg)
    bins = int(cfg.params.get("bins", 25))
    edges = np.linspace(fld.lo[0], fld.hi[0], bins + 1)
    dens = limits.QProcessConfig(fld, tr).stationary_density()
    target = tr.bin_masses(edges, dens)
    pos = np.concatenate([r[0] for r in runs])
    l1, p = _hist_l1(pos, target, edges)
    mids = 0.5 * (edges[1:] + edges[:-1])
    stats = [Statistic(f"L1(spine histogram on [{win[0]:g},{win[1]:g}], Q-process law)", l1, 0.0, 0.05, "below",
                       "stationary Fokker-Planck on the spectral grid")]
    return Report(cfg, stats, [_series("spine histogram", mids, p), _series("phi*pi bin masses", mids, target)],
                  {"fixation_times": [r[2] for r in runs]})


def _skeleton_rate(cfg: ExperimentConfig) -> Report:
    tr = _triple(cfg)
    runs, win = _genealogy_cfg(cfg)
    counts = np.array([r[1].size for r in runs])
    rate = counts.sum() / (len(runs) * (win[1] - win[0]))
    stats = [Statistic("branch events per unit time along the spine", float(rate), 2 * tr.lam, 0.10, "rel",
                       "twice the spectral lambda")]
    return Report(cfg, stats, extra={"counts": counts})


def _moran_replicate(N: int, lam: float, t: float, seed: int) -> float:
    col = (np.arange(N) < N // 2).astype(np.int64)
    r = limits.moran_simulate(N, lam, col, t, seed, sample_times=[t], stop_on_fixation=False)
    return float(r.frequencies[0, 0])


def _neff_compare(cfg: ExperimentConfig) -> Report:
    tr = _triple(cfg)
    lam = tr.lam
    s = cfg.horizon
    p = np.array(farm(_moran_replicate, [(cfg.N, lam, cfg.N * s, derive_seed(cfg.seed, r))
                                         for r in range(cfg.replicates)]))
    var = float(np.var(p, ddof=1))
    theta_hat = -math.log(1 - var / 0.25) / s
    ratio_moran = lam / theta_hat
    ratio_fv = lam / spectral.theta(tr)
    stats = [Statistic("Moran N_eff/N", ratio_moran, 0.5, 0.10, "rel", "theta = 2 lambda for Moran"),
             Statistic("FV N_eff/N below Moran", ratio_fv, 0.0, 0.5, "below", "spectral Theta")]
    return Report(cfg, stats, extra={"theta_moran": theta_hat, "theta_fv": spectral.theta(tr)})


def _metrics_selftest(cfg: ExperimentConfig) -> Report:
    from scipy.optimize import linprog

    gen = np.random.default_rng(derive_seed(cfg.seed, 0x3E7))
    worst_lp = 0.0
    worst_tri = -np.inf
    for _ in range(cfg.replicates):
        n, m = gen.integers(1, 9, size=2)
        a = measures.DiscreteMeasure.euclidean(gen.random(n) * 2, gen.dirichlet(np.ones(n)))
        b = measures.DiscreteMeasure.euclidean(gen.random(m) * 2, gen.dirichlet(np.ones(m)))
        c = measures.DiscreteMeasure.euclidean(gen.random(3) * 2, gen.dirichlet(np.ones(3)))
        C = np.minimum(np.abs(a.points[:, None, 0] - b.points[None, :, 0]), 1.0)
        A_eq = np.vstack([np.kron(np.eye(n), np.ones(m)), np.kron(np.ones(n), np.eye(m))])
        lp = linprog(C.ravel(), A_eq=A_eq, b_eq=np.concatenate([a.masses, b.masses]), bounds=(0, None),
                     method="highs")
        worst_lp = max(worst_lp, abs(measures.wasserstein1(a, b, method="flow") - lp.fun))
        worst_tri = max(worst_tri, measures.weak_atomic(a, b) - measures.weak_atomic(a, c) - measures.weak_atomic(c, b))
    e = 0.01
    P = measures.discretised_mixture(1000, 0.5, [(0.5, 0.5)])
    Q = measures.discretised_mixture(1000, 0.5 - e, [(0.5 + e, 0.5 + e)])
    R = measures.discretised_mixture(1000, 1 / 3, [(0.5, 2 / 3)])
    S = measures.discretised_mixture(1000, 0.5, [(0.5, 0.25), (0.5 + e, 0.25)])
    wq, wr, ws = (measures.weak_atomic(P, X) for X in (Q, R, S))
    stats = [
        Statistic("max |W1 - LP|", worst_lp, 0.0, 1e-9, "below", "HiGHS linear program"),
        Statistic("max triangle excess of W_a", worst_tri, 0.0, 1e-12, "below", "metric axiom"),
        Statistic("W_a(P,Q) - min(W_a(P,R), W_a(P,S))", wq - min(wr, ws), 0.0, 0.0, "below", "qualitative ordering"),
    ]
    return Report(cfg, stats, extra={"wa_PQ": wq, "wa_PR": wr, "wa_PS": ws})


_RUNNERS: dict[str, Callable[[ExperimentConfig], Report]] = {
    "eigen-toy": _eigen_toy,
    "right-efn": _right_efn,
    "qsd": _qsd,
    "death-rate": _death_rate,
    "theta-variance": _theta_variance,
    "fixation-law": _fixation_law,
    "spine-marginal": _spine_marginal,
    "skeleton-rate": _skeleton_rate,
    "neff-compare": _neff_compare,
    "metrics-selftest": _metrics_selftest,
}


def run_experiment(cfg: ExperimentConfig) -> Report:
    """Run one experiment; writes report, CSV series and SVG under ``cfg.out`` when set."""
    t0 = time.perf_counter()
    rep = _RUNNERS[cfg.name](cfg)
    rep.runtime = time.perf_counter() - t0
    if cfg.out:
        rep.save(cfg.out)
    return rep
