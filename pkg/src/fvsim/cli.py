"""Command line entry point ``fv``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import genealogy, harness, limits, measures, particles, spectral
from ._version import describe
from .domain import CoefficientField


def _field(args) -> CoefficientField:
    """``--config`` may be a field JSON file or an experiment config holding a ``field`` entry."""
    if not args.config:
        return CoefficientField.toy()
    data = json.loads(Path(args.config).read_text())
    if "box" in data:
        return CoefficientField.from_json(data)
    if data.get("field"):
        return CoefficientField.from_json(data["field"])
    return CoefficientField.toy()


def _write(args, text: str, default_name: str) -> None:
    if args.out:
        out = Path(args.out)
        if out.suffix == "":
            out.mkdir(parents=True, exist_ok=True)
            out = out / default_name
        out.write_text(text)
        print(f"wrote {out}")
    else:
        sys.stdout.write(text)


def cmd_eigen(args) -> int:
    fld = _field(args)
    tr = spectral.principal_eigentriple(fld, args.n, args.method)
    ds = spectral.derived_scalars(tr, fld)
    print(f"lambda = {tr.lam:.10f}  Theta = {ds.theta:.6f}  N_eff/N = {ds.n_eff_ratio:.6f}  "
          f"<pi,kappa> = {ds.pi_kappa:.10f}  ({tr.method}, residual {tr.residual:.2e})")
    if args.out:
        _write(args, json.dumps(tr.to_json()), "eigentriple.json")
    return 0


def _parse_list(s: str | None) -> list[float]:
    return [float(v) for v in s.split(",")] if s else []


def cmd_run(args) -> int:
    fld = _field(args)
    tr = spectral.principal_eigentriple(fld) if args.positions == "pi" else None
    st = particles.init_system(fld, args.N, positions=args.positions, colours=args.colours, seed=args.seed,
                               dt=args.dt, triple=tr, store_paths_until=args.horizon if args.store_paths else None)
    res = particles.run(st, args.horizon, snapshot_times=_parse_list(args.snapshots),
                        stop_on_fixation=args.stop_on_fixation)
    out = args.out or "run"
    particles.save_run(res, out, st.path_store() if args.store_paths else None)
    print(json.dumps(res.summary()))
    print(f"wrote {out}")
    return 0


def cmd_spine(args) -> int:
    summary, log, store = particles.load_run(args.run)
    if store is None:
        print("error: the run has no stored paths (use `fv run --store-paths`)", file=sys.stderr)
        return 2
    T = args.T
    try:
        zeta = genealogy.spine_index(log, T)
    except genealogy.Unfixed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    sp = genealogy.dhp(log, store, zeta, T)
    ts = store.dt * np.arange(int(round(T / store.dt)) + 1)
    xs = sp.values(ts)
    idx = [sp.index_at(t) for t in ts]
    lines = ["time,index," + ",".join(f"x{k}" for k in range(xs.shape[1]))]
    lines += [f"{float(t)!r},{i}," + ",".join(repr(float(v)) for v in x) for t, i, x in zip(ts, idx, xs)]
    _write(args, "\n".join(lines) + "\n", "spine.csv")
    if args.tree:
        tree = genealogy.skeleton(log, store, T)
        Path(args.tree).write_text(json.dumps(tree.to_json()))
    return 0


def cmd_wf(args) -> int:
    p0 = np.array(_parse_list(args.p0)) if args.p0 else np.full(args.n_types, 1.0 / args.n_types)
    if p0.size != args.n_types:
        print("error: --p0 must have --n-types entries", file=sys.stderr)
        return 2
    t, w = limits.wf_fixation_batch(p0 / p0.sum(), args.theta, args.dt, args.replicates, args.seed, args.max_time)
    lines = ["replicate,fixation_time,fixed_type"] + [f"{r},{float(t[r])!r},{int(w[r])}" for r in range(t.size)]
    _write(args, "\n".join(lines) + "\n", "wf.csv")
    ok = w >= 0
    freq = np.bincount(w[ok], minlength=args.n_types) / max(1, ok.sum())
    print(f"mean fixation time {np.nanmean(t):.6f}; fixed-type frequencies {np.round(freq, 4).tolist()}",
          file=sys.stderr)
    return 0


def _read_atoms(path) -> measures.DiscreteMeasure:
    data = np.loadtxt(path, delimiter=",", ndmin=2, skiprows=1)
    pts, mass = data[:, :-1], data[:, -1]
    return measures.DiscreteMeasure.euclidean(pts, mass / mass.sum())


def cmd_metrics(args) -> int:
    a, b = _read_atoms(args.a), _read_atoms(args.b)
    val = measures.weak_atomic(a, b) if args.metric == "wa" else measures.wasserstein1(a, b)
    _write(args, f"{val!r}\n", "metric.txt")
    return 0


def cmd_experiment(args) -> int:
    if args.config:
        cfg = harness.ExperimentConfig.load(args.config)
        if args.name and args.name != cfg.name:
            print("error: experiment name disagrees with --config", file=sys.stderr)
            return 2
    elif args.name:
        cfg = harness.ExperimentConfig.default(args.name)
    else:
        print("error: give an experiment name or --config", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg.seed = args.seed
    if args.replicates is not None:
        cfg.replicates = args.replicates
    if args.N is not None:
        cfg.N = args.N
    if args.out:
        cfg.out = args.out
    rep = harness.run_experiment(cfg)
    print(rep.summary())
    if not rep.passed:
        names = ", ".join(s.name for s in rep.failing())
        print(f"tolerance not met: {names}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--out", default=None, help="output file or directory")
    common.add_argument("--config", default=None, help="JSON config (coefficient field or experiment)")

    p = argparse.ArgumentParser(prog="fv", description="Fleming-Viot particle systems with soft killing.")
    p.add_argument("--version", action="version", version=describe())
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("eigen", parents=[common], help="principal eigentriple of the generator")
    e.add_argument("--n", type=int, default=1024, help="grid cells")
    e.add_argument("--method", default="auto", choices=["auto", "tridiagonal", "dense", "shift-invert"])
    e.set_defaults(fn=cmd_eigen)

    r = sub.add_parser("run", parents=[common], help="simulate the particle system")
    r.add_argument("--N", type=int, default=1000)
    r.add_argument("--horizon", type=float, default=1.0)
    r.add_argument("--dt", type=float, default=1e-3)
    r.add_argument("--positions", default="uniform", choices=["uniform", "pi"])
    r.add_argument("--colours", default="single", choices=["single", "position", "index"])
    r.add_argument("--snapshots", default=None, help="comma separated snapshot times")
    r.add_argument("--store-paths", action="store_true", help="keep every path (needed by `fv spine`)")
    r.add_argument("--stop-on-fixation", action="store_true")
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("spine", parents=[common], help="spine of a stored run")
    s.add_argument("--run", required=True, help="directory written by `fv run --store-paths`")
    s.add_argument("--T", type=float, required=True)
    s.add_argument("--tree", default=None, help="also write the skeleton tree as JSON here")
    s.set_defaults(fn=cmd_spine)

    w = sub.add_parser("wf", parents=[common], help="Wright-Fisher fixation records")
    w.add_argument("--n-types", type=int, default=2)
    w.add_argument("--theta", type=float, default=1.0)
    w.add_argument("--p0", default=None, help="comma separated initial frequencies")
    w.add_argument("--replicates", type=int, default=1000)
    w.add_argument("--dt", type=float, default=1e-4)
    w.add_argument("--max-time", type=float, default=1e3)
    w.set_defaults(fn=cmd_wf)

    m = sub.add_parser("metrics", parents=[common], help="distance between two atom CSV files")
    m.add_argument("--a", required=True)
    m.add_argument("--b", required=True)
    m.add_argument("--metric", default="wa", choices=["wa", "w1"])
    m.set_defaults(fn=cmd_metrics)

    x = sub.add_parser("experiment", parents=[common], help="run a named experiment and check its tolerances")
    x.add_argument("name", nargs="?", choices=harness.EXPERIMENTS)
    x.add_argument("--replicates", type=int, default=None)
    x.add_argument("--N", type=int, default=None)
    x.set_defaults(fn=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command != "experiment" and args.seed is None:
        args.seed = 0
    try:
        return int(args.fn(args))
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
