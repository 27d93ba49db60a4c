"""``fida`` command line: simulate, features, metric, twin, estimate.

Exit codes: 0 success, 2 config, 3 numerical, 4 metric domain, 5 estimation.
Summary lines on stdout are ``key=value`` pairs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, FidaError
from .features import (
    FeatureSet,
    extract_argmax,
    extract_front,
    extract_levelset,
    extract_peaks,
    extract_threshold,
)
from .models import Field1D, Trajectory, field_from_json, integrate_ode
from .setmetrics import MetricSpec, distance
from .twinlab import (
    apply_seed_override,
    parse_config,
    run_estimate,
    run_twin,
    simulate_truth,
    versions,
)

log = logging.getLogger("fida")

OPERATORS = ("front", "threshold", "argmax", "level", "peaks")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("FIDA_SEED")
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError as exc:
        raise ConfigError(f"FIDA_SEED must be an integer, got {env!r}") from exc


def _load_raw(args):
    raw = _read_json(args.config)
    seed = _seed(args)
    if seed is not None:
        raw = apply_seed_override(raw, seed)
    return raw


def _out_dir(args, cfg):
    return Path(args.out or cfg.output.get("dir", "."))


def _prefix(cfg):
    return cfg.output.get("prefix", cfg.name)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args):
    raw = _load_raw(args)
    cfg = parse_config(raw, require_method=False)
    out = _out_dir(args, cfg)
    prefix = _prefix(cfg)
    if cfg.model_id == "lorenz":
        x0 = cfg.initial.get("x", (1.0, 1.0, 1.0))
        traj = integrate_ode("lorenz", x0, cfg.params, 0.0, cfg.horizon, cfg.dt,
                             cfg.process_noise, sample_every=int(raw.get("sample_every", 1)))
        _write_json(out / f"{prefix}_trajectory.json", traj.to_json())
        with (out / f"{prefix}_trajectory.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("t",) + traj.names)
            for t, s in zip(traj.t, traj.states):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in s])
        print(f"status=ok samples={traj.t.size} t_end={float(traj.t[-1])!r}")
        return 0
    _, u0, states = simulate_truth(cfg)
    grid = cfg.grid
    for k, (t, u) in enumerate(zip(cfg.obs_times, states)):
        _write_json(out / f"{prefix}_t{k:03d}.json", Field1D(grid, u).to_json() | {"time": float(t)})
    with (out / f"{prefix}_snapshots.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "u_t0"] + [f"u_t{float(t):g}" for t in cfg.obs_times])
        for i, x in enumerate(grid.x):
            w.writerow([repr(float(x)), repr(float(u0[i]))] + [repr(float(s[i])) for s in states])
    print(f"status=ok snapshots={len(states)}")
    return 0


def _is_trajectory(d):
    return "t" in d and "states" in d


def cmd_features(args):
    data = _read_json(args.input)
    op = args.op
    if op in ("front", "threshold") and args.m is None:
        raise ConfigError(f"--op {op} requires --m")
    if op == "level" and args.c is None:
        raise ConfigError("--op level requires --c")
    if op == "peaks":
        if not _is_trajectory(data):
            raise ConfigError("--op peaks needs a trajectory file")
        traj = Trajectory.from_json(data)
        comp = int(args.component) if args.component.isdigit() else args.component
        if isinstance(comp, str) and comp not in traj.names:
            raise ConfigError(f"unknown trajectory component {comp!r}")
        fs = extract_peaks(traj.t, traj.component(comp))
    else:
        if _is_trajectory(data):
            raise ConfigError(f"--op {op} needs a field file")
        try:
            field = field_from_json(data)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed field file: {exc}") from exc
        t = float(data.get("time", 0.0))
        if op == "level":
            fs = extract_levelset(field, args.c, time=t)
        elif not isinstance(field, Field1D):
            raise ConfigError(f"--op {op} needs a 1D field")
        elif op == "front":
            fs = extract_front(field, args.m, time=t)
        elif op == "threshold":
            fs = extract_threshold(field, args.m, time=t)
        else:
            fs = extract_argmax(field, args.tol, with_value=args.with_value, time=t)
    if args.out:
        _write_json(args.out, fs.to_json())
    print(f"count={len(fs)} kind={fs.kind} degenerate={str(fs.degenerate).lower()}")
    return 0


def cmd_metric(args):
    try:
        A = FeatureSet.from_json(_read_json(args.a))
        B = FeatureSet.from_json(_read_json(args.b))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed feature file: {exc}") from exc
    cutoff = args.cutoff
    if cutoff is None:
        domain = A.domain or B.domain
        defaults = MetricSpec.default_for(domain) if domain else MetricSpec()
        cutoff = defaults.cutoff
    spec = MetricSpec(args.metric, cutoff, args.order, args.value_weight)
    d = distance(A, B, spec)
    print(f"distance={d:.12g}")
    return 0


def cmd_twin(args):
    raw = _load_raw(args)
    cfg = parse_config(raw)
    report = run_twin(cfg)
    paths = report.write(_out_dir(args, cfg), _prefix(cfg))
    s = report.summary
    fields = [f"status={report.status}", f"cycles={s['cycles']}"]
    if report.method == "peakmap":
        fields.append(f"estimate={s['estimate']!r}")
    else:
        fields += [f"rmse_analysis_mean={s['rmse_analysis_mean']!r}",
                   f"rmse_freerun_mean={s['rmse_freerun_mean']!r}"]
        for name, v in (s.get("final_params") or {}).items():
            fields.append(f"param_{name}={v!r}")
    fields.append(f"report={paths['report']}")
    print(" ".join(fields))
    if report.status != "ok":
        print(f"error={report.failure}", file=sys.stderr)
        return 5 if report.method == "peakmap" else 3
    return 0


def cmd_estimate(args):
    raw = _load_raw(args)
    cfg = parse_config(raw)
    if cfg.model_id != "lorenz":
        raise ConfigError("estimate runs the peak-map method on the lorenz model")
    observed = None
    obs_file = raw.get("observations", {}).get("peaks_file")
    if obs_file:
        try:
            observed = FeatureSet.from_json(_read_json(obs_file))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed peaks file: {exc}") from exc
    res = run_estimate(cfg, observed)
    out = _out_dir(args, cfg)
    prefix = _prefix(cfg)
    truth = cfg.params.get(res.name)
    _write_json(out / f"{prefix}_estimate.json", {
        "param": res.name, "estimate": res.estimate, "cost": res.cost,
        "truth": truth if obs_file is None else None,
        "grid": res.grid.tolist(),
        "grid_costs": [c if np.isfinite(c) else None for c in res.grid_costs.tolist()],
        "versions": versions(),
    })
    with (out / f"{prefix}_cost_curve.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((res.name, "cost"))
        for p, c in res.curve():
            w.writerow((repr(p), repr(c) if np.isfinite(c) else ""))
    print(f"param={res.name} estimate={res.estimate!r} cost={res.cost!r}")
    return 0


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error={message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override every config seed")
    common.add_argument("--threads", type=int, default=None,
                        help="cap on worker threads (default: machine parallelism)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="fida", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="run a forward model")
    s.add_argument("config")
    s.add_argument("--out", default=None, help="output directory")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("features", parents=[common], help="apply an observation operator")
    f.add_argument("input", help="field or trajectory JSON")
    f.add_argument("--op", required=True, choices=OPERATORS)
    f.add_argument("--m", type=float, default=None, help="threshold for front/threshold")
    f.add_argument("--c", type=float, default=None, help="level for level")
    f.add_argument("--tol", type=float, default=0.0, help="relative tolerance for argmax")
    f.add_argument("--with-value", action="store_true", help="argmax carries the maximum")
    f.add_argument("--component", default="z", help="trajectory component for peaks")
    f.add_argument("--out", default=None, help="FeatureSet JSON to write")
    f.set_defaults(func=cmd_features)

    m = sub.add_parser("metric", parents=[common], help="distance between two FeatureSets")
    m.add_argument("a")
    m.add_argument("b")
    m.add_argument("--metric", default="ospa", choices=("hausdorff", "chamfer", "ospa"))
    m.add_argument("--cutoff", type=float, default=None)
    m.add_argument("--order", type=float, default=2.0)
    m.add_argument("--value-weight", type=float, default=1.0)
    m.set_defaults(func=cmd_metric)

    t = sub.add_parser("twin", parents=[common], help="run a twin experiment")
    t.add_argument("config")
    t.add_argument("--out", default=None)
    t.set_defaults(func=cmd_twin)

    e = sub.add_parser("estimate", parents=[common], help="peak-map parameter estimation")
    e.add_argument("config")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_estimate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error=--threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except FidaError as exc:
        extra = f" time={exc.time!r}" if hasattr(exc, "time") else ""
        print(f"error={exc}{extra}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
