"""Identical-twin experiments.

A truth run is simulated, feature observations are synthesized from it and
corrupted, an estimator assimilates them, and the result is scored
against the truth next to a free-running (never updated) control ensemble.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .assimilation import (
    AnalysisDiagnostics,
    Ensemble,
    FeaturizationSpec,
    LikelihoodSpec,
    ParticleSet,
    enkf_analysis,
    estimate_parameter,
    featurize,
    pf_update,
)
from .errors import ConfigError, FidaError, PreconditionError
from .features import (
    FeatureNoiseSpec,
    FeatureSet,
    corrupt,
    extract_argmax,
    extract_front,
    extract_levelset,
    extract_peaks,
    extract_threshold,
)
from .models import (
    LORENZ_DEFAULTS,
    Field1D,
    Grid1D,
    ProcessNoiseSpec,
    burgers_cfl_limit,
    burgers_update,
    field_from_json,
    integrate_ode,
    levelset_update,
    make_rng,
)
from .setmetrics import MetricSpec, distance

SCHEMA_VERSION = 1
CSV_COLUMNS = ("cycle", "time", "rmse_analysis", "rmse_freerun", "spread", "ess",
               "param_est", "param_err")


# ---------------------------------------------------------------------------
# models as batch propagators


# members whose CFL limit would need more substeps than this are declared failed
MAX_SUBSTEPS = 64


class BurgersModel:
    param_names = ("nu",)
    profiles = ("sine", "constant")

    def __init__(self, grid: Grid1D):
        if not grid.periodic:
            raise ConfigError("the Burgers model needs a periodic grid")
        self.grid = grid

    def initial(self, profile):
        x = self.grid.x
        kind = profile.get("profile", "sine")
        if kind == "sine":
            return (profile.get("offset", 0.0)
                    + profile.get("amplitude", 1.0)
                    * np.sin(2 * np.pi * (x - profile.get("phase", 0.0)) / self.grid.length))
        if kind == "constant":
            return np.full(self.grid.n, float(profile.get("value", 0.0)))
        if kind == "file":
            return _field_file(profile, self.grid)
        raise ConfigError(f"unknown Burgers profile {kind!r}")

    def step(self, u, params, h):
        nu = float(np.max(params["nu"]))
        limit = burgers_cfl_limit(float(np.max(np.abs(u))), self.grid.dx, nu)
        m = max(1, int(math.ceil(h / (0.95 * limit)))) if math.isfinite(limit) else 1
        if m > MAX_SUBSTEPS:
            raise PreconditionError(
                f"Burgers CFL needs {m} substeps of dt={h:.6g} (max |u|={np.max(np.abs(u)):.6g})")
        for _ in range(m):
            u = burgers_update(u, self.grid.dx, nu, h / m)
        return u


class LevelSet1DModel:
    """Kinematic 1D flame front: G_t + u G_x = sL |G_x|, burnt side G > 0."""

    param_names = ("u", "sL")
    profiles = ("slab", "front")

    def __init__(self, grid: Grid1D):
        self.grid = grid

    def initial(self, profile):
        x = self.grid.x
        kind = profile.get("profile", "slab")
        if kind == "slab":
            return profile.get("halfwidth", 0.1) - np.abs(x - profile.get("center", 0.5))
        if kind == "front":
            return profile.get("position", 0.5) - x
        if kind == "file":
            return _field_file(profile, self.grid)
        raise ConfigError(f"unknown level-set profile {kind!r}")

    def step(self, G, params, h):
        u = np.asarray(params["u"], dtype=float).reshape(-1, 1)
        sL = np.asarray(params["sL"], dtype=float).reshape(-1, 1)
        bound = float(np.max(np.abs(u)) + np.max(sL))
        m = max(1, int(math.ceil(h * bound / (0.45 * self.grid.dx)))) if bound > 0 else 1
        if m > MAX_SUBSTEPS:
            raise PreconditionError(f"level-set CFL needs {m} substeps of dt={h:.6g}")
        axes = [(-1, self.grid)]
        for _ in range(m):
            G = levelset_update(G, axes, (u,), sL, h / m)
        return G


def _field_file(profile, grid):
    try:
        f = field_from_json(json.loads(Path(_need(profile, "path", "initial")).read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read initial field: {exc}") from exc
    if not isinstance(f, Field1D) or f.grid != grid:
        raise ConfigError("initial field grid does not match the model grid")
    return f.values.copy()


FIELD_MODELS = {"burgers": BurgersModel, "levelset1d": LevelSet1DModel}


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TwinConfig:
    name: str
    model_id: str
    grid: Grid1D | None
    dt: float
    horizon: float
    params: dict
    initial: dict
    process_noise: ProcessNoiseSpec
    truth_seed: int
    obs_times: np.ndarray
    operator: dict
    obs_noise: FeatureNoiseSpec
    method: dict
    prior: dict
    output: dict
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def estimated(self):
        return tuple(self.prior.get("params", {}))


def _need(d, key, where):
    if key not in d:
        raise ConfigError(f"missing '{key}' in {where}")
    return d[key]


def _grid_from(d):
    if "grid" in d:
        return Grid1D.from_json(d["grid"])
    lo, hi = d.get("domain", (0.0, 1.0))
    return Grid1D.uniform(lo, hi, int(_need(d, "n", "model")), bool(d.get("periodic", True)))


def _obs_times(obs, horizon):
    if "times" in obs:
        times = np.asarray(obs["times"], dtype=float)
    else:
        every = float(_need(obs, "every", "observations"))
        start = float(obs.get("start", every))
        stop = float(obs.get("stop", horizon))
        if every <= 0:
            raise ConfigError("observation interval must be positive")
        count = int(math.floor((stop - start) / every + 1e-9)) + 1
        times = np.round(start + every * np.arange(count), 12)
    if times.size == 0:
        raise ConfigError("observation schedule is empty")
    if np.any(np.diff(times) <= 0) or times[0] <= 0 or times[-1] > horizon + 1e-12:
        raise ConfigError("observation times must be increasing and lie in (0, horizon]")
    return times


def parse_config(raw: dict, require_method=True) -> TwinConfig:
    """Validate a twin/estimate JSON document into a ``TwinConfig``.

    With ``require_method=False`` (simulation configs) the method block may
    be absent and ``snapshots`` stands in for the observation schedule.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if raw.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema {raw.get('schema')!r}; expected {SCHEMA_VERSION}")
    try:
        model = _need(raw, "model", "config")
        model_id = _need(model, "id", "model")
        if require_method:
            method = dict(_need(raw, "method", "config"))
        else:
            method = dict(raw.get("method", {"kind": "peakmap" if model_id == "lorenz" else "enkf"}))
        kind = method.get("kind")
        if model_id == "lorenz":
            if kind != "peakmap":
                raise ConfigError("the lorenz model runs with the 'peakmap' method")
            grid = None
        elif model_id in FIELD_MODELS:
            if kind not in ("enkf", "pf"):
                raise ConfigError(f"method for {model_id} must be 'enkf' or 'pf', got {kind!r}")
            grid = _grid_from(model)
        else:
            raise ConfigError(f"unknown model id {model_id!r}")
        horizon = float(_need(model, "horizon", "model"))
        dt = float(_need(model, "dt", "model"))
        if not (horizon > 0 and dt > 0):
            raise ConfigError("dt and horizon must be positive")
        params = {k: float(v) for k, v in model.get("params", {}).items()}
        if model_id == "lorenz":
            params = dict(LORENZ_DEFAULTS, **params)
        else:
            missing = set(FIELD_MODELS[model_id].param_names) - set(params)
            if missing:
                raise ConfigError(f"model params missing {sorted(missing)}")
        pn = model.get("process_noise", {})
        process_noise = ProcessNoiseSpec(float(pn.get("stddev", 0.0)),
                                         int(pn.get("seed", raw.get("truth_seed", 0))))
        obs = raw.get("observations", {})
        if not require_method:
            obs = {"times": raw.get("snapshots", [horizon]), "operator": "level"}
        if model_id == "lorenz":
            obs_times = np.array([horizon])
        else:
            obs_times = _obs_times(obs, horizon)
        operator = {k: v for k, v in obs.items() if k not in ("times", "every", "start", "stop")}
        if model_id != "lorenz":
            op = operator.get("operator")
            if op not in ("front", "threshold", "argmax", "level"):
                raise ConfigError(f"unknown observation operator {op!r}")
            if op in ("front", "threshold") and "M" not in operator:
                raise ConfigError(f"operator {op} needs M")
        on = raw.get("obs_noise", {})
        obs_noise = FeatureNoiseSpec(
            float(on.get("location_stddev", 0.0)), float(on.get("value_stddev", 0.0)),
            float(on.get("detect_prob", 1.0)), float(on.get("clutter_rate", 0.0)),
            int(on.get("seed", 0)))
        prior = raw.get("prior", {})
        for name, spec in prior.get("params", {}).items():
            if name not in params:
                raise ConfigError(f"prior on unknown parameter {name!r}")
            lo, hi = spec.get("lo", -math.inf), spec.get("hi", math.inf)
            if not lo <= hi:
                raise ConfigError(f"bad bounds for {name}")
        return TwinConfig(
            name=str(raw.get("name", "twin")), model_id=model_id, grid=grid, dt=dt,
            horizon=horizon, params=params, initial=dict(model.get("initial", {})),
            process_noise=process_noise, truth_seed=int(raw.get("truth_seed", 0)),
            obs_times=obs_times, operator=operator, obs_noise=obs_noise, method=method,
            prior=prior, output=dict(raw.get("output", {})), raw=copy.deepcopy(raw))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config: {exc}") from exc


def load_config(path) -> TwinConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(raw)


def apply_seed_override(raw: dict, seed: int) -> dict:
    """Derive every seed in a raw config from one base seed."""
    raw = copy.deepcopy(raw)
    raw["truth_seed"] = int(seed)
    raw.setdefault("obs_noise", {})["seed"] = int(seed) + 1
    # simulate configs carry no method block; do not invent one
    if isinstance(raw.get("method"), dict):
        raw["method"]["seed"] = int(seed) + 2
    pn = raw.setdefault("model", {}).setdefault("process_noise", {})
    pn["seed"] = int(seed) + 3
    return raw


# ---------------------------------------------------------------------------
# the experiment


def _operator(cfg: TwinConfig):
    op = cfg.operator["operator"]
    if op == "front":
        M = float(cfg.operator["M"])
        return lambda f, t=0.0: extract_front(f, M, time=t)
    if op == "threshold":
        M = float(cfg.operator["M"])
        return lambda f, t=0.0: extract_threshold(f, M, time=t)
    if op == "argmax":
        tol = float(cfg.operator.get("tol", 0.0))
        wv = bool(cfg.operator.get("with_value", False))
        return lambda f, t=0.0: extract_argmax(f, tol, with_value=wv, time=t)
    C = float(cfg.operator.get("C", 0.0))
    return lambda f, t=0.0: extract_levelset(f, C, time=t)


class _Propagator:
    """Advances a batch of member states with per-member parameters."""

    def __init__(self, cfg: TwinConfig, model, noise_rng):
        self.cfg = cfg
        self.model = model
        self.rng = noise_rng
        self.std = float(cfg.process_noise.stddev)

    def full_params(self, est_names, est_values):
        ne = est_values.shape[0]
        out = {k: np.full(ne, v) for k, v in self.cfg.params.items()}
        for j, name in enumerate(est_names):
            out[name] = est_values[:, j]
        return out

    def advance(self, states, params, t0, t1):
        n = max(1, int(math.ceil((t1 - t0) / self.cfg.dt - 1e-9)))
        h = (t1 - t0) / n
        for _ in range(n):
            states = self.model.step(states, params, h)
            if self.std > 0 and self.rng is not None:
                states = states + self.rng.standard_normal(states.shape) * self.std * math.sqrt(h)
        return states


def _rmse(a, b):
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def _initial_members(cfg: TwinConfig, model, rng, ne):
    init = cfg.prior.get("initial", {})
    mean = dict(cfg.initial, **init.get("mean", {}))
    std = init.get("stddev", {})
    states = np.empty((ne, model.grid.n))
    for i in range(ne):
        prof = dict(mean)
        for key, s in std.items():
            prof[key] = float(mean.get(key, 0.0)) + float(s) * rng.standard_normal()
        states[i] = model.initial(prof)
    names = cfg.estimated
    params = np.empty((ne, len(names)))
    bounds = np.empty((len(names), 2))
    for j, name in enumerate(names):
        spec = cfg.prior["params"][name]
        lo, hi = float(spec.get("lo", -math.inf)), float(spec.get("hi", math.inf))
        bounds[j] = (lo, hi)
        if spec.get("dist", "normal") == "uniform":
            params[:, j] = rng.uniform(lo, hi, ne)
        else:
            mu = float(spec.get("mean", cfg.params[name]))
            params[:, j] = np.clip(mu + float(spec.get("stddev", 0.0)) * rng.standard_normal(ne), lo, hi)
    return states, params, bounds


@dataclass
class TwinReport:
    name: str
    method: str
    model: str
    status: str
    failure: str | None
    cycles: list
    summary: dict
    cost_curve: list
    config: dict
    seeds: dict
    diagnostics: list = field(default_factory=list, repr=False)

    @property
    def rmse_analysis(self):
        return [c["rmse_analysis"] for c in self.cycles]

    @property
    def rmse_freerun(self):
        return [c["rmse_freerun"] for c in self.cycles]

    def to_json(self):
        return _finite_or_null({
            "schema": SCHEMA_VERSION,
            "name": self.name,
            "model": self.model,
            "method": self.method,
            "status": self.status,
            "failure": self.failure,
            "cycles": self.cycles,
            "summary": self.summary,
            "cost_curve": self.cost_curve,
            "config": self.config,
            "seeds": self.seeds,
            "versions": versions(),
        })

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for c in self.cycles:
            w.writerow([_csv_cell(c.get(k)) for k in CSV_COLUMNS])
        return buf.getvalue()

    def write(self, out_dir, prefix=None):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        prefix = prefix or self.name
        paths = {
            "report": out_dir / f"{prefix}_report.json",
            "csv": out_dir / f"{prefix}_report.csv",
            "diagnostics": out_dir / f"{prefix}_diagnostics.jsonl",
        }
        paths["report"].write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        paths["csv"].write_text(self.to_csv())
        with paths["diagnostics"].open("w") as fh:
            for rec in self.diagnostics:
                fh.write(json.dumps(_finite_or_null(rec), sort_keys=True) + "\n")
        return paths


def versions():
    return {"fida": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, dict):
        v = next(iter(v.values()), None)
        return _csv_cell(v)
    if isinstance(v, float):
        return "" if not math.isfinite(v) else repr(v)
    return str(v)


def _finite_or_null(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite_or_null(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite_or_null(v) for v in obj]
    if isinstance(obj, np.generic):
        return _finite_or_null(obj.item())
    if isinstance(obj, np.ndarray):
        return _finite_or_null(obj.tolist())
    return obj


def _seeds(cfg):
    return {"truth": cfg.truth_seed, "obs_noise": cfg.obs_noise.seed,
            "method": int(cfg.method.get("seed", 0)), "process_noise": cfg.process_noise.seed}


def simulate_truth(cfg: TwinConfig):
    """Truth states at every observation time, plus the initial state."""
    model = FIELD_MODELS[cfg.model_id](cfg.grid)
    rng = make_rng(cfg.process_noise.seed, 0) if cfg.process_noise.active else None
    prop = _Propagator(cfg, model, rng)
    params = {k: np.array([v]) for k, v in cfg.params.items()}
    u = model.initial(cfg.initial)[None, :]
    out, t = [], 0.0
    for t_obs in cfg.obs_times:
        u = prop.advance(u, params, t, float(t_obs))
        out.append(u[0].copy())
        t = float(t_obs)
    return model, model.initial(cfg.initial), out


def observe(cfg: TwinConfig, truth_states):
    """Noise-free and corrupted feature observations of the truth."""
    op = _operator(cfg)
    clean, noisy = [], []
    for k, (t, u) in enumerate(zip(cfg.obs_times, truth_states)):
        fs = op(Field1D(cfg.grid, u), float(t))
        spec = FeatureNoiseSpec(cfg.obs_noise.location_stddev, cfg.obs_noise.value_stddev,
                                cfg.obs_noise.detect_prob, cfg.obs_noise.clutter_rate,
                                int(np.random.SeedSequence([cfg.obs_noise.seed, k]).generate_state(1)[0]))
        clean.append(fs)
        noisy.append(corrupt(fs, spec, periodic=cfg.grid.periodic))
    return clean, noisy


def free_run_baseline(cfg: TwinConfig, truth_states=None):
    """RMSE of the never-updated prior ensemble mean against the truth."""
    if cfg.model_id not in FIELD_MODELS:
        raise ConfigError("free-run baselines are defined for field models")
    if truth_states is None:
        _, _, truth_states = simulate_truth(cfg)
    model = FIELD_MODELS[cfg.model_id](cfg.grid)
    seed = int(cfg.method.get("seed", 0))
    ne = int(cfg.method.get("members", 50))
    states, params, _ = _initial_members(cfg, model, make_rng(seed, 0), ne)
    prop = _Propagator(cfg, model, make_rng(seed, 3))
    full = prop.full_params(cfg.estimated, params)
    weights = np.full(ne, 1.0 / ne)
    out, t = [], 0.0
    for t_obs, truth in zip(cfg.obs_times, truth_states):
        states = prop.advance(states, full, t, float(t_obs))
        out.append(_rmse(weights @ states, truth))
        t = float(t_obs)
    return out


def _obs_variance(cfg, kind_has_values, k):
    s_loc = float(cfg.method.get("obs_stddev", cfg.obs_noise.location_stddev))
    var = [max(s_loc ** 2, 1e-12)] * k
    if kind_has_values:
        s_val = float(cfg.method.get("value_obs_stddev", cfg.obs_noise.value_stddev))
        var += [max(s_val ** 2, 1e-12)] * k
    return np.array(var)


def run_twin(cfg: TwinConfig) -> TwinReport:
    """Run one twin experiment end to end; failures are recorded, not raised."""
    if cfg.model_id == "lorenz":
        return _run_peakmap(cfg)
    kind = cfg.method["kind"]
    model, _, truth_states = simulate_truth(cfg)
    clean, noisy = observe(cfg, truth_states)
    try:
        freerun = free_run_baseline(cfg, truth_states)
        freerun_failure = None
    except FidaError as exc:
        freerun = [math.nan] * len(truth_states)
        freerun_failure = str(exc)

    seed = int(cfg.method.get("seed", 0))
    ne = int(cfg.method.get("members", 50))
    states, params, bounds = _initial_members(cfg, model, make_rng(seed, 0), ne)
    prop = _Propagator(cfg, model, make_rng(seed, 3))
    op = _operator(cfg)
    names = cfg.estimated
    grid = cfg.grid

    fspec = FeaturizationSpec(**cfg.method.get("featurization", {}))
    lik_cfg = cfg.method.get("likelihood", {})
    metric_cfg = dict(lik_cfg.get("metric", {}))
    metric = MetricSpec(**dict({"kind": "ospa", "cutoff": 0.25 * grid.length, "order": 2.0},
                               **metric_cfg))
    lik = LikelihoodSpec(metric, float(lik_cfg.get("bandwidth",
                                                   max(cfg.obs_noise.location_stddev, grid.dx))))
    inflation = float(cfg.method.get("inflation", 1.0))
    jitter = cfg.method.get("param_jitter")
    if isinstance(jitter, dict):
        jitter = [float(jitter.get(n, 0.0)) for n in names]

    def H_vec(state, p):
        return featurize(op(Field1D(grid, state)), fspec).vector

    def H_set(state, p):
        return op(Field1D(grid, state))

    if kind == "enkf":
        filt = Ensemble(states, params, names, bounds)
    else:
        filt = ParticleSet(states, params, None, names, bounds)

    cycles, diagnostics = [], []
    status, failure = "ok", None
    t = 0.0
    for k, t_obs in enumerate(cfg.obs_times):
        t_obs = float(t_obs)
        truth = truth_states[k]
        try:
            full = prop.full_params(names, filt.params)
            filt.states = prop.advance(filt.states, full, t, t_obs)
            t = t_obs
            rmse_f = _rmse(_mean_state(filt), truth)
            y_set = noisy[k]
            if kind == "enkf":
                try:
                    y = featurize(y_set, fspec).vector
                except FidaError:
                    y = None
                if y is None:
                    diag = _skip_diag("enkf", filt)
                else:
                    R = _obs_variance(cfg, y_set.carries_values, fspec.expected_cardinality)
                    filt, diag = enkf_analysis(filt, y, R, H_vec, seed=_cycle_seed(seed, 1, k),
                                               inflation=inflation)
            else:
                filt, diag = pf_update(filt, y_set, lik, H_set, seed=_cycle_seed(seed, 2, k),
                                       param_jitter=jitter)
        except FidaError as exc:
            status, failure = "failed", f"cycle {k} at t={t_obs:.6g}: {exc}"
            break
        est = _mean_params(filt)
        cycles.append({
            "cycle": k,
            "time": t_obs,
            "rmse_forecast": rmse_f,
            "rmse_analysis": _rmse(_mean_state(filt), truth),
            "rmse_freerun": freerun[k],
            "spread": filt.spread(),
            "ess": diag.ess,
            "param_est": {n: float(est[j]) for j, n in enumerate(names)} or None,
            "param_err": {n: abs(float(est[j]) - cfg.params[n]) for j, n in enumerate(names)} or None,
            "feature_error": _feature_error(filt, clean[k], H_vec, H_set, fspec, metric),
            "obs_count": len(noisy[k]),
            "featurization_failures": diag.featurization_failures,
            "skipped": diag.skipped,
        })
        rec = diag.to_json()
        rec.update(cycle=k, time=t_obs)
        diagnostics.append(rec)

    summary = _summarize(cycles, cfg)
    summary["freerun_failure"] = freerun_failure
    return TwinReport(cfg.name, kind, cfg.model_id, status, failure, cycles, summary, [],
                      _finite_or_null(cfg.raw), _seeds(cfg), diagnostics)


def _cycle_seed(seed, stream, k):
    return int(np.random.SeedSequence([seed, stream, k]).generate_state(1)[0])


def _mean_state(filt):
    return filt.mean_state()


def _mean_params(filt):
    if isinstance(filt, ParticleSet):
        return filt.mean_params()
    return filt.params.mean(axis=0)


def _skip_diag(method, filt):
    return AnalysisDiagnostics(method, filt.size, filt.spread(), filt.spread(), skipped=True)


def _feature_error(filt, truth_set, H_vec, H_set, fspec, metric):
    """Posterior error of the observed feature against the noise-free truth."""
    if isinstance(filt, Ensemble):
        try:
            target = featurize(truth_set, fspec).vector
        except FidaError:
            return math.nan
        preds = []
        for i in range(filt.size):
            try:
                preds.append(H_vec(filt.states[i], filt.params[i]))
            except FidaError:
                continue
        if not preds:
            return math.nan
        return _rmse(np.mean(preds, axis=0), target)
    d = np.empty(filt.size)
    for i in range(filt.size):
        try:
            d[i] = distance(H_set(filt.states[i], filt.params[i]), truth_set, metric)
        except FidaError:
            d[i] = metric.cutoff
    return float(filt.weights @ d)


def _nanmean(xs):
    xs = np.array([x for x in xs if x is not None and math.isfinite(x)], dtype=float)
    return float(xs.mean()) if xs.size else math.nan


def _summarize(cycles, cfg):
    s = {
        "cycles": len(cycles),
        "rmse_analysis_mean": _nanmean([c["rmse_analysis"] for c in cycles]),
        "rmse_freerun_mean": _nanmean([c["rmse_freerun"] for c in cycles]),
        "feature_error_mean": _nanmean([c["feature_error"] for c in cycles]),
        "param_truth": {n: cfg.params[n] for n in cfg.estimated},
    }
    s["final_params"] = cycles[-1]["param_est"] if cycles else None
    return s


# ---------------------------------------------------------------------------
# peak-map identification as a twin


def peakmap_observations(cfg: TwinConfig):
    """Peaks of the truth trajectory, corrupted by the observation noise."""
    x0 = cfg.initial.get("x", (1.0, 1.0, 1.0))
    comp = int(cfg.method.get("component", 2))
    dt = float(cfg.dt)
    traj = integrate_ode("lorenz", x0, cfg.params, 0.0, cfg.horizon, dt, cfg.process_noise)
    clean = extract_peaks(traj.t, traj.component(comp))
    return clean, corrupt(clean, cfg.obs_noise)


def run_estimate(cfg: TwinConfig, observed: FeatureSet | None = None):
    m = cfg.method
    name = _need(m, "param", "method")
    if name not in cfg.params:
        raise ConfigError(f"unknown parameter {name!r}")
    bounds = tuple(_need(m, "bounds", "method"))
    if observed is None:
        _, observed = peakmap_observations(cfg)
    base = dict(cfg.params)
    metric = MetricSpec(**m.get("metric", {"kind": "chamfer"}))
    return estimate_parameter(
        name, bounds, observed, base, "lorenz",
        grid_points=int(m.get("grid_points", 17)), refine_iters=int(m.get("refine_iters", 20)),
        t_end=float(m.get("t_end", cfg.horizon)), transient=float(m.get("transient", 5.0)),
        metric=metric, dt=float(m.get("dt", 0.005)), x0=tuple(m.get("x0", (1.0, 1.0, 1.0))),
        component=int(m.get("component", 2)))


def _run_peakmap(cfg: TwinConfig) -> TwinReport:
    name = cfg.method.get("param", "rho")
    status, failure, curve = "ok", None, []
    est = math.nan
    try:
        res = run_estimate(cfg)
        est = res.estimate
        curve = [{"param": p, "cost": c} for p, c in res.curve()]
    except FidaError as exc:
        status, failure = "failed", str(exc)
    truth = cfg.params.get(name, math.nan)
    cycles = [{
        "cycle": 0, "time": cfg.horizon, "rmse_forecast": None, "rmse_analysis": None,
        "rmse_freerun": None, "spread": None, "ess": None,
        "param_est": {name: est}, "param_err": {name: abs(est - truth)},
        "feature_error": None, "obs_count": None, "featurization_failures": 0, "skipped": False,
    }]
    summary = {"cycles": 1, "estimate": est, "param_truth": {name: truth},
               "final_params": {name: est}, "flags": ["rmse_undefined_for_peakmap"]}
    return TwinReport(cfg.name, "peakmap", cfg.model_id, status, failure, cycles, summary, curve,
                      _finite_or_null(cfg.raw), _seeds(cfg), [])
