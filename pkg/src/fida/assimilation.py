"""Estimation from feature observations.

Two bridges from set-valued observations to filters:

* ``featurize`` turns a FeatureSet into a fixed-length vector so the
  stochastic EnKF can consume it;
* ``pf_update`` weights particles by a set-distance pseudo-likelihood,
  which needs no fixed cardinality.

``peak_map_cost`` / ``estimate_parameter`` identify a scalar parameter of a
chaotic ODE from its sequence of peaks, comparing time-free peak maps.
"""

from __future__ import annotations

import math
import time as _time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    BlowUpError,
    CardinalityError,
    DomainError,
    EstimationError,
    FidaError,
    InsufficientDataError,
)
from .features import FeatureSet, extract_peaks
from .models import LORENZ_DEFAULTS, ParameterVector, integrate_ode, make_rng
from .setmetrics import MetricSpec, cloud_distance, distance

RIDGE = 1e-10


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class Ensemble:
    """Augmented ensemble: ``states`` is (Ne, n), ``params`` is (Ne, n_p)."""

    states: np.ndarray
    params: np.ndarray
    param_names: tuple = ()
    bounds: np.ndarray | None = None

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        ne = self.states.shape[0]
        self.params = np.asarray(self.params, dtype=np.float64).reshape(ne, -1)
        if ne < 2:
            raise DomainError("an ensemble needs at least 2 members")
        if self.bounds is None:
            self.bounds = np.tile([-np.inf, np.inf], (self.params.shape[1], 1))
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(-1, 2)
        self.param_names = tuple(self.param_names) or tuple(f"p{i}" for i in range(self.params.shape[1]))

    @property
    def size(self):
        return self.states.shape[0]

    @property
    def augmented(self):
        return np.hstack([self.states, self.params])

    def mean_state(self):
        return self.states.mean(axis=0)

    def spread(self):
        return float(np.sqrt(np.mean(self.states.var(axis=0, ddof=1))))

    def clip(self):
        self.params = np.clip(self.params, self.bounds[:, 0], self.bounds[:, 1])
        return self


@dataclass
class ParticleSet:
    states: np.ndarray
    params: np.ndarray
    weights: np.ndarray | None = None
    param_names: tuple = ()
    bounds: np.ndarray | None = None

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        n = self.states.shape[0]
        self.params = np.asarray(self.params, dtype=np.float64).reshape(n, -1)
        if self.weights is None:
            self.weights = np.full(n, 1.0 / n)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (n,) or np.any(self.weights < 0):
            raise DomainError("need one non-negative weight per particle")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise DomainError("particle weights must sum to 1")
        if self.bounds is None:
            self.bounds = np.tile([-np.inf, np.inf], (self.params.shape[1], 1))
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(-1, 2)
        self.param_names = tuple(self.param_names) or tuple(f"p{i}" for i in range(self.params.shape[1]))

    @property
    def size(self):
        return self.states.shape[0]

    def ess(self):
        return float(1.0 / np.sum(self.weights ** 2))

    def mean_state(self):
        return self.weights @ self.states

    def mean_params(self):
        return self.weights @ self.params

    def spread(self):
        var = self.weights @ (self.states - self.mean_state()) ** 2
        return float(np.sqrt(np.mean(var)))


# ---------------------------------------------------------------------------
# featurization


@dataclass(frozen=True)
class FeaturizationSpec:
    expected_cardinality: int = 1
    selection: str = "leftmost_k"
    pad_policy: str = "nearest_duplicate"

    def __post_init__(self):
        if self.expected_cardinality < 1:
            raise DomainError("expected cardinality must be >= 1")
        if self.selection not in ("leftmost_k", "largest_k"):
            raise DomainError(f"unknown selection rule {self.selection!r}")
        if self.pad_policy not in ("reject", "nearest_duplicate"):
            raise DomainError(f"unknown pad policy {self.pad_policy!r}")


@dataclass(frozen=True)
class Featurized:
    vector: np.ndarray
    padded: bool = False


def featurize(fs: FeatureSet, spec: FeaturizationSpec) -> Featurized:
    """Fixed-length vector from a FeatureSet.

    Locations come first (sorted), then values for value-carrying kinds.
    Sets larger than k are cut down by the selection rule. Short sets raise
    under ``reject``; ``nearest_duplicate`` pads them by repeating the
    rightmost point.
    """
    if fs.dim != 1:
        raise DomainError("featurization is defined for 1D feature locations")
    k = spec.expected_cardinality
    m = len(fs)
    if spec.pad_policy == "reject" and m < k:
        raise CardinalityError(f"expected {k} feature points, got {m}")
    if m == 0:
        raise CardinalityError("cannot featurize an empty feature set")
    idx = np.arange(m)
    if m > k:
        if spec.selection == "leftmost_k":
            idx = idx[:k]
        else:
            if fs.values is not None:
                score = fs.values
            elif "strength" in fs.extras:
                score = fs.extras["strength"]
            else:
                raise DomainError("largest_k needs feature values or strengths")
            idx = np.sort(np.argsort(-score, kind="stable")[:k])
    padded = False
    if idx.size < k:
        idx = np.concatenate([idx, np.full(k - idx.size, idx[-1])])
        padded = True
    vec = fs.locs[idx]
    if fs.values is not None:
        vec = np.concatenate([vec, fs.values[idx]])
    return Featurized(np.asarray(vec, dtype=np.float64), padded)


# ---------------------------------------------------------------------------
# EnKF


@dataclass
class AnalysisDiagnostics:
    method: str
    members: int
    spread_forecast: float = math.nan
    spread_analysis: float = math.nan
    innovation_norm: float = math.nan
    featurization_failures: int = 0
    padded: int = 0
    ridge_applied: bool = False
    ess: float = math.nan
    resampled: bool = False
    weights_reset: bool = False
    skipped: bool = False
    wall_time: float = 0.0
    prior_weights: np.ndarray | None = field(default=None, repr=False)

    def to_json(self):
        d = {k: v for k, v in self.__dict__.items() if k != "prior_weights"}
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}


ObsOperator = Callable[[np.ndarray, np.ndarray], np.ndarray]


def enkf_analysis(ens: Ensemble, y_obs, R, H: ObsOperator, seed=0, perturb=True,
                  inflation=1.0):
    """Stochastic (perturbed-observation) EnKF update of an augmented ensemble.

    Args:
        y_obs: observation vector.
        R: observation error variances (vector, or a square diagonal matrix).
        H: ``H(state, params) -> vector``; may raise ``FidaError`` for members
            whose forecast cannot be featurized. Those members are left as
            they are and excluded from the sample statistics.
        seed: perturbation seed; member ``i`` uses stream ``(seed, i)``.
        inflation: multiplicative factor on forecast anomalies.

    Returns:
        ``(Ensemble, AnalysisDiagnostics)``.
    """
    t_start = _time.perf_counter()
    y_obs = np.atleast_1d(np.asarray(y_obs, dtype=np.float64))
    r = np.asarray(R, dtype=np.float64)
    r = np.diag(r) if r.ndim == 2 else np.broadcast_to(r, y_obs.shape)
    R = np.diag(r)
    diag = AnalysisDiagnostics("enkf", ens.size, spread_forecast=ens.spread())

    preds, ok = [], []
    for i in range(ens.size):
        try:
            hx = np.asarray(H(ens.states[i], ens.params[i]), dtype=np.float64)
        except FidaError:
            diag.featurization_failures += 1
            continue
        if hx.shape != y_obs.shape:
            diag.featurization_failures += 1
            continue
        preds.append(hx)
        ok.append(i)
    out = Ensemble(ens.states.copy(), ens.params.copy(), ens.param_names, ens.bounds.copy())
    if len(ok) < 2:
        diag.skipped = True
        diag.spread_analysis = diag.spread_forecast
        diag.wall_time = _time.perf_counter() - t_start
        return out, diag

    ok = np.array(ok)
    Z = ens.augmented[ok]
    Y = np.array(preds)
    zbar, ybar = Z.mean(axis=0), Y.mean(axis=0)
    Za = inflation * (Z - zbar)
    Ya = inflation * (Y - ybar)
    Z = zbar + Za
    Y = ybar + Ya
    ne = len(ok)
    Pzy = Za.T @ Ya / (ne - 1)
    S = Ya.T @ Ya / (ne - 1) + R
    try:
        if np.linalg.cond(S) > 1e14:
            raise np.linalg.LinAlgError
        Sinv = np.linalg.inv(S)
    except np.linalg.LinAlgError:
        diag.ridge_applied = True
        Sinv = np.linalg.inv(S + RIDGE * np.eye(S.shape[0]))
    K = Pzy @ Sinv
    diag.innovation_norm = float(np.linalg.norm(y_obs - ybar))

    chol = np.sqrt(np.clip(r, 0.0, None))
    for row, i in enumerate(ok):
        eta = make_rng(seed, int(i)).standard_normal(y_obs.shape) * chol if perturb else 0.0
        z = Z[row] + K @ (y_obs + eta - Y[row])
        out.states[i] = z[: ens.states.shape[1]]
        out.params[i] = z[ens.states.shape[1]:]
    out.clip()
    diag.spread_analysis = out.spread()
    diag.wall_time = _time.perf_counter() - t_start
    return out, diag


# ---------------------------------------------------------------------------
# particle filter


@dataclass(frozen=True)
class LikelihoodSpec:
    metric: MetricSpec = field(default_factory=MetricSpec)
    bandwidth: float = 0.05

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise DomainError("likelihood bandwidth must be positive")


def systematic_resample(weights, rng):
    """Indices drawn by systematic resampling (one uniform offset)."""
    n = weights.size
    positions = (rng.random() + np.arange(n)) / n
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, positions, side="right").clip(0, n - 1)


def pf_update(ps: ParticleSet, y_obs: FeatureSet, lik: LikelihoodSpec,
              H: Callable[[np.ndarray, np.ndarray], FeatureSet], seed=0, resample=True,
              ess_fraction=0.5, param_jitter=None):
    """Reweight particles by exp(-d^2 / (2 lambda^2)) and resample if needed.

    ``d`` is the configured set distance between ``H(particle)`` and the
    observed set. A metric that is undefined for the pair (Hausdorff with
    an empty set) or an ``H`` failure gives the particle zero likelihood.
    If every weight vanishes the weights are reset to uniform and flagged.

    ``param_jitter`` (stddev per parameter) perturbs parameters of
    resampled particles so duplicated parameters do not collapse.
    """
    t_start = _time.perf_counter()
    n = ps.size
    d2 = np.empty(n)
    for i in range(n):
        try:
            d = distance(H(ps.states[i], ps.params[i]), y_obs, lik.metric)
        except FidaError:
            d = math.inf
        d2[i] = d * d
    with np.errstate(divide="ignore"):
        logw = np.log(ps.weights) - d2 / (2.0 * lik.bandwidth ** 2)
    diag = AnalysisDiagnostics("pf", n, spread_forecast=ps.spread())
    if not np.any(np.isfinite(logw)):
        w = np.full(n, 1.0 / n)
        diag.weights_reset = True
    else:
        w = np.exp(logw - np.max(logw))
        w /= w.sum()
    diag.prior_weights = w.copy()
    diag.ess = float(1.0 / np.sum(w ** 2))
    states, params = ps.states.copy(), ps.params.copy()
    if resample and diag.ess < ess_fraction * n:
        rng = make_rng(seed)
        idx = systematic_resample(w, rng)
        states, params = states[idx], params[idx]
        w = np.full(n, 1.0 / n)
        diag.resampled = True
        if param_jitter is not None:
            params = params + rng.standard_normal(params.shape) * np.asarray(param_jitter)
            params = np.clip(params, ps.bounds[:, 0], ps.bounds[:, 1])
    w = w / w.sum()
    out = ParticleSet(states, params, w, ps.param_names, ps.bounds)
    diag.spread_analysis = out.spread()
    diag.wall_time = _time.perf_counter() - t_start
    return out, diag


# ---------------------------------------------------------------------------
# peak-map parameter identification


def peak_map_cloud(peaks: FeatureSet, transient=0.0):
    """Successive-peak pairs (z_k, z_{k+1}) for peaks at t >= ``transient``."""
    z = peaks.values[peaks.locs >= transient]
    return np.column_stack([z[:-1], z[1:]]) if z.size >= 2 else np.zeros((0, 2))


def simulate_peaks(params, model="lorenz", t_end=105.0, dt=0.005, x0=(1.0, 1.0, 1.0),
                   component=2, t0=0.0):
    traj = integrate_ode(model, x0, params, t0, t_end, dt)
    return extract_peaks(traj.t, traj.component(component))


def peak_map_cost(params, observed_peaks: FeatureSet, model="lorenz", t_end=105.0,
                  transient=5.0, metric: MetricSpec | None = None, dt=0.005,
                  x0=(1.0, 1.0, 1.0), component=2, min_points=10):
    """Distance between observed and simulated peak maps at ``params``.

    Both sequences are cut at ``transient`` and turned into clouds of
    successive-peak pairs, which are compared with ``metric`` (chamfer by
    default). A diverging simulation costs ``inf``.
    """
    if observed_peaks.kind != "peaks":
        raise DomainError("observed features must be of kind 'peaks'")
    metric = metric or MetricSpec("chamfer")
    n_obs = int(np.sum(observed_peaks.locs >= transient))
    if n_obs < min_points:
        raise InsufficientDataError(f"need >= {min_points} observed peaks after the transient, got {n_obs}")
    obs_cloud = peak_map_cloud(observed_peaks, transient)
    try:
        sim = simulate_peaks(params, model, t_end, dt, x0, component)
    except BlowUpError:
        return math.inf
    sim_cloud = peak_map_cloud(sim, transient)
    if len(sim_cloud) == 0:
        return math.inf
    return cloud_distance(obs_cloud, sim_cloud, metric)


@dataclass
class EstimateResult:
    name: str
    estimate: float
    cost: float
    grid: np.ndarray
    grid_costs: np.ndarray
    evaluations: list

    def curve(self):
        """All evaluations sorted by parameter value."""
        return sorted(self.evaluations)


INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def estimate_parameter(name, bounds, observed_peaks: FeatureSet, base_params=None,
                       model="lorenz", grid_points=17, refine_iters=20, **cost_kwargs):
    """Grid search then golden-section refinement of one scalar parameter.

    The golden-section search runs inside the grid cells adjacent to the
    grid minimum; the estimate is the best of every evaluated point.
    """
    if grid_points < 5:
        raise DomainError("need at least 5 grid points")
    lo, hi = map(float, bounds)
    if not hi > lo:
        raise DomainError("empty parameter bounds")
    base = dict(LORENZ_DEFAULTS if base_params is None else base_params)
    evaluations = []

    def cost(v):
        base[name] = float(v)
        c = peak_map_cost(base, observed_peaks, model, **cost_kwargs)
        evaluations.append((float(v), float(c)))
        return c

    grid = np.linspace(lo, hi, int(grid_points))
    grid_costs = np.array([cost(v) for v in grid])
    if not np.any(np.isfinite(grid_costs)):
        raise EstimationError(f"every grid evaluation of {name} diverged")
    i = int(np.argmin(grid_costs))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    c, d = b - INV_PHI * (b - a), a + INV_PHI * (b - a)
    fc, fd = cost(c), cost(d)
    for _ in range(int(refine_iters) - 2):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = cost(c)
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = cost(d)
    best = min(evaluations, key=lambda e: (e[1], abs(e[0] - grid[i])))
    return EstimateResult(name, best[0], best[1], grid, grid_costs, evaluations)


def lorenz_parameters(**overrides):
    values = dict(LORENZ_DEFAULTS, **overrides)
    return ParameterVector.from_values(values)
