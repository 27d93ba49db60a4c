"""Set-valued observation operators.

Each extractor maps a field (or a time series) to a ``FeatureSet``: the
finite set of locations where a feature event happens, optionally paired
with the field value there. Cardinality is data-dependent and may be zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, PreconditionError
from .models import Field1D, Field2D, make_rng

KINDS = ("front", "argmax", "argmax_with_value", "level", "peaks")
VALUE_KINDS = frozenset({"argmax_with_value", "peaks"})
DEDUP_TOL = 1e-12


@dataclass(frozen=True)
class FeaturePoint:
    loc: float | tuple
    value: float | None = None


@dataclass
class FeatureSet:
    """Canonical (sorted, de-duplicated) finite set of feature points.

    ``locs`` has shape ``(m,)`` for 1D/time features and ``(m, 2)`` for
    2D contours. ``values`` is present exactly for value-carrying kinds.
    ``extras`` holds per-point arrays (e.g. front strength) that follow the
    canonical permutation; ``meta`` is free-form.
    """

    kind: str
    locs: np.ndarray
    values: np.ndarray | None = None
    time: float = 0.0
    degenerate: bool = False
    domain: tuple | None = None
    extras: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown feature kind {self.kind!r}")
        locs = np.asarray(self.locs, dtype=np.float64)
        if locs.ndim == 2 and locs.shape[0] == 0:
            pass
        elif locs.size == 0:
            locs = locs.reshape(0)
        if locs.ndim not in (1, 2) or (locs.ndim == 2 and locs.shape[1] != 2):
            raise DomainError(f"feature locations must be (m,) or (m, 2), got {locs.shape}")
        m = locs.shape[0]
        carries = self.kind in VALUE_KINDS
        if carries:
            vals = np.zeros(0) if self.values is None and m == 0 else np.asarray(self.values, dtype=np.float64)
            if vals.shape != (m,):
                raise DomainError(f"{self.kind} needs one value per point")
        else:
            if self.values is not None and np.size(self.values):
                raise DomainError(f"{self.kind} features do not carry values")
            vals = None
        if not np.all(np.isfinite(locs)) or (vals is not None and not np.all(np.isfinite(vals))):
            raise DomainError("feature points must be finite")
        extras = {k: np.asarray(v) for k, v in self.extras.items()}

        order = self._canonical_order(locs, vals)
        locs = locs[order]
        vals = None if vals is None else vals[order]
        extras = {k: v[order] for k, v in extras.items()}
        keep = self._distinct(locs, vals)
        self.locs = locs[keep]
        self.values = None if vals is None else vals[keep]
        self.extras = {k: v[keep] for k, v in extras.items()}

    @staticmethod
    def _canonical_order(locs, vals):
        if locs.shape[0] == 0:
            return np.zeros(0, dtype=int)
        if locs.ndim == 2:
            keys = [locs[:, 1], locs[:, 0]]
        else:
            keys = [locs]
        if vals is not None:
            keys = [vals] + keys
        return np.lexsort(keys)

    @staticmethod
    def _distinct(locs, vals):
        m = locs.shape[0]
        keep = np.ones(m, dtype=bool)
        if m < 2:
            return keep
        dl = np.abs(np.diff(locs, axis=0))
        same = dl.max(axis=1) <= DEDUP_TOL if dl.ndim == 2 else dl <= DEDUP_TOL
        if vals is not None:
            same &= np.abs(np.diff(vals)) <= DEDUP_TOL
        keep[1:] = ~same
        return keep

    def __len__(self):
        return int(self.locs.shape[0])

    @property
    def carries_values(self):
        return self.kind in VALUE_KINDS

    @property
    def dim(self):
        return 2 if self.locs.ndim == 2 else 1

    @property
    def points(self):
        out = []
        for i in range(len(self)):
            loc = tuple(self.locs[i].tolist()) if self.dim == 2 else float(self.locs[i])
            val = None if self.values is None else float(self.values[i])
            out.append(FeaturePoint(loc, val))
        return out

    def subset(self, mask):
        return replace(
            self,
            locs=self.locs[mask],
            values=None if self.values is None else self.values[mask],
            extras={k: v[mask] for k, v in self.extras.items()},
        )

    def to_json(self):
        pts = []
        for p in self.points:
            loc = list(p.loc) if isinstance(p.loc, tuple) else p.loc
            pts.append({"loc": loc, "value": p.value})
        d = {"kind": self.kind, "time": float(self.time), "degenerate": bool(self.degenerate),
             "points": pts}
        if self.domain is not None:
            d["domain"] = _domain_to_json(self.domain)
        return d

    @classmethod
    def from_json(cls, d):
        pts = d.get("points", [])
        kind = d["kind"]
        two_d = bool(pts) and isinstance(pts[0]["loc"], (list, tuple))
        locs = np.array([p["loc"] for p in pts], dtype=float).reshape((-1, 2) if two_d else (-1,))
        values = None
        if kind in VALUE_KINDS:
            if any(p.get("value") is None for p in pts):
                raise DomainError(f"{kind} points need values")
            values = np.array([p["value"] for p in pts], dtype=float)
        domain = d.get("domain")
        if domain is not None:
            domain = tuple(tuple(b) for b in domain) if isinstance(domain[0], list) else tuple(domain)
        return cls(kind, locs, values, float(d.get("time", 0.0)), bool(d.get("degenerate", False)),
                   domain)


def _domain_to_json(domain):
    if isinstance(domain[0], (tuple, list)):
        return [list(map(float, b)) for b in domain]
    return [float(domain[0]), float(domain[1])]


def empty(kind, time=0.0, degenerate=False, domain=None):
    values = np.zeros(0) if kind in VALUE_KINDS else None
    return FeatureSet(kind, np.zeros(0), values, time, degenerate, domain)


def _wrap(x, grid):
    if grid.periodic:
        x = grid.x0 + np.mod(x - grid.x0, grid.length)
        # mod can round a value just below the period up to exactly the period
        x = np.where(x >= grid.x0 + grid.length, grid.x0, x)
    return x


def _runs(mask, periodic):
    """Index runs ``[(start, stop), ...]`` (stop exclusive, may exceed n when wrapping)."""
    n = mask.size
    if not mask.any():
        return []
    if mask.all():
        return [(0, n)]
    idx = np.flatnonzero(np.diff(np.concatenate([[0], mask.astype(np.int8), [0]])))
    runs = list(zip(idx[::2], idx[1::2]))
    if periodic and len(runs) > 1 and runs[0][0] == 0 and runs[-1][1] == n:
        first = runs.pop(0)
        start, _ = runs.pop()
        runs.append((start, n + first[1]))
    return runs


# ---------------------------------------------------------------------------
# operators on 1D fields


def extract_front(u: Field1D, M, time=0.0) -> FeatureSet:
    """Locations where the gradient magnitude exceeds ``M``.

    Each contiguous super-threshold run is reduced to its steepest point,
    refined below the grid scale by a parabola through the gradient
    magnitudes around it. The run's raw interval is kept in
    ``meta["intervals"]`` and the gradient magnitude in ``extras["strength"]``.
    """
    if not M > 0:
        raise PreconditionError(f"front threshold must be positive, got {M}")
    g = u.grid
    v = u.values
    if g.periodic:
        grad = (np.roll(v, -1) - np.roll(v, 1)) / (2 * g.dx)
    else:
        grad = np.gradient(v, g.dx)
    mag = np.abs(grad)
    locs, strength, intervals = [], [], []
    for start, stop in _runs(mag > M, g.periodic):
        cells = np.arange(start, stop) % g.n
        best = int(cells[int(np.argmax(mag[cells]))])
        delta, peak = 0.0, mag[best]
        if g.periodic or 0 < best < g.n - 1:
            delta, peak = _quadratic_offset(mag[best - 1], mag[best], mag[(best + 1) % g.n])
            delta = min(max(delta, -0.5), 0.5)
        locs.append(g.x[best] + delta * g.dx)
        strength.append(peak)
        intervals.append((float(g.x[cells[0]]), float(g.x[cells[-1]])))
    locs = list(_wrap(np.array(locs), g))
    fs = FeatureSet("front", np.array(locs), time=time, domain=g.bounds,
                    extras={"strength": np.array(strength)})
    order = np.argsort(np.array(locs), kind="stable") if locs else []
    fs.meta["intervals"] = [intervals[i] for i in order]
    return fs


def _crossings(v, grid, level):
    """Linear-interpolated boundaries of the super-level region {v > level}."""
    above = v > level
    if grid.periodic:
        nxt = np.roll(np.arange(grid.n), -1)
        pairs = np.arange(grid.n)
    else:
        nxt = np.arange(1, grid.n)
        pairs = np.arange(grid.n - 1)
    flip = above[pairs] != above[nxt]
    i, j = pairs[flip], nxt[flip]
    frac = (level - v[i]) / (v[j] - v[i])
    return _wrap(grid.x[i] + frac * grid.dx, grid)


def extract_threshold(u: Field1D, M, time=0.0) -> FeatureSet:
    """Boundary locations of {u > M}; the run interiors are not reported."""
    locs = _crossings(u.values, u.grid, M)
    return FeatureSet("level", locs, time=time, domain=u.grid.bounds, meta={"operator": "threshold"})


def _quadratic_offset(um, u0, up):
    """Vertex offset (in cells) and value of the parabola through 3 equispaced samples."""
    den = um - 2.0 * u0 + up
    if den >= 0:
        return 0.0, u0
    delta = 0.5 * (um - up) / den
    return delta, u0 - 0.25 * (um - up) * delta


def extract_argmax(u: Field1D, tol=0.0, with_value=False, time=0.0) -> FeatureSet:
    """Near-maximal locations, refined to sub-grid accuracy.

    Cells within ``tol * (max - min)`` of the maximum that are discrete
    local maxima are kept, one per contiguous run. A constant field returns
    an empty set flagged ``degenerate`` (its maximizer is the whole domain).
    """
    if tol < 0:
        raise PreconditionError("tol must be non-negative")
    kind = "argmax_with_value" if with_value else "argmax"
    g, v = u.grid, u.values
    vmax, vmin = float(v.max()), float(v.min())
    scale = max(1.0, abs(vmax), abs(vmin))
    if vmax - vmin <= 1e-12 * scale:
        return empty(kind, time, degenerate=True, domain=g.bounds)
    if g.periodic:
        left, right = np.roll(v, 1), np.roll(v, -1)
    else:
        left = np.concatenate([[-np.inf], v[:-1]])
        right = np.concatenate([v[1:], [-np.inf]])
    cand = (v >= vmax - tol * (vmax - vmin)) & (v >= left) & (v >= right)
    locs, vals = [], []
    for start, stop in _runs(cand, g.periodic):
        cells = np.arange(start, stop) % g.n
        i = int(cells[int(np.argmax(v[cells]))])
        if g.periodic or 0 < i < g.n - 1:
            delta, peak = _quadratic_offset(v[i - 1], v[i], v[(i + 1) % g.n])
        else:
            delta, peak = 0.0, v[i]
        locs.append(g.x[i] + delta * g.dx)
        vals.append(peak)
    locs = _wrap(np.array(locs), g)
    return FeatureSet(kind, locs, np.array(vals) if with_value else None, time, domain=g.bounds)


def extract_levelset(u, C, time=0.0) -> FeatureSet:
    """Locations where the field equals ``C``.

    1D fields give interpolated crossings; 2D fields give the midpoints of
    the marching-squares segments of the C-contour.
    """
    v = u.values
    degenerate = bool(np.all(np.abs(v - C) <= 1e-12))
    if isinstance(u, Field2D):
        domain = (u.gridx.bounds, u.gridy.bounds)
        if degenerate:
            return FeatureSet("level", np.zeros((0, 2)), time=time, degenerate=True, domain=domain)
        segs = marching_squares(u, C)
        mids = 0.5 * (segs[:, 0] + segs[:, 1]) if len(segs) else np.zeros((0, 2))
        return FeatureSet("level", mids, time=time, domain=domain)
    if degenerate:
        return empty("level", time, degenerate=True, domain=u.grid.bounds)
    return FeatureSet("level", _crossings(v, u.grid, C), time=time, domain=u.grid.bounds)


# marching-squares edge table: corner bits (bl=1, br=2, tr=4, tl=8) -> edge pairs,
# edges numbered bottom=0, right=1, top=2, left=3
_MS_CASES = {
    1: [(3, 0)], 2: [(0, 1)], 3: [(3, 1)], 4: [(1, 2)], 6: [(0, 2)], 7: [(3, 2)],
    8: [(2, 3)], 9: [(2, 0)], 11: [(2, 1)], 12: [(1, 3)], 13: [(1, 0)], 14: [(0, 3)],
}


def marching_squares(u: Field2D, C):
    """Contour segments of ``u == C`` as an array of shape (k, 2, 2)."""
    v = u.values - C
    x, y = u.gridx.x, u.gridy.x
    if u.gridx.periodic or u.gridy.periodic:
        # close the periodic seam by appending the wrapped row/column
        if u.gridx.periodic:
            v = np.concatenate([v, v[:, :1]], axis=1)
            x = np.append(x, x[-1] + u.gridx.dx)
        if u.gridy.periodic:
            v = np.concatenate([v, v[:1, :]], axis=0)
            y = np.append(y, y[-1] + u.gridy.dx)
    above = v > 0
    segs = []
    ny, nx = v.shape
    for j in range(ny - 1):
        for i in range(nx - 1):
            bl, br, tr, tl = above[j, i], above[j, i + 1], above[j + 1, i + 1], above[j + 1, i]
            case = int(bl) | (int(br) << 1) | (int(tr) << 2) | (int(tl) << 3)
            if case in (0, 15):
                continue
            c = (v[j, i], v[j, i + 1], v[j + 1, i + 1], v[j + 1, i])
            x0, x1, y0, y1 = x[i], x[i + 1], y[j], y[j + 1]

            def edge_point(e):
                if e == 0:
                    return (x0 + (x1 - x0) * c[0] / (c[0] - c[1]), y0)
                if e == 1:
                    return (x1, y0 + (y1 - y0) * c[1] / (c[1] - c[2]))
                if e == 2:
                    return (x0 + (x1 - x0) * c[3] / (c[3] - c[2]), y1)
                return (x0, y0 + (y1 - y0) * c[0] / (c[0] - c[3]))

            if case in (5, 10):
                center_above = sum(c) / 4.0 > 0
                if case == 5:
                    pairs = [(3, 2), (1, 0)] if center_above else [(3, 0), (1, 2)]
                else:
                    pairs = [(0, 3), (2, 1)] if center_above else [(0, 1), (2, 3)]
            else:
                pairs = _MS_CASES[case]
            for a, b in pairs:
                segs.append((edge_point(a), edge_point(b)))
    return np.array(segs, dtype=float).reshape(-1, 2, 2)


# ---------------------------------------------------------------------------
# peaks of a time series


def _parabola_vertex(t, z):
    (t0, t1, t2), (z0, z1, z2) = t, z
    a = (t1 - t0) * (z1 - z2)
    b = (t1 - t2) * (z1 - z0)
    den = a - b
    if den == 0:
        return t1, z1
    tv = t1 - 0.5 * ((t1 - t0) * a - (t1 - t2) * b) / den
    # Lagrange interpolant at the vertex
    zv = (z0 * (tv - t1) * (tv - t2) / ((t0 - t1) * (t0 - t2))
          + z1 * (tv - t0) * (tv - t2) / ((t1 - t0) * (t1 - t2))
          + z2 * (tv - t0) * (tv - t1) / ((t2 - t0) * (t2 - t1)))
    return tv, zv


def extract_peaks(t, z, time=None) -> FeatureSet:
    """Interior local maxima ``(t*, z*)`` of a sampled scalar signal.

    Strict peaks are refined through their 3-sample parabola; a flat top
    is reported once, at its midpoint.
    """
    t = np.asarray(t, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if t.shape != z.shape or t.ndim != 1:
        raise PreconditionError("t and z must be 1D arrays of equal length")
    if t.size < 3:
        raise PreconditionError("need at least 3 samples")
    if np.any(np.diff(t) <= 0):
        raise PreconditionError("sample times must be strictly increasing")
    # collapse equal-valued runs so plateaus behave like single samples
    change = np.concatenate([[True], z[1:] != z[:-1]])
    starts = np.flatnonzero(change)
    stops = np.concatenate([starts[1:], [z.size]]) - 1
    zr = z[starts]
    interior = np.arange(1, zr.size - 1)
    is_peak = (zr[interior - 1] < zr[interior]) & (zr[interior + 1] < zr[interior])
    tk, zk = [], []
    for r in interior[is_peak]:
        a, b = starts[r], stops[r]
        if a == b:
            tv, zv = _parabola_vertex(t[a - 1:a + 2], z[a - 1:a + 2])
        else:
            tv, zv = 0.5 * (t[a] + t[b]), z[a]
        tk.append(tv)
        zk.append(zv)
    when = float(t[-1]) if time is None else float(time)
    return FeatureSet("peaks", np.array(tk), np.array(zk), when, domain=(float(t[0]), float(t[-1])))


# ---------------------------------------------------------------------------
# observation noise on sets


@dataclass(frozen=True)
class FeatureNoiseSpec:
    """Thinning + jitter + uniform clutter applied to a FeatureSet."""

    location_stddev: float = 0.0
    value_stddev: float = 0.0
    detect_prob: float = 1.0
    clutter_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.location_stddev < 0 or self.value_stddev < 0:
            raise DomainError("noise stddevs must be non-negative")
        if not 0.0 <= self.detect_prob <= 1.0:
            raise DomainError("detect_prob must lie in [0, 1]")
        if self.clutter_rate < 0:
            raise DomainError("clutter_rate must be non-negative")


def corrupt(fs: FeatureSet, noise: FeatureNoiseSpec, domain=None, periodic=False) -> FeatureSet:
    """Realize set-valued observation noise.

    Args:
        domain: ``(lo, hi)`` or ``((xlo, xhi), (ylo, yhi))`` for clutter;
            defaults to ``fs.domain``.
        periodic: wrap jittered 1D locations back into ``domain``.
    """
    domain = domain if domain is not None else fs.domain
    rng = make_rng(noise.seed)
    m = len(fs)
    keep = rng.random(m) < noise.detect_prob
    kept = fs.subset(keep)
    locs = kept.locs + noise.location_stddev * rng.standard_normal(kept.locs.shape)
    values = None
    if fs.carries_values:
        values = kept.values + noise.value_stddev * rng.standard_normal(len(kept))
    n_clutter = int(rng.poisson(noise.clutter_rate)) if noise.clutter_rate > 0 else 0
    if n_clutter:
        if domain is None:
            raise PreconditionError("clutter needs a domain")
        if fs.dim == 2:
            (xlo, xhi), (ylo, yhi) = domain
            extra = np.column_stack([rng.uniform(xlo, xhi, n_clutter), rng.uniform(ylo, yhi, n_clutter)])
        else:
            extra = rng.uniform(domain[0], domain[1], n_clutter)
        locs = np.concatenate([locs.reshape((-1, 2) if fs.dim == 2 else -1), extra])
        if values is not None:
            lo, hi = (float(fs.values.min()), float(fs.values.max())) if m else (0.0, 0.0)
            values = np.concatenate([values, rng.uniform(lo, hi, n_clutter)])
    if periodic and fs.dim == 1 and domain is not None:
        lo, hi = domain
        locs = lo + np.mod(locs - lo, hi - lo)
    extras = {}
    if not n_clutter:
        extras = {k: v for k, v in kept.extras.items()}
    return FeatureSet(fs.kind, locs, values, fs.time, fs.degenerate, fs.domain, extras)
