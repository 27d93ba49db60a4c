"""Forward models: Lorenz-63, periodic viscous Burgers and kinematic level sets.

Every stepper is a pure function of its inputs. Array-level cores accept
leading batch axes so that whole ensembles advance in one call; the
``Field1D``/``Field2D`` wrappers are the public single-member surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import BlowUpError, DomainError, PreconditionError

OVERFLOW_GUARD = 1e12

LORENZ_DEFAULTS = {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0}


def make_rng(seed, *stream):
    """Counter-based generator keyed by ``seed`` and an optional stream path.

    Distinct stream paths (e.g. ``(seed, member)``) give independent,
    reproducible sequences.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(s) for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


# ---------------------------------------------------------------------------
# grids and fields


@dataclass(frozen=True)
class Grid1D:
    x0: float
    dx: float
    n: int
    periodic: bool = True

    def __post_init__(self):
        if not (self.dx > 0 and math.isfinite(self.dx)):
            raise DomainError(f"grid spacing must be positive, got {self.dx}")
        if int(self.n) != self.n or self.n < 2:
            raise DomainError(f"grid needs at least 2 cells, got {self.n}")
        if not math.isfinite(self.x0):
            raise DomainError("grid origin must be finite")

    @classmethod
    def uniform(cls, lo, hi, n, periodic=True):
        """Cells covering [lo, hi): periodic grids exclude ``hi``, others include it."""
        dx = (hi - lo) / (n if periodic else n - 1)
        return cls(float(lo), float(dx), int(n), bool(periodic))

    @property
    def x(self):
        return self.x0 + self.dx * np.arange(self.n)

    @property
    def length(self):
        """Domain length; for a periodic grid this is the period."""
        return self.n * self.dx if self.periodic else (self.n - 1) * self.dx

    @property
    def bounds(self):
        return (self.x0, self.x0 + self.length)

    def to_json(self):
        return {"x0": self.x0, "dx": self.dx, "n": self.n, "periodic": self.periodic}

    @classmethod
    def from_json(cls, d):
        return cls(float(d["x0"]), float(d["dx"]), int(d["n"]), bool(d.get("periodic", True)))


def _check_finite(values, what):
    if not np.all(np.isfinite(values)):
        raise DomainError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class Field1D:
    grid: Grid1D
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.grid.n,):
            raise DomainError(f"field has shape {v.shape}, grid expects ({self.grid.n},)")
        _check_finite(v, "field")
        object.__setattr__(self, "values", v)

    @property
    def x(self):
        return self.grid.x

    def with_values(self, values):
        return Field1D(self.grid, values)

    def to_json(self):
        return {"grid": self.grid.to_json(), "values": self.values.tolist()}


@dataclass(frozen=True)
class Field2D:
    """Scalar field sampled at (x_i, y_j); ``values[j, i]`` (row-major in y)."""

    gridx: Grid1D
    gridy: Grid1D
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        shape = (self.gridy.n, self.gridx.n)
        if v.size != shape[0] * shape[1]:
            raise DomainError(f"field has {v.size} values, grids expect {shape[0] * shape[1]}")
        v = v.reshape(shape)
        _check_finite(v, "field")
        object.__setattr__(self, "values", v)

    def with_values(self, values):
        return Field2D(self.gridx, self.gridy, values)

    def to_json(self):
        return {
            "grid": self.gridx.to_json(),
            "gridy": self.gridy.to_json(),
            "values": self.values.ravel().tolist(),
        }


def field_from_json(d):
    grid = Grid1D.from_json(d["grid"])
    if "gridy" in d:
        return Field2D(grid, Grid1D.from_json(d["gridy"]), np.asarray(d["values"], dtype=float))
    return Field1D(grid, np.asarray(d["values"], dtype=float))


# ---------------------------------------------------------------------------
# parameters and noise


@dataclass(frozen=True)
class Parameter:
    name: str
    value: float
    lo: float = -math.inf
    hi: float = math.inf

    def __post_init__(self):
        if not self.lo <= self.value <= self.hi:
            raise DomainError(
                f"parameter {self.name}={self.value} outside bounds [{self.lo}, {self.hi}]"
            )


class ParameterVector(Mapping):
    """Ordered named parameters, each with declared bounds."""

    def __init__(self, entries: Iterable[Parameter] = ()):
        self._entries = {p.name: p for p in entries}

    @classmethod
    def from_values(cls, values: Mapping[str, float], bounds: Mapping[str, tuple] | None = None):
        bounds = bounds or {}
        return cls(
            Parameter(k, float(v), *map(float, bounds.get(k, (-math.inf, math.inf))))
            for k, v in values.items()
        )

    def __getitem__(self, name):
        return self._entries[name].value

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def __repr__(self):
        inner = ", ".join(f"{k}={p.value:g}" for k, p in self._entries.items())
        return f"ParameterVector({inner})"

    def entry(self, name) -> Parameter:
        return self._entries[name]

    @property
    def names(self):
        return tuple(self._entries)

    def bounds(self, name):
        p = self._entries[name]
        return (p.lo, p.hi)

    def replace(self, **values):
        out = []
        for name, p in self._entries.items():
            v = float(values.pop(name, p.value))
            out.append(Parameter(name, v, p.lo, p.hi))
        if values:
            raise KeyError(f"unknown parameters: {sorted(values)}")
        return ParameterVector(out)


@dataclass(frozen=True)
class ProcessNoiseSpec:
    """Additive Gaussian model error, scaled by sqrt(dt) per step."""

    stddev: float | np.ndarray = 0.0
    seed: int = 0

    def __post_init__(self):
        if np.any(np.asarray(self.stddev) < 0):
            raise DomainError("process noise stddev must be non-negative")

    @property
    def active(self):
        return bool(np.any(np.asarray(self.stddev) > 0))


# ---------------------------------------------------------------------------
# Lorenz-63


def _lorenz_params(p):
    return (p["sigma"], p["rho"], p["beta"])


def lorenz_rhs(state, p):
    """Lorenz-63 vector field. ``state`` may carry leading batch axes."""
    s = np.asarray(state, dtype=np.float64)
    if s.shape[-1] != 3:
        raise DomainError(f"Lorenz state needs 3 components, got shape {s.shape}")
    sigma, rho, beta = _lorenz_params(p)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite([sigma, rho, beta]))):
        raise DomainError("non-finite input to lorenz_rhs")
    x, y, z = s[..., 0], s[..., 1], s[..., 2]
    return np.stack([sigma * (y - x), x * (rho - z) - y, x * y - beta * z], axis=-1)


RHS_REGISTRY: dict[str, Callable] = {"lorenz": lorenz_rhs}


@dataclass
class Trajectory:
    t: np.ndarray
    states: np.ndarray
    names: tuple = ("x", "y", "z")

    def component(self, k):
        if isinstance(k, str):
            k = self.names.index(k)
        return self.states[..., k]

    def to_json(self):
        return {"t": self.t.tolist(), "states": self.states.tolist(), "names": list(self.names)}

    @classmethod
    def from_json(cls, d):
        return cls(
            np.asarray(d["t"], dtype=float),
            np.asarray(d["states"], dtype=float),
            tuple(d.get("names", ("x", "y", "z"))),
        )


def _n_steps(t0, t1, dt):
    if not t1 > t0:
        raise PreconditionError(f"need t1 > t0, got t0={t0}, t1={t1}")
    if not dt > 0:
        raise PreconditionError(f"need dt > 0, got {dt}")
    n = max(1, int(math.ceil((t1 - t0) / dt - 1e-9)))
    return n, (t1 - t0) / n


def _lorenz_scalar_path(x0, params, t0, n, h, sample_every, noise_std, rng):
    sigma, rho, beta = (float(v) for v in _lorenz_params(params))
    x, y, z = (float(v) for v in x0)
    sq = math.sqrt(h)
    nsamp = n // sample_every + 1
    out = np.empty((nsamp, 3))
    out[0] = (x, y, z)
    h2, h6 = 0.5 * h, h / 6.0
    k = 1
    for i in range(1, n + 1):
        a1 = sigma * (y - x)
        b1 = x * (rho - z) - y
        c1 = x * y - beta * z
        xa, ya, za = x + h2 * a1, y + h2 * b1, z + h2 * c1
        a2 = sigma * (ya - xa)
        b2 = xa * (rho - za) - ya
        c2 = xa * ya - beta * za
        xa, ya, za = x + h2 * a2, y + h2 * b2, z + h2 * c2
        a3 = sigma * (ya - xa)
        b3 = xa * (rho - za) - ya
        c3 = xa * ya - beta * za
        xa, ya, za = x + h * a3, y + h * b3, z + h * c3
        a4 = sigma * (ya - xa)
        b4 = xa * (rho - za) - ya
        c4 = xa * ya - beta * za
        x += h6 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        y += h6 * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
        z += h6 * (c1 + 2.0 * c2 + 2.0 * c3 + c4)
        if rng is not None:
            w = rng.standard_normal(3) * noise_std * sq
            x += w[0]
            y += w[1]
            z += w[2]
        # comparisons are False for NaN, so test the negation
        if not (abs(x) <= OVERFLOW_GUARD and abs(y) <= OVERFLOW_GUARD and abs(z) <= OVERFLOW_GUARD):
            raise BlowUpError(t0 + i * h)
        if i % sample_every == 0:
            out[k] = (x, y, z)
            k += 1
    return out


def integrate_ode(rhs, state, p, t0, t1, dt, noise: ProcessNoiseSpec | None = None,
                  sample_every=1):
    """Fixed-step RK4 from ``t0`` to ``t1``.

    Args:
        rhs: registry name (``"lorenz"``) or callable ``f(state, p)``.
        state: initial state, optionally with leading batch axes.
        p: parameters understood by ``rhs``.
        dt: nominal step; it is shrunk slightly so that ``t1`` is hit exactly.
        noise: additive model error applied after each step, scaled by sqrt(dt).
        sample_every: keep every k-th step in the returned trajectory.

    Returns:
        ``Trajectory`` whose states have shape ``(n_samples,) + state.shape``.

    Raises:
        BlowUpError: any component exceeded the overflow guard (or became NaN).
    """
    n, h = _n_steps(t0, t1, dt)
    sample_every = int(sample_every)
    if sample_every < 1:
        raise PreconditionError("sample_every must be >= 1")
    x = np.array(state, dtype=np.float64)
    _check_finite(x, "initial state")
    noise = noise or ProcessNoiseSpec()
    rng = make_rng(noise.seed) if noise.active else None
    times = t0 + h * np.arange(0, n + 1, sample_every)

    if rhs == "lorenz" and x.shape == (3,) and all(np.ndim(v) == 0 for v in _lorenz_params(p)):
        states = _lorenz_scalar_path(x, p, t0, n, h, sample_every,
                                     np.broadcast_to(noise.stddev, (3,)), rng)
        return Trajectory(times, states)

    f = RHS_REGISTRY[rhs] if isinstance(rhs, str) else rhs
    std = np.asarray(noise.stddev, dtype=float)
    out = [x.copy()]
    for i in range(1, n + 1):
        k1 = f(x, p)
        k2 = f(x + 0.5 * h * k1, p)
        k3 = f(x + 0.5 * h * k2, p)
        k4 = f(x + h * k3, p)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if rng is not None:
            x = x + rng.standard_normal(x.shape) * std * math.sqrt(h)
        if not np.all(np.abs(x) <= OVERFLOW_GUARD):
            raise BlowUpError(t0 + i * h)
        if i % sample_every == 0:
            out.append(x.copy())
    return Trajectory(times, np.array(out))


# ---------------------------------------------------------------------------
# viscous Burgers, periodic finite volume


def burgers_cfl_limit(umax, dx, nu):
    """Largest step allowed by the advective and diffusive bounds."""
    limits = [math.inf]
    if umax > 0:
        limits.append(0.5 * dx / umax)
    if nu > 0:
        limits.append(0.25 * dx * dx / nu)
    return min(limits)


def burgers_update(u, dx, nu, dt):
    """One explicit step on an array whose last axis is a periodic grid.

    Local Lax-Friedrichs flux for u^2/2 plus central diffusion.
    """
    if nu < 0:
        raise PreconditionError(f"viscosity must be non-negative, got {nu}")
    umax = float(np.max(np.abs(u))) if u.size else 0.0
    if umax > 0 and dt > 0.5 * dx / umax * (1 + 1e-12):
        raise PreconditionError(
            f"advective CFL violated: dt={dt:.6g} > 0.5*dx/max|u|={0.5 * dx / umax:.6g}"
        )
    if nu > 0 and dt > 0.25 * dx * dx / nu * (1 + 1e-12):
        raise PreconditionError(
            f"diffusive CFL violated: dt={dt:.6g} > 0.25*dx^2/nu={0.25 * dx * dx / nu:.6g}"
        )
    ur = np.roll(u, -1, axis=-1)
    a = np.maximum(np.abs(u), np.abs(ur))
    flux = 0.25 * (u * u + ur * ur) - 0.5 * a * (ur - u)
    ul = np.roll(u, 1, axis=-1)
    div = flux - np.roll(flux, 1, axis=-1)
    return u - (dt / dx) * div + (nu * dt / (dx * dx)) * (ur - 2.0 * u + ul)


def burgers_step(u: Field1D, nu, dt) -> Field1D:
    if not u.grid.periodic:
        raise PreconditionError("burgers_step requires a periodic grid")
    return u.with_values(burgers_update(u.values, u.grid.dx, nu, dt))


# ---------------------------------------------------------------------------
# level sets


def _one_sided(g, axis, dx, periodic):
    """Backward and forward differences along ``axis``.

    Non-periodic edges use linearly extrapolated ghost values, which keeps
    a signed distance function's slope at the boundary.
    """
    if periodic:
        dm = (g - np.roll(g, 1, axis=axis)) / dx
        dp = (np.roll(g, -1, axis=axis) - g) / dx
        return dm, dp
    n = g.shape[axis]
    first = np.take(g, [0], axis=axis)
    second = np.take(g, [1], axis=axis)
    last = np.take(g, [n - 1], axis=axis)
    before_last = np.take(g, [n - 2], axis=axis)
    padded = np.concatenate([2 * first - second, g, 2 * last - before_last], axis=axis)
    d = np.diff(padded, axis=axis) / dx
    dm = np.take(d, range(0, n), axis=axis)
    dp = np.take(d, range(1, n + 1), axis=axis)
    return dm, dp


def _field_axes(G):
    # ordered (x, y) so velocity components (ux, uy) line up
    if isinstance(G, Field2D):
        return [(-1, G.gridx), (-2, G.gridy)]
    return [(-1, G.grid)]


def levelset_update(values, grids, velocity, sL, dt):
    """One upwind step of G_t + u.grad(G) = sL |grad(G)| on arrays.

    Args:
        values: G with the spatial axes last (batch axes allowed in front).
        grids: ``[(axis, Grid1D), ...]`` describing each spatial axis.
        velocity: one array (or scalar) per spatial axis, broadcastable to ``values``.
        sL: flame speed, scalar or broadcastable array, non-negative.
    """
    sL = np.asarray(sL, dtype=float)
    if np.any(sL < 0):
        raise PreconditionError("flame speed must be non-negative")
    dxmin = min(g.dx for _, g in grids)
    speed = np.sqrt(sum(np.asarray(v, dtype=float) ** 2 for v in velocity))
    bound = dt * (float(np.max(speed)) + float(np.max(sL)))
    if bound > 0.5 * dxmin * (1 + 1e-12):
        raise PreconditionError(
            f"level-set CFL violated: dt*(max|u|+sL)={bound:.6g} > 0.5*dx={0.5 * dxmin:.6g}"
        )
    advect = 0.0
    grad2 = 0.0
    for (axis, grid), vel in zip(grids, velocity):
        dm, dp = _one_sided(values, axis, grid.dx, grid.periodic)
        vel = np.asarray(vel, dtype=float)
        advect = advect + np.maximum(vel, 0.0) * dm + np.minimum(vel, 0.0) * dp
        # Godunov gradient for the concave Hamiltonian -sL|p|
        grad2 = grad2 + np.minimum(dm, 0.0) ** 2 + np.maximum(dp, 0.0) ** 2
    return values + dt * (sL * np.sqrt(grad2) - advect)


def levelset_step(G, velocity, sL, dt):
    """Advance a level-set field one step.

    ``velocity`` is a scalar/array for 1D fields and a pair ``(ux, uy)`` for 2D.
    The burnt side is ``G > 0``; with ``sL > 0`` it grows along its normal.
    """
    axes = _field_axes(G)
    if len(axes) == 1 and not isinstance(velocity, (tuple, list)):
        velocity = (velocity,)
    if len(velocity) != len(axes):
        raise PreconditionError(f"need {len(axes)} velocity components, got {len(velocity)}")
    return G.with_values(levelset_update(G.values, axes, velocity, sL, dt))


def godunov_gradient_norm(values, grids, sign):
    """|grad G| with upwinding chosen by ``sign`` (Sussman redistancing)."""
    g2 = 0.0
    for axis, grid in grids:
        dm, dp = _one_sided(values, axis, grid.dx, grid.periodic)
        pos = np.maximum(np.maximum(dm, 0.0) ** 2, np.minimum(dp, 0.0) ** 2)
        neg = np.maximum(np.minimum(dm, 0.0) ** 2, np.maximum(dp, 0.0) ** 2)
        g2 = g2 + np.where(sign >= 0, pos, neg)
    return np.sqrt(g2)


def _residual_mask(values, grids, band):
    mask = np.abs(values) > band
    for axis, grid in grids:
        if not grid.periodic:
            idx = [slice(None)] * values.ndim
            idx[axis] = [0, grid.n - 1]
            mask[tuple(idx)] = False
    return mask


def reinitialize(G, iterations=100, band_cells=2.0):
    """Drive G toward a signed distance function, keeping its zero level.

    Iterates G_tau = S(G0)(1 - |grad G|) with a smoothed sign S and a
    Godunov gradient. Returns ``(field, residual)`` where the residual is
    max| |grad G| - 1 | over cells farther than ``band_cells`` cells from
    the interface (and off non-periodic boundaries).
    """
    grids = _field_axes(G)
    g0 = G.values
    dxmin = min(g.dx for _, g in grids)
    sign = g0 / np.sqrt(g0 * g0 + dxmin * dxmin)
    dtau = 0.5 * dxmin / math.sqrt(len(grids))
    g = g0.copy()
    for _ in range(int(iterations)):
        g = g - dtau * sign * (godunov_gradient_norm(g, grids, sign) - 1.0)
    grad = godunov_gradient_norm(g, grids, sign)
    mask = _residual_mask(g, grids, band_cells * dxmin)
    residual = float(np.max(np.abs(grad[mask] - 1.0))) if np.any(mask) else 0.0
    return G.with_values(g), residual


def reinit_residual(G, band_cells=2.0):
    grids = _field_axes(G)
    dxmin = min(g.dx for _, g in grids)
    grad = godunov_gradient_norm(G.values, grids, np.sign(G.values))
    mask = _residual_mask(G.values, grids, band_cells * dxmin)
    return float(np.max(np.abs(grad[mask] - 1.0))) if np.any(mask) else 0.0
