import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fida.errors import BlowUpError, DomainError, PreconditionError
from fida.models import (
    LORENZ_DEFAULTS,
    Field1D,
    Field2D,
    Grid1D,
    ParameterVector,
    ProcessNoiseSpec,
    burgers_step,
    field_from_json,
    integrate_ode,
    levelset_step,
    lorenz_rhs,
    make_rng,
    reinit_residual,
    reinitialize,
)

from oracles import dopri, lorenz

P = LORENZ_DEFAULTS


def crossings(x, g):
    """Zero crossings of g on x by linear interpolation (test-local)."""
    a, b = g[:-1], g[1:]
    i = np.nonzero(((a <= 0) & (b > 0)) | ((a > 0) & (b <= 0)))[0]
    return x[i] - g[i] * (x[i + 1] - x[i]) / (g[i + 1] - g[i])


# lorenz ---------------------------------------------------------------------


def test_rhs_origin_is_equilibrium():
    for p in (P, {"sigma": 3.0, "rho": -1.0, "beta": 0.5}):
        assert np.array_equal(lorenz_rhs((0.0, 0.0, 0.0), p), [0.0, 0.0, 0.0])


def test_rhs_fixed_point_c_plus():
    b, r = P["beta"], P["rho"]
    c = math.sqrt(b * (r - 1))
    np.testing.assert_allclose(lorenz_rhs((c, c, r - 1), P), 0.0, atol=1e-12)


def test_rhs_direct_substitution():
    np.testing.assert_allclose(lorenz_rhs((1.0, 1.0, 1.0), P), [0.0, 26.0, 1 - 8 / 3], atol=1e-15)


def test_rhs_rejects_non_finite():
    with pytest.raises(DomainError):
        lorenz_rhs((np.nan, 0.0, 0.0), P)
    with pytest.raises(DomainError):
        lorenz_rhs((0.0, 0.0, 0.0), dict(P, rho=np.inf))


def test_rhs_batch_matches_single():
    rng = np.random.default_rng(0)
    S = rng.normal(size=(5, 3)) * 10
    batch = lorenz_rhs(S, P)
    for i in range(5):
        np.testing.assert_array_equal(batch[i], lorenz_rhs(S[i], P))


def test_zero_state_stays_zero():
    traj = integrate_ode("lorenz", (0.0, 0.0, 0.0), P, 0.0, 1.0, 1e-3)
    assert np.all(traj.states == 0.0)
    assert traj.t[-1] == 1.0


def test_rk4_matches_adaptive_oracle():
    traj = integrate_ode("lorenz", (1.0, 1.0, 1.0), P, 0.0, 0.01, 1e-3)
    ref = dopri(lorenz(), (1.0, 1.0, 1.0), 0.0, 0.01, tol=1e-12)
    np.testing.assert_allclose(traj.states[-1], ref, rtol=0, atol=1e-8)


def test_rk4_converges_fourth_order():
    ref = dopri(lorenz(), (1.0, 1.0, 1.0), 0.0, 0.5, tol=1e-13)
    errs = [np.max(np.abs(integrate_ode("lorenz", (1.0, 1.0, 1.0), P, 0.0, 0.5, h).states[-1] - ref))
            for h in (4e-3, 2e-3)]
    assert 12 < errs[0] / errs[1] < 20


def test_fast_path_equals_generic_path():
    a = integrate_ode("lorenz", (1.0, 2.0, 3.0), P, 0.0, 2.0, 1e-3)
    b = integrate_ode(lorenz_rhs, (1.0, 2.0, 3.0), P, 0.0, 2.0, 1e-3)
    np.testing.assert_array_equal(a.states, b.states)
    batch = integrate_ode("lorenz", [(1.0, 2.0, 3.0), (0.5, 0.1, 9.0)], P, 0.0, 2.0, 1e-3)
    np.testing.assert_array_equal(batch.states[:, 0], a.states)


def test_noisy_run_is_seed_deterministic():
    noise = ProcessNoiseSpec(0.5, seed=7)
    a = integrate_ode("lorenz", (1.0, 1.0, 1.0), P, 0.0, 5.0, 1e-3, noise)
    b = integrate_ode("lorenz", (1.0, 1.0, 1.0), P, 0.0, 5.0, 1e-3, noise)
    c = integrate_ode("lorenz", (1.0, 1.0, 1.0), P, 0.0, 5.0, 1e-3, ProcessNoiseSpec(0.5, seed=8))
    np.testing.assert_array_equal(a.states, b.states)
    assert not np.array_equal(a.states, c.states)


def test_noise_scales_with_sqrt_dt():
    # a zero field plus noise is a random walk with variance std^2 * t
    noise = ProcessNoiseSpec(2.0, seed=3)
    x0 = np.zeros((2000, 3))
    traj = integrate_ode(lambda s, p: np.zeros_like(s), x0, None, 0.0, 1.0, 1e-2, noise)
    assert abs(traj.states[-1].var() - 4.0) < 0.3


def test_sample_every():
    traj = integrate_ode("lorenz", (1.0, 1.0, 1.0), P, 0.0, 1.0, 1e-3, sample_every=10)
    full = integrate_ode("lorenz", (1.0, 1.0, 1.0), P, 0.0, 1.0, 1e-3)
    assert traj.t.size == 101
    np.testing.assert_array_equal(traj.states, full.states[::10])


def test_blow_up_reports_time():
    with pytest.raises(BlowUpError) as err:
        integrate_ode("lorenz", (1.0, 1.0, 1.0), dict(P, beta=-5.0), 0.0, 100.0, 1e-3)
    assert 0.0 < err.value.time < 100.0


def test_bad_time_arguments():
    with pytest.raises(PreconditionError):
        integrate_ode("lorenz", (1.0, 1.0, 1.0), P, 1.0, 0.0, 1e-3)
    with pytest.raises(PreconditionError):
        integrate_ode("lorenz", (1.0, 1.0, 1.0), P, 0.0, 1.0, 0.0)


def test_rng_streams_are_independent_and_reproducible():
    a = make_rng(1, 0).standard_normal(4)
    assert np.array_equal(a, make_rng(1, 0).standard_normal(4))
    assert not np.array_equal(a, make_rng(1, 1).standard_normal(4))


def test_parameter_vector_bounds():
    pv = ParameterVector.from_values({"rho": 28.0}, {"rho": (20.0, 30.0)})
    assert pv["rho"] == 28.0
    assert pv.bounds("rho") == (20.0, 30.0)
    with pytest.raises(DomainError):
        ParameterVector.from_values({"rho": 40.0}, {"rho": (20.0, 30.0)})


# burgers --------------------------------------------------------------------


def sine_field(n):
    g = Grid1D.uniform(0.0, 1.0, n)
    return Field1D(g, np.sin(2 * np.pi * g.x))


def run_burgers(f, nu, dt, steps):
    for _ in range(steps):
        f = burgers_step(f, nu, dt)
    return f


def test_constant_field_is_exact():
    g = Grid1D.uniform(0.0, 1.0, 64)
    f = Field1D(g, np.full(64, 0.7))
    out = run_burgers(f, 1e-3, 1e-3, 50)
    np.testing.assert_allclose(out.values, 0.7, rtol=0, atol=1e-14)


def test_burgers_mass_and_maximum_principle():
    f0 = sine_field(256)
    f = f0
    lo, hi = f0.values.min(), f0.values.max()
    for _ in range(1000):
        f = burgers_step(f, 1e-3, 1e-3)
        assert lo - 1e-9 <= f.values.min() and f.values.max() <= hi + 1e-9
    assert abs(f.values.sum() - f0.values.sum()) * f.grid.dx <= 1e-12


def test_burgers_cfl_errors_name_the_bound():
    f = sine_field(64)
    with pytest.raises(PreconditionError, match="advective"):
        burgers_step(f, 0.0, 0.1)
    with pytest.raises(PreconditionError, match="diffusive"):
        burgers_step(f, 1.0, 1e-3)
    g = Grid1D.uniform(0.0, 1.0, 64, periodic=False)
    with pytest.raises(PreconditionError):
        burgers_step(Field1D(g, np.zeros(64)), 0.0, 1e-3)


def test_burgers_is_pure():
    f = sine_field(128)
    a = run_burgers(f, 1e-3, 1e-3, 20)
    b = run_burgers(f, 1e-3, 1e-3, 20)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(f.values, sine_field(128).values)


@pytest.fixture(scope="module")
def burgers_convergence():
    """n=512 solution and the same scheme at 16x resolution, both at t=0.5."""
    dx = 1.0 / 8192
    dt_f = 0.9 * min(0.5 * dx, 0.25 * dx * dx / 1e-3)
    fine = sine_field(8192)
    steps_f = int(math.ceil(0.5 / dt_f))
    fine = run_burgers(fine, 1e-3, 0.5 / steps_f, steps_f)
    coarse = run_burgers(sine_field(512), 1e-3, 0.5 / 1000, 1000)
    ref = fine.values.reshape(512, 16).mean(axis=1)
    return coarse.values, ref


@pytest.mark.xfail(strict=True, reason="first-order scheme smears the shock over several "
                   "coarse cells; the max-norm gap at the shock is about 0.2")
def test_burgers_max_norm_against_fine_reference(burgers_convergence):
    coarse, ref = burgers_convergence
    assert np.max(np.abs(coarse - ref)) <= 1e-2


def test_burgers_l1_and_smooth_region_against_fine_reference(burgers_convergence):
    coarse, ref = burgers_convergence
    err = np.abs(coarse - ref)
    assert err.mean() <= 1e-2
    x = Grid1D.uniform(0.0, 1.0, 512).x
    away = np.abs(x - 0.5) > 0.05
    assert err[away].max() <= 2e-2


# level sets -----------------------------------------------------------------


def test_levelset_identity():
    g = Grid1D.uniform(0.0, 1.0, 50, periodic=False)
    G = Field1D(g, np.cos(3 * g.x))
    out = levelset_step(G, 0.0, 0.0, 1e-2)
    np.testing.assert_array_equal(out.values, G.values)


@pytest.mark.parametrize("c", [0.3, -0.3])
def test_levelset_pure_advection_drift(c):
    g = Grid1D.uniform(0.0, 1.0, 400, periodic=True)
    G = Field1D(g, np.tanh((0.12 - np.abs(g.x - 0.5)) / 0.05))
    dt = 0.5 * g.dx / abs(c)
    x0 = crossings(g.x, G.values)
    for _ in range(100):
        G = levelset_step(G, c, 0.0, dt)
    moved = crossings(g.x, G.values) - x0
    assert np.all(np.abs(moved - 100 * c * dt) <= g.dx)


def test_levelset_normal_propagation():
    g = Grid1D.uniform(0.0, 1.0, 200, periodic=False)
    G = Field1D(g, 0.1 - np.abs(g.x - 0.5))
    s, dt = 0.2, 0.01
    for _ in range(50):
        G = levelset_step(G, 0.0, s, dt)
    left, right = crossings(g.x, G.values)
    assert abs(left - (0.4 - s * 0.5)) <= g.dx
    assert abs(right - (0.6 + s * 0.5)) <= g.dx


def test_levelset_2d_advection():
    gx = Grid1D.uniform(0.0, 1.0, 100)
    gy = Grid1D.uniform(0.0, 1.0, 100)
    X, Y = np.meshgrid(gx.x, gy.x)
    G = Field2D(gx, gy, 0.2 - np.hypot(X - 0.5, Y - 0.5))
    dt = 0.5 * gx.dx / 0.5
    for _ in range(40):
        G = levelset_step(G, (0.3, 0.4), 0.0, dt)
    row = G.values[int(round((0.5 + 0.4 * 40 * dt) / gy.dx))]
    xc = crossings(gx.x, row)
    assert abs(xc.mean() - (0.5 + 0.3 * 40 * dt)) <= 2 * gx.dx


def test_levelset_cfl_error():
    g = Grid1D.uniform(0.0, 1.0, 100, periodic=False)
    G = Field1D(g, 0.5 - g.x)
    with pytest.raises(PreconditionError, match="CFL"):
        levelset_step(G, 1.0, 1.0, 0.01)
    with pytest.raises(PreconditionError):
        levelset_step(G, 0.0, -1.0, 1e-4)


def test_reinitialize_fixed_point():
    g = Grid1D.uniform(0.0, 1.0, 201, periodic=False)
    G = Field1D(g, 0.437 - g.x)
    out, residual = reinitialize(G, 50)
    assert residual < 1e-6
    assert abs(crossings(g.x, out.values)[0] - 0.437) < 1e-9


def test_reinitialize_scaled_distance_1d():
    g = Grid1D.uniform(0.0, 1.0, 201, periodic=False)
    G = Field1D(g, 2.0 * (0.437 - g.x))
    out, residual = reinitialize(G, 400)
    assert residual < 0.05
    assert abs(crossings(g.x, out.values)[0] - 0.437) < g.dx
    analytic = 0.437 - g.x
    far = np.abs(analytic) > 2 * g.dx
    assert np.max(np.abs(out.values[far] - analytic[far])) < g.dx


def test_reinitialize_scaled_circle_2d():
    gx = Grid1D.uniform(0.0, 1.0, 64, periodic=False)
    X, Y = np.meshgrid(gx.x, gx.x)
    r = np.hypot(X - 0.5, Y - 0.5)
    G = Field2D(gx, gx, 3.0 * (r - 0.25))
    out, residual = reinitialize(G, 300)
    assert residual < 0.05
    assert reinit_residual(out) < 0.05


# field files ----------------------------------------------------------------


def test_field_json_round_trip():
    g = Grid1D.uniform(-1.0, 2.0, 30, periodic=False)
    f = Field1D(g, np.linspace(0, 1, 30))
    back = field_from_json(json.loads(json.dumps(f.to_json())))
    assert back.grid == g
    np.testing.assert_array_equal(back.values, f.values)
    d = f.to_json()
    assert set(d) == {"grid", "values"}
    assert set(d["grid"]) == {"x0", "dx", "n", "periodic"}


def test_field2d_json_round_trip():
    gx = Grid1D.uniform(0.0, 1.0, 4)
    gy = Grid1D.uniform(0.0, 2.0, 3)
    f = Field2D(gx, gy, np.arange(12.0).reshape(3, 4))
    d = json.loads(json.dumps(f.to_json()))
    assert "gridy" in d and len(d["values"]) == 12
    back = field_from_json(d)
    np.testing.assert_array_equal(back.values, f.values)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 40))
def test_forward_backward_reversibility_property(x, y, z):
    x0 = np.array([x, y, z])
    fwd = integrate_ode("lorenz", x0, P, 0.0, 0.2, 1e-3)
    back = integrate_ode(lambda s, p: -lorenz_rhs(s, p), fwd.states[-1], P, 0.0, 0.2, 1e-3)
    np.testing.assert_allclose(back.states[-1], x0, atol=1e-6)
