import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fida.errors import DomainError, EmptySetError, KindMismatchError
from fida.features import FeatureNoiseSpec, FeatureSet, corrupt
from fida.setmetrics import (
    MetricSpec,
    chamfer,
    cloud_distance,
    distance,
    hausdorff,
    ospa,
    ospa_points,
)

from oracles import brute_hausdorff, brute_ospa


def fs(*locs, kind="front"):
    return FeatureSet(kind, list(locs))


def random_set(rng, max_size=12, allow_empty=True, values=False):
    m = int(rng.integers(0 if allow_empty else 1, max_size + 1))
    locs = rng.uniform(0.0, 1.0, m)
    if values:
        return FeatureSet("peaks", locs, rng.uniform(-1, 1, m))
    return FeatureSet("front", locs)


SPEC = MetricSpec("ospa", cutoff=0.3, order=2.0)


def test_hausdorff_examples():
    assert hausdorff(fs(0.1, 0.4), fs(0.1, 0.4)) == 0.0
    assert hausdorff(fs(0.0), fs(1.0)) == 1.0
    assert hausdorff(fs(0.0, 1.0), fs(0.4)) == pytest.approx(0.6, abs=1e-15)
    assert brute_hausdorff([0.0, 1.0], [0.4]) == pytest.approx(0.6)


def test_chamfer_examples():
    assert chamfer(fs(0.3), fs(0.3)) == 0.0
    assert chamfer(fs(0.0), fs(1.0)) == 1.0
    assert chamfer(fs(0.0, 1.0), fs(0.4)) == pytest.approx(0.45, abs=1e-15)


def test_ospa_examples():
    assert ospa(fs(), fs()) == 0.0
    assert ospa(fs(0.0), fs(), MetricSpec("ospa", 1.0, 1.0)) == 1.0
    assert ospa(fs(0.0, 1.0), fs(0.0), MetricSpec("ospa", 0.5, 1.0)) == pytest.approx(0.25, abs=1e-15)
    assert brute_ospa([0.0, 1.0], [0.0], 0.5, 1.0) == pytest.approx(0.25)


def test_empty_operands():
    for metric in (hausdorff, chamfer):
        with pytest.raises(EmptySetError):
            metric(fs(0.0), fs())
        with pytest.raises(EmptySetError):
            metric(fs(), fs())


def test_kind_mismatch():
    with pytest.raises(KindMismatchError):
        ospa(fs(0.1), FeatureSet("peaks", [0.1], [1.0]))


def test_spec_validation():
    with pytest.raises(DomainError):
        MetricSpec("ospa", cutoff=0.0)
    with pytest.raises(DomainError):
        MetricSpec("ospa", order=0.5)
    with pytest.raises(DomainError):
        MetricSpec("wasserstein")
    with pytest.raises(DomainError):
        MetricSpec(value_weight=-1.0)


def test_default_spec():
    spec = MetricSpec.default_for((0.0, 4.0), value_range=2.0)
    assert (spec.kind, spec.cutoff, spec.order, spec.value_weight) == ("ospa", 1.0, 2.0, 2.0)


def test_value_weight_enters_point_distance():
    A = FeatureSet("peaks", [0.0], [0.0])
    B = FeatureSet("peaks", [0.3], [0.4])
    assert hausdorff(A, B, MetricSpec("hausdorff", value_weight=1.0)) == pytest.approx(0.5)
    assert hausdorff(A, B, MetricSpec("hausdorff", value_weight=0.0)) == pytest.approx(0.3)
    assert hausdorff(A, B, MetricSpec("hausdorff", value_weight=2.0)) == pytest.approx(np.hypot(0.3, 0.8))


def test_2d_points():
    A = FeatureSet("level", [[0.0, 0.0], [1.0, 1.0]])
    B = FeatureSet("level", [[0.0, 1.0]])
    assert hausdorff(A, B) == pytest.approx(1.0)
    assert ospa(A, B, MetricSpec("ospa", 2.0, 1.0)) == pytest.approx(1.5)


def test_distance_dispatch_and_clouds():
    A, B = fs(0.0, 1.0), fs(0.4)
    assert distance(A, B, MetricSpec("chamfer")) == pytest.approx(0.45)
    P = np.array([[0.0, 0.0], [1.0, 0.0]])
    Q = np.array([[0.0, 0.0]])
    assert cloud_distance(P, Q, MetricSpec("hausdorff")) == pytest.approx(1.0)


def check_axioms(n_pairs=1000, seed=0):
    """Symmetry, identity, triangle inequality and ospa <= c on random sets."""
    rng = np.random.default_rng(seed)
    specs = [MetricSpec(k, cutoff=0.3, order=p) for k in ("hausdorff", "chamfer", "ospa")
             for p in (1.0, 2.0)]
    for _ in range(n_pairs):
        values = bool(rng.integers(2))
        A, B, C = (random_set(rng, values=values) for _ in range(3))
        for spec in specs:
            nonempty = len(A) and len(B) and len(C)
            if spec.kind != "ospa" and not nonempty:
                continue
            dab, dba = distance(A, B, spec), distance(B, A, spec)
            assert abs(dab - dba) <= 1e-12
            assert distance(A, A, spec) <= 1e-12
            if spec.kind == "ospa":
                assert 0.0 <= dab <= spec.cutoff + 1e-15
            if spec.kind in ("hausdorff", "ospa"):
                dac, dcb = distance(A, C, spec), distance(C, B, spec)
                assert dab <= dac + dcb + 1e-12


def check_ospa_brute_force(n=300, seed=1):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        P = rng.uniform(0, 1, (int(rng.integers(0, 7)), 2))
        Q = rng.uniform(0, 1, (int(rng.integers(0, 7)), 2))
        c, p = float(rng.uniform(0.05, 1.5)), float(rng.choice([1.0, 2.0, 3.0]))
        assert abs(ospa_points(P, Q, c, p) - brute_ospa(P, Q, c, p)) <= 1e-12


def test_metric_axioms_randomized():
    check_axioms(300, seed=11)


def test_ospa_matches_brute_force():
    check_ospa_brute_force(200, seed=12)


def test_ospa_equal_cardinality_is_p_mean_of_assignment():
    rng = np.random.default_rng(5)
    for _ in range(50):
        P = rng.uniform(0, 0.1, 5)
        Q = P + rng.uniform(-0.01, 0.01, 5)
        d = ospa_points(P, Q, cutoff=1.0, order=2.0)
        assert d == pytest.approx(np.sqrt(np.mean((np.sort(P) - np.sort(Q)) ** 2)), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), max_size=6), st.lists(st.floats(0, 1), max_size=6),
       st.floats(0.01, 2.0), st.sampled_from([1.0, 2.0]))
def test_ospa_bounded_and_symmetric_property(a, b, c, p):
    A, B = FeatureSet("front", a), FeatureSet("front", b)
    spec = MetricSpec("ospa", c, p)
    d = ospa(A, B, spec)
    assert 0.0 <= d <= c + 1e-15
    assert d == pytest.approx(ospa(B, A, spec), abs=1e-12)
    assert d == pytest.approx(brute_ospa(A.locs, B.locs, c, p), abs=1e-12)


def test_ospa_grows_with_jitter():
    A = FeatureSet("front", np.linspace(0.1, 0.9, 6), domain=(0.0, 1.0))
    spec = MetricSpec("ospa", 0.25, 2.0)
    means = []
    for sd in (0.005, 0.02, 0.06):
        reps = [ospa(A, corrupt(A, FeatureNoiseSpec(sd, seed=s)), spec) for s in range(200)]
        means.append(np.mean(reps))
    assert means[0] < means[1] < means[2]
