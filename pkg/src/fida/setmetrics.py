"""Distances between finite point sets of possibly different cardinality."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DomainError, EmptySetError, KindMismatchError
from .features import FeatureSet

METRIC_KINDS = ("hausdorff", "chamfer", "ospa")


@dataclass(frozen=True)
class MetricSpec:
    kind: str = "ospa"
    cutoff: float = 1.0
    order: float = 2.0
    value_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise DomainError(f"unknown metric {self.kind!r}")
        if not self.cutoff > 0:
            raise DomainError("OSPA cutoff must be positive")
        if not self.order >= 1:
            raise DomainError("OSPA order must be >= 1")
        if self.value_weight < 0:
            raise DomainError("value weight must be non-negative")

    @classmethod
    def default_for(cls, domain, kind="ospa", value_range=None):
        """Defaults: cutoff a quarter of the domain length, order 2, and a
        value weight that makes one value-range unit cost one domain length."""
        length = _domain_length(domain)
        weight = 1.0
        if value_range:
            weight = length / value_range
        return cls(kind, 0.25 * length, 2.0, weight)


def _domain_length(domain):
    if domain is None:
        return 1.0
    if isinstance(domain[0], (tuple, list)):
        return float(max(hi - lo for lo, hi in domain))
    return float(domain[1] - domain[0])


def as_points(fs: FeatureSet, value_weight=1.0):
    """Embed a FeatureSet as an ``(m, d)`` array for Euclidean distances."""
    locs = fs.locs.reshape(len(fs), fs.dim)
    if fs.values is not None:
        return np.column_stack([locs, value_weight * fs.values])
    return locs


def pairwise(P, Q):
    P = np.asarray(P, dtype=float).reshape(len(P), -1)
    Q = np.asarray(Q, dtype=float).reshape(len(Q), -1)
    return np.sqrt(((P[:, None, :] - Q[None, :, :]) ** 2).sum(axis=-1))


def hausdorff_points(P, Q):
    if len(P) == 0 or len(Q) == 0:
        raise EmptySetError("Hausdorff distance is undefined for an empty set")
    D = pairwise(P, Q)
    return float(max(D.min(axis=1).max(), D.min(axis=0).max()))


def chamfer_points(P, Q):
    if len(P) == 0 or len(Q) == 0:
        raise EmptySetError("chamfer distance is undefined for an empty set")
    D = pairwise(P, Q)
    return float(0.5 * (D.min(axis=1).mean() + D.min(axis=0).mean()))


def ospa_points(P, Q, cutoff=1.0, order=2.0):
    m, n = len(P), len(Q)
    if m == 0 and n == 0:
        return 0.0
    if m > n:
        P, Q, m, n = Q, P, n, m
    if m == 0:
        return float(cutoff)
    C = np.minimum(pairwise(P, Q), cutoff) ** order
    rows, cols = linear_sum_assignment(C)
    total = C[rows, cols].sum() + cutoff ** order * (n - m)
    return float(min(cutoff, (total / n) ** (1.0 / order)))


def _check_kinds(A: FeatureSet, B: FeatureSet):
    if A.kind != B.kind:
        raise KindMismatchError(f"cannot compare {A.kind} with {B.kind} features")


def hausdorff(A: FeatureSet, B: FeatureSet, spec: MetricSpec | None = None):
    spec = spec or MetricSpec("hausdorff")
    _check_kinds(A, B)
    return hausdorff_points(as_points(A, spec.value_weight), as_points(B, spec.value_weight))


def chamfer(A: FeatureSet, B: FeatureSet, spec: MetricSpec | None = None):
    spec = spec or MetricSpec("chamfer")
    _check_kinds(A, B)
    return chamfer_points(as_points(A, spec.value_weight), as_points(B, spec.value_weight))


def ospa(A: FeatureSet, B: FeatureSet, spec: MetricSpec | None = None):
    """Optimal subpattern assignment distance, in [0, cutoff].

    Sets are padded with cutoff-cost dummies to equal size; the optimal
    matching comes from the Hungarian algorithm. Two empty sets are at
    distance 0, an empty and a non-empty one at the cutoff.
    """
    spec = spec or MetricSpec("ospa")
    _check_kinds(A, B)
    return ospa_points(as_points(A, spec.value_weight), as_points(B, spec.value_weight),
                       spec.cutoff, spec.order)


_DISPATCH = {"hausdorff": hausdorff, "chamfer": chamfer, "ospa": ospa}


def distance(A: FeatureSet, B: FeatureSet, spec: MetricSpec):
    return _DISPATCH[spec.kind](A, B, spec)


def cloud_distance(P, Q, spec: MetricSpec):
    """Same metrics on raw ``(m, d)`` point clouds."""
    if spec.kind == "hausdorff":
        return hausdorff_points(P, Q)
    if spec.kind == "chamfer":
        return chamfer_points(P, Q)
    return ospa_points(P, Q, spec.cutoff, spec.order)
