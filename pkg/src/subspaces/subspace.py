"""Lines, quadratic Bezier curves and simplexes of parameter vectors.

Every parameterization here is a combination ``sum_i c_i(coord) * w_i`` that is
linear in the endpoints, so evaluation and gradient routing share one set of
coefficients:

=========  ===========================================  ===================
kind       coefficients                                  domain
=========  ===========================================  ===================
line       (1 - a, a)                                    a in [0, 1]
bezier     ((1 - a)^2, a^2, 2 a (1 - a))                 a in [0, 1]
simplex    (w_1, ..., w_m)                               w on the simplex
=========  ===========================================  ===================

The Bezier control point is stored last, after the two curve endpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, InputError, NumericError
from .nn import NetworkSpec, ParamVector, init_params, linear_combination

SIMPLEX_TOL = 1e-12


@dataclass(frozen=True)
class Kind:
    name: str
    m: int

    def __post_init__(self):
        expected = {"line": 2, "bezier": 3}
        if self.name in expected:
            if self.m != expected[self.name]:
                raise ConfigError(f"{self.name} has {expected[self.name]} parameter sets, not {self.m}")
        elif self.name == "simplex":
            if self.m < 1:
                raise ConfigError("a simplex needs at least one endpoint")
        else:
            raise ConfigError(f"unknown subspace kind {self.name!r}")

    @property
    def scalar(self) -> bool:
        return self.name != "simplex"

    def __str__(self) -> str:
        return self.name if self.scalar else f"simplex:{self.m}"


LINE = Kind("line", 2)
BEZIER = Kind("bezier", 3)


def simplex(m: int) -> Kind:
    return Kind("simplex", m)


def parse_kind(text: str, m: int | None = None) -> Kind:
    """Parse ``line``, ``bezier``, ``simplex:4`` (or ``simplex`` plus ``m``)."""
    name, _, count = str(text).strip().lower().partition(":")
    if name == "line":
        return LINE
    if name == "bezier":
        return BEZIER
    if name == "simplex":
        if count:
            return simplex(int(count))
        if m is None:
            raise ConfigError("simplex needs an endpoint count, e.g. 'simplex:3'")
        return simplex(int(m))
    raise ConfigError(f"unknown subspace kind {text!r}")


@dataclass(frozen=True, eq=False)
class SampleCoord:
    """A point of the subspace domain, either global or one per layer group."""

    value: object = None
    per_layer: Mapping[int, object] | None = None

    @property
    def layerwise(self) -> bool:
        return self.per_layer is not None

    @classmethod
    def of(cls, value) -> "SampleCoord":
        return cls(value=value)

    @classmethod
    def layers(cls, mapping: Mapping[int, object]) -> "SampleCoord":
        return cls(per_layer=dict(mapping))

    def to_json(self):
        def conv(v):
            return float(v) if np.ndim(v) == 0 else [float(t) for t in np.ravel(v)]

        if self.layerwise:
            return {str(k): conv(v) for k, v in sorted(self.per_layer.items())}
        return conv(self.value)


@dataclass(eq=False)
class Subspace:
    kind: Kind
    endpoints: list = field(default_factory=list)

    def __post_init__(self):
        self.endpoints = list(self.endpoints)
        if len(self.endpoints) != self.kind.m:
            raise ConfigError(f"{self.kind} needs {self.kind.m} endpoints, got {len(self.endpoints)}")
        for e in self.endpoints[1:]:
            self.endpoints[0].check_layout(e)

    @property
    def m(self) -> int:
        return self.kind.m

    @property
    def segments(self):
        return self.endpoints[0].segments

    def copy(self) -> "Subspace":
        return Subspace(self.kind, [e.copy() for e in self.endpoints])


def init_subspace(spec: NetworkSpec, kind: Kind, rng: np.random.Generator, point_init: bool = False) -> Subspace:
    """Independent Kaiming draws per endpoint, or one shared draw with ``point_init``."""
    if point_init:
        first = init_params(spec, rng)
        return Subspace(kind, [first.copy() for _ in range(kind.m)])
    return Subspace(kind, [init_params(spec, rng) for _ in range(kind.m)])


def coefficients(kind: Kind, coord, extrapolate: bool = False) -> np.ndarray:
    if kind.scalar:
        if np.ndim(coord) != 0:
            raise InputError(f"{kind} takes a scalar coordinate")
        a = float(coord)
        if not np.isfinite(a) or (not extrapolate and not 0.0 <= a <= 1.0):
            raise InputError(f"coordinate {a} outside [0, 1]")
        if kind.name == "line":
            return np.array([1.0 - a, a])
        b = 1.0 - a
        return np.array([b * b, a * a, 2.0 * a * b])
    w = np.asarray(coord, dtype=np.float64).ravel()
    if w.size != kind.m:
        raise InputError(f"{kind} takes {kind.m} weights, got {w.size}")
    if not np.all(np.isfinite(w)):
        raise InputError("simplex weights must be finite")
    if not extrapolate and (w.min() < 0.0 or abs(w.sum() - 1.0) > SIMPLEX_TOL):
        raise InputError(f"weights {w} are not on the probability simplex")
    return w.copy()


def center(kind: Kind):
    return 0.5 if kind.scalar else np.full(kind.m, 1.0 / kind.m)


def vertex(kind: Kind, i: int):
    """Coordinate of endpoint ``i`` (for a Bezier, only 0 and 1 are on the curve)."""
    if kind.scalar:
        if i not in (0, 1):
            raise InputError("only the two curve endpoints are vertices")
        return float(i)
    e = np.zeros(kind.m)
    e[i] = 1.0
    return e


def _coefficient_arrays(subspace: Subspace, coord: SampleCoord, extrapolate: bool):
    """Per-endpoint coefficients: scalars in global mode, full-length arrays per layer group otherwise."""
    if not coord.layerwise:
        return list(coefficients(subspace.kind, coord.value, extrapolate))
    groups = subspace.endpoints[0].layer_groups
    if set(coord.per_layer) != set(groups):
        raise InputError(
            f"layerwise coordinate covers layers {sorted(coord.per_layer)}, expected {sorted(groups)}"
        )
    n = len(subspace.endpoints[0])
    arrays = [np.empty(n) for _ in range(subspace.m)]
    for layer, slices in groups.items():
        cs = coefficients(subspace.kind, coord.per_layer[layer], extrapolate)
        for arr, c in zip(arrays, cs):
            for sl in slices:
                arr[sl] = c
    return arrays


def eval_point(subspace: Subspace, coord, extrapolate: bool = False) -> ParamVector:
    if not isinstance(coord, SampleCoord):
        coord = SampleCoord.of(coord)
    cs = _coefficient_arrays(subspace, coord, extrapolate)
    return linear_combination(cs, subspace.endpoints)


def sample_coord(
    kind: Kind,
    rng: np.random.Generator,
    layerwise: bool = False,
    layer_indices: Sequence[int] = (),
) -> SampleCoord:
    def draw():
        if kind.scalar:
            return float(rng.random())
        if kind.m == 1:
            return np.ones(1)
        e = rng.exponential(size=kind.m)
        return e / e.sum()

    if layerwise:
        if not layer_indices:
            raise InputError("layerwise sampling needs the layer indices")
        return SampleCoord.layers({i: draw() for i in sorted(layer_indices)})
    return SampleCoord.of(draw())


def route_gradient(subspace: Subspace, coord, grad_theta: ParamVector, extrapolate: bool = False) -> list:
    """Split the gradient at the sampled point into one gradient per endpoint."""
    if not isinstance(coord, SampleCoord):
        coord = SampleCoord.of(coord)
    subspace.endpoints[0].check_layout(grad_theta)
    cs = _coefficient_arrays(subspace, coord, extrapolate)
    return [grad_theta.with_values(c * grad_theta.values) for c in cs]


def cosine_reg(wj: ParamVector, wk: ParamVector, names=("j", "k")):
    """Squared cosine similarity over non-batch-norm coordinates and its gradients."""
    wj.check_layout(wk)
    mask = wj.reg_mask
    a = wj.values[mask]
    b = wk.values[mask]
    na = a @ a
    nb = b @ b
    for name, nrm in zip(names, (na, nb)):
        if nrm == 0.0:
            raise NumericError(f"endpoint {name} has zero norm on the regularized coordinates")
    d = a @ b
    value = d * d / (na * nb)
    scale = 2.0 * d / (na * nb)
    ga = np.zeros(len(wj))
    gb = np.zeros(len(wj))
    ga[mask] = scale * (b - (d / na) * a)
    gb[mask] = scale * (a - (d / nb) * b)
    return float(value), wj.with_values(ga), wk.with_values(gb)


def pair_sample(m: int, rng: np.random.Generator):
    """A uniformly random unordered pair of distinct endpoint indices, or None if m < 2."""
    if m < 2:
        return None
    j, k = rng.choice(m, size=2, replace=False)
    return (int(min(j, k)), int(max(j, k)))


@dataclass
class GeometryStats:
    pairwise_l2: dict
    pairwise_cos2: dict
    mean_l2: float | None = None
    mean_cos2: float | None = None

    def as_record(self) -> dict:
        rec = {}
        for (i, j), v in sorted(self.pairwise_l2.items()):
            rec[f"l2_{i}_{j}"] = v
        for (i, j), v in sorted(self.pairwise_cos2.items()):
            rec[f"cos2_{i}_{j}"] = v
        if self.mean_l2 is not None:
            rec["mean_l2"] = self.mean_l2
            rec["mean_cos2"] = self.mean_cos2
        return rec


def geometry_stats(subspace: Subspace) -> GeometryStats:
    """Pairwise L2 distance and squared cosine between endpoints, batch norm excluded.

    Pairs are keyed by 0-based endpoint indices ``(i, j)`` with ``i < j``.
    """
    mask = subspace.endpoints[0].reg_mask
    vecs = [e.values[mask] for e in subspace.endpoints]
    l2, cos2 = {}, {}
    for i in range(len(vecs)):
        for j in range(i + 1, len(vecs)):
            a, b = vecs[i], vecs[j]
            diff = a - b
            l2[(i, j)] = float(np.sqrt(diff @ diff))
            den = (a @ a) * (b @ b)
            cos2[(i, j)] = float((a @ b) ** 2 / den) if den > 0 else float("nan")
    stats = GeometryStats(l2, cos2)
    if len(vecs) > 2:
        stats.mean_l2 = float(np.mean(list(l2.values())))
        stats.mean_cos2 = float(np.mean(list(cos2.values())))
    return stats
