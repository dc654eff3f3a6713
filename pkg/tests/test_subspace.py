import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from subspaces.errors import ConfigError, InputError, NumericError
from subspaces.nn import ParamVector, backward, init_params, mlp
from subspaces.subspace import (
    BEZIER,
    LINE,
    SampleCoord,
    Subspace,
    coefficients,
    cosine_reg,
    eval_point,
    geometry_stats,
    init_subspace,
    pair_sample,
    parse_kind,
    route_gradient,
    sample_coord,
    simplex,
)

from test_nn import finite_diff, rel_err


def flat(values):
    from subspaces.experiments import flat_vector

    return flat_vector(values)


# ---- kinds and coefficients -------------------------------------------------

def test_parse_kind():
    assert parse_kind("line") == LINE
    assert parse_kind("Bezier") == BEZIER
    assert parse_kind("simplex:4") == simplex(4)
    assert parse_kind("simplex", 2) == simplex(2)
    for bad in ("plane", "simplex"):
        with pytest.raises(ConfigError):
            parse_kind(bad)


def test_coefficient_examples():
    assert coefficients(LINE, 0.0).tolist() == [1.0, 0.0]
    assert coefficients(BEZIER, 0.5).tolist() == [0.25, 0.25, 0.5]
    assert coefficients(simplex(3), [0.2, 0.3, 0.5]).tolist() == [0.2, 0.3, 0.5]


@pytest.mark.parametrize(
    "kind,coord",
    [(LINE, 1.5), (LINE, -0.1), (BEZIER, float("nan")), (simplex(3), [0.5, 0.5, 0.1]),
     (simplex(2), [1.2, -0.2]), (simplex(3), [0.5, 0.5]), (LINE, [0.5, 0.5])],
)
def test_coordinates_outside_domain_rejected(kind, coord):
    with pytest.raises(InputError):
        coefficients(kind, coord)


def test_extrapolation_allowed_when_requested():
    assert coefficients(LINE, 1.1, extrapolate=True) == pytest.approx([-0.1, 1.1])


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.lists(st.floats(0.0, 10.0), min_size=1, max_size=6))
def test_coefficients_are_convex_combinations(a, raw):
    for kind in (LINE, BEZIER):
        c = coefficients(kind, a)
        assert np.all(c >= 0) and abs(c.sum() - 1) <= 1e-12
    w = np.asarray(raw) + 1e-3
    w = w / w.sum()
    if abs(w.sum() - 1.0) <= 1e-12:
        c = coefficients(simplex(len(w)), w)
        assert np.all(c >= 0) and abs(c.sum() - 1) <= 1e-12


# ---- evaluation of points ---------------------------------------------------

@pytest.fixture
def two_layer():
    return mlp(3, [4], 2, batch_norm=False)


def test_line_midpoint(two_layer, rng):
    sub = init_subspace(two_layer, LINE, rng)
    mid = eval_point(sub, 0.5)
    np.testing.assert_allclose(mid.values, (sub.endpoints[0].values + sub.endpoints[1].values) / 2, atol=1e-15)
    assert mid.segments == two_layer.segments


@pytest.mark.parametrize("m", [1, 2, 5])
def test_simplex_vertex_is_endpoint_exactly(m, two_layer, rng):
    sub = init_subspace(two_layer, simplex(m), rng)
    for i in range(m):
        e = np.zeros(m)
        e[i] = 1.0
        assert np.array_equal(eval_point(sub, e).values, sub.endpoints[i].values)


def test_layerwise_line_assembles_by_layer(two_layer, rng):
    sub = init_subspace(two_layer, LINE, rng)
    coord = SampleCoord.layers({0: 0.0, 2: 1.0})
    got = eval_point(sub, coord).values
    expected = np.empty(two_layer.num_params)
    for seg in two_layer.segments:
        src = sub.endpoints[0] if seg.layer_index == 0 else sub.endpoints[1]
        expected[seg.offset:seg.offset + seg.length] = src.values[seg.offset:seg.offset + seg.length]
    assert np.array_equal(got, expected)


def test_layerwise_must_cover_every_layer(two_layer, rng):
    sub = init_subspace(two_layer, LINE, rng)
    with pytest.raises(InputError):
        eval_point(sub, SampleCoord.layers({0: 0.3}))


@pytest.mark.parametrize("kind,coord", [(LINE, 0.37), (BEZIER, 0.81), (simplex(3), [0.1, 0.6, 0.3])])
def test_layerwise_with_equal_coords_is_bit_identical(kind, coord, small_bn_spec, rng):
    sub = init_subspace(small_bn_spec, kind, rng)
    groups = sub.endpoints[0].layer_groups
    lw = SampleCoord.layers({i: coord for i in groups})
    assert np.array_equal(eval_point(sub, lw).values, eval_point(sub, coord).values)
    g = init_params(small_bn_spec, rng)
    for a, b in zip(route_gradient(sub, lw, g), route_gradient(sub, coord, g)):
        assert np.array_equal(a.values, b.values)


def test_layer_groups(small_bn_spec, rng):
    groups = init_params(small_bn_spec, rng).layer_groups
    # dense 0 (W, b), bn 1, dense 3, bn 4, dense 6
    assert sorted(groups) == [0, 1, 3, 4, 6]
    assert all(len(v) == 2 for v in groups.values())


def test_point_init_replicates_one_draw(two_layer):
    sub = init_subspace(two_layer, simplex(3), np.random.default_rng(0), point_init=True)
    assert all(np.array_equal(e.values, sub.endpoints[0].values) for e in sub.endpoints)
    fresh = init_subspace(two_layer, simplex(3), np.random.default_rng(0))
    assert not np.array_equal(fresh.endpoints[0].values, fresh.endpoints[1].values)


def test_endpoint_count_checked(two_layer, rng):
    with pytest.raises(ConfigError):
        Subspace(BEZIER, [init_params(two_layer, rng)] * 2)


# ---- sampling ---------------------------------------------------------------

def test_simplex1_always_one():
    r = np.random.default_rng(0)
    for _ in range(10):
        assert sample_coord(simplex(1), r).value.tolist() == [1.0]


def test_scalar_coords_uniform():
    r = np.random.default_rng(3)
    a = np.array([sample_coord(LINE, r).value for _ in range(10_000)])
    assert a.min() >= 0 and a.max() <= 1
    assert sps.kstest(a, "uniform").pvalue > 0.01


def test_simplex2_first_weight_uniform():
    r = np.random.default_rng(4)
    a = np.array([sample_coord(simplex(2), r).value[0] for _ in range(10_000)])
    assert sps.kstest(a, "uniform").pvalue > 0.01


def test_simplex4_moments():
    r = np.random.default_rng(5)
    w = np.array([sample_coord(simplex(4), r).value for _ in range(10_000)])
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-12) and w.min() >= 0
    # Dirichlet(1,1,1,1): variance of each weight is (1/4)(3/4)/5
    se = math.sqrt(0.25 * 0.75 / 5 / 10_000)
    assert np.all(np.abs(w.mean(axis=0) - 0.25) <= 3 * se)


def test_layerwise_draws_are_independent_per_layer():
    r = np.random.default_rng(6)
    c = sample_coord(LINE, r, layerwise=True, layer_indices=[0, 2, 4])
    assert sorted(c.per_layer) == [0, 2, 4]
    assert len(set(c.per_layer.values())) == 3
    with pytest.raises(InputError):
        sample_coord(LINE, r, layerwise=True)


def test_pair_sample():
    r = np.random.default_rng(7)
    assert all(pair_sample(2, r) == (0, 1) for _ in range(20))
    assert pair_sample(1, r) is None
    n = 12_000
    counts = {}
    for _ in range(n):
        p = pair_sample(3, r)
        counts[p] = counts.get(p, 0) + 1
    assert sorted(counts) == [(0, 1), (0, 2), (1, 2)]
    sigma = math.sqrt(n * (1 / 3) * (2 / 3))
    assert all(abs(c - n / 3) <= 3 * sigma for c in counts.values())


# ---- gradient routing -------------------------------------------------------

def test_route_examples(two_layer, rng):
    line = init_subspace(two_layer, LINE, rng)
    g = init_params(two_layer, rng)
    a, b = route_gradient(line, 0.25, g)
    assert np.array_equal(a.values, 0.75 * g.values) and np.array_equal(b.values, 0.25 * g.values)
    a, b = route_gradient(line, 0.0, g)
    assert np.array_equal(a.values, g.values) and np.all(b.values == 0)
    bez = init_subspace(two_layer, BEZIER, rng)
    parts = route_gradient(bez, 0.5, g)
    for part, c in zip(parts, (0.25, 0.25, 0.5)):
        assert np.array_equal(part.values, c * g.values)


def test_route_rejects_mismatched_table(two_layer, rng):
    line = init_subspace(two_layer, LINE, rng)
    with pytest.raises(ConfigError):
        route_gradient(line, 0.5, init_params(mlp(3, [5], 2), rng))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["line", "bezier", "simplex:3"]), st.booleans())
def test_routing_matches_directional_derivative(seed, kind_name, layerwise):
    spec = mlp(3, [4], 2, batch_norm=True)
    r = np.random.default_rng(seed)
    kind = parse_kind(kind_name)
    sub = init_subspace(spec, kind, r)
    groups = sorted(sub.endpoints[0].layer_groups)
    coord = sample_coord(kind, r, layerwise, groups)
    x, y = r.random((6, 3)), r.integers(0, 2, 6)
    _, g = backward(spec, eval_point(sub, coord), x, y)
    routed = route_gradient(sub, coord, g)
    i = int(r.integers(kind.m))
    v = r.normal(size=spec.num_params)
    h = 1e-5

    def loss_at(eps):
        s = sub.copy()
        s.endpoints[i] = s.endpoints[i].with_values(s.endpoints[i].values + eps * v)
        return backward(spec, eval_point(s, coord), x, y)[0]

    fd = (loss_at(h) - loss_at(-h)) / (2 * h)
    analytic = routed[i].values @ v
    assert abs(fd - analytic) <= 1e-5 * max(1.0, abs(analytic))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["line", "bezier", "simplex:4"]), st.booleans())
def test_routed_gradients_sum_to_point_gradient(seed, kind_name, layerwise):
    spec = mlp(3, [4], 2, batch_norm=True)
    r = np.random.default_rng(seed)
    kind = parse_kind(kind_name)
    sub = init_subspace(spec, kind, r)
    coord = sample_coord(kind, r, layerwise, sorted(sub.endpoints[0].layer_groups))
    g = init_params(spec, r)
    total = sum(p.values for p in route_gradient(sub, coord, g))
    assert np.max(np.abs(total - g.values)) <= 1e-12 * max(1.0, np.abs(g.values).max())


# ---- cosine regularizer -----------------------------------------------------

def test_cosine_reg_parallel_and_orthogonal():
    a = flat([1.0, -2.0, 3.0])
    v, ga, gb = cosine_reg(a, a)
    assert v == pytest.approx(1.0, abs=1e-15)
    v, ga, gb = cosine_reg(flat([1.0, 0.0]), flat([0.0, 2.0]))
    assert v == 0.0 and np.all(ga.values == 0) and np.all(gb.values == 0)


def test_cosine_reg_worked_example():
    a, b = np.array([1.0, 0.0]), np.array([1.0, 1.0])
    v, ga, gb = cosine_reg(flat(a), flat(b))
    assert v == pytest.approx(0.5, abs=1e-15)
    fa = finite_diff(lambda t: cosine_reg(flat(t), flat(b))[0], a)
    fb = finite_diff(lambda t: cosine_reg(flat(a), flat(t))[0], b)
    assert np.max(np.abs(ga.values - fa)) <= 1e-8
    assert np.max(np.abs(gb.values - fb)) <= 1e-8


def test_cosine_reg_ignores_batch_norm(small_bn_spec, rng):
    a, b = init_params(small_bn_spec, rng), init_params(small_bn_spec, rng)
    v, ga, gb = cosine_reg(a, b)
    assert np.all(ga.values[a.bn_mask] == 0) and np.all(gb.values[a.bn_mask] == 0)
    bumped = b.with_values(np.where(b.bn_mask, 7.0, b.values))
    assert cosine_reg(a, bumped)[0] == v
    fa = finite_diff(lambda t: cosine_reg(a.with_values(t), b)[0], a.values)
    assert rel_err(ga.values, fa) <= 1e-6


def test_cosine_reg_zero_norm_names_endpoint(small_bn_spec, rng):
    a = init_params(small_bn_spec, rng)
    zero = a.with_values(np.where(a.bn_mask, 1.0, 0.0))
    with pytest.raises(NumericError, match="endpoint 2"):
        cosine_reg(a, zero, names=(0, 2))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_cosine_reg_scale_invariant(seed, s1, s2):
    r = np.random.default_rng(seed)
    a, b = flat(r.normal(size=20)), flat(r.normal(size=20))
    v = cosine_reg(a, b)[0]
    assert 0.0 <= v <= 1.0
    assert abs(cosine_reg(a * s1, b * s2)[0] - v) <= 1e-12


# ---- geometry ---------------------------------------------------------------

def test_geometry_examples():
    a = flat([3.0, 0.0])
    same = geometry_stats(Subspace(LINE, [a, a.copy()]))
    assert same.pairwise_l2[(0, 1)] == 0.0 and same.pairwise_cos2[(0, 1)] == pytest.approx(1.0, abs=1e-15)
    tri = geometry_stats(Subspace(LINE, [a, flat([0.0, 4.0])]))
    assert tri.pairwise_l2[(0, 1)] == 5.0 and tri.pairwise_cos2[(0, 1)] == 0.0
    assert tri.mean_l2 is None


def test_geometry_matches_direct_arithmetic(rng):
    vs = [rng.normal(size=100) for _ in range(3)]
    g = geometry_stats(Subspace(simplex(3), [flat(v) for v in vs]))
    l2s, c2s = [], []
    for i, j in [(0, 1), (0, 2), (1, 2)]:
        d = math.sqrt(sum((p - q) ** 2 for p, q in zip(vs[i], vs[j])))
        dot = sum(p * q for p, q in zip(vs[i], vs[j]))
        c2 = dot**2 / (sum(p * p for p in vs[i]) * sum(q * q for q in vs[j]))
        assert abs(g.pairwise_l2[(i, j)] - d) <= 1e-12
        assert abs(g.pairwise_cos2[(i, j)] - c2) <= 1e-12
        l2s.append(d)
        c2s.append(c2)
    assert g.mean_l2 == pytest.approx(np.mean(l2s), abs=1e-12)
    assert g.mean_cos2 == pytest.approx(np.mean(c2s), abs=1e-12)
    rec = g.as_record()
    assert {"l2_0_1", "cos2_1_2", "mean_l2", "mean_cos2"} <= set(rec)


def test_geometry_excludes_batch_norm(small_bn_spec, rng):
    sub = init_subspace(small_bn_spec, LINE, rng)
    before = geometry_stats(sub).pairwise_l2[(0, 1)]
    e = sub.endpoints[1]
    sub.endpoints[1] = e.with_values(np.where(e.bn_mask, 5.0, e.values))
    assert geometry_stats(sub).pairwise_l2[(0, 1)] == before


def test_sample_coord_json():
    assert SampleCoord.of(0.5).to_json() == 0.5
    assert SampleCoord.of(np.array([0.5, 0.5])).to_json() == [0.5, 0.5]
    assert SampleCoord.layers({2: 0.1, 0: 0.3}).to_json() == {"0": 0.3, "2": 0.1}
