import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from coral.errors import DegenerateError, DimensionError, EmptyDomainError
from coral.matching import (
    GARMENT_TO_PERSON,
    PERSON_TO_GARMENT,
    CorrespondenceSet,
    CostMap,
    FlowField,
    argmax_flow,
    cosine_cost,
    cycle_consistency_mask,
    mask_descriptors,
    pck,
    pearson_r,
    pseudo_gt,
    warp_by_flow,
)


def grid_locs(h, w):
    return np.argwhere(np.ones((h, w), dtype=bool))


def cost_from_matrix(values, qshape, kshape):
    return CostMap(grid_locs(*qshape), grid_locs(*kshape), np.asarray(values, float), qshape, kshape)


def brute_argmax(values):
    """Row scan keeping the first strictly-greater entry."""
    out = []
    for row in values:
        best, best_j = -np.inf, -1
        for j, v in enumerate(row):
            if v > best:
                best, best_j = v, j
        out.append(best_j)
    return np.array(out)


def identity_flow(h, w):
    return FlowField(grid_locs(h, w).reshape(h, w, 2).astype(float), np.ones((h, w), bool), (h, w))


PLANTED = np.array([2, 0, 1])  # row i of a 3-cell strip maps to column PLANTED[i]


def planted_cost():
    rng = np.random.default_rng(11)
    values = rng.uniform(-0.5, 0.5, (9, 9))
    perm = np.array([4, 0, 8, 1, 6, 2, 7, 3, 5])
    values[np.arange(9), perm] = 0.9
    return cost_from_matrix(values, (3, 3), (3, 3)), perm


# ---------------------------------------------------------------- mask_descriptors


def test_mask_all_ones_is_identity():
    g = np.random.default_rng(0).normal(size=(3, 4, 5))
    out, locs = mask_descriptors(g, np.ones((3, 4)))
    np.testing.assert_array_equal(out, g)
    assert len(locs) == 12


def test_mask_all_zeros_annihilates():
    g = np.random.default_rng(0).normal(size=(3, 4, 5))
    out, locs = mask_descriptors(g, np.zeros((3, 4)))
    assert not out.any()
    assert locs.shape == (0, 2)


def test_mask_diagonal_2x2():
    g = np.arange(1, 9, dtype=float).reshape(2, 2, 2)
    out, locs = mask_descriptors(g, np.array([[1, 0], [0, 1]]))
    assert [tuple(l) for l in locs] == [(0, 0), (1, 1)]
    np.testing.assert_array_equal(out[0, 0], [1, 2])
    np.testing.assert_array_equal(out[1, 1], [7, 8])
    assert not out[0, 1].any() and not out[1, 0].any()


def test_mask_shape_mismatch():
    with pytest.raises(DimensionError):
        mask_descriptors(np.zeros((2, 2, 1)), np.ones((3, 2)))


# ---------------------------------------------------------------- cosine_cost


def one_cell(v):
    return np.asarray(v, float).reshape(1, 1, -1)


ONE = np.ones((1, 1))


@pytest.mark.parametrize(
    "a, b, expected",
    [
        ((1.0, 0.0), (1.0, 0.0), 1.0),
        ((1.0, 0.0), (0.0, 3.0), 0.0),
        ((1.0, 0.0), (1 / np.sqrt(2), 1 / np.sqrt(2)), 0.7071067811865476),
    ],
)
def test_cosine_examples(a, b, expected):
    c = cosine_cost(one_cell(a), one_cell(b), ONE, ONE)
    assert c.values[0, 0] == pytest.approx(expected, abs=1e-12)


def test_cosine_zero_norm_raises():
    with pytest.raises(DegenerateError):
        cosine_cost(one_cell([0.0, 0.0]), one_cell([1.0, 0.0]), ONE, ONE)


def test_cosine_zero_norm_outside_mask_is_fine():
    person = np.zeros((1, 2, 2))
    person[0, 1] = [1.0, 0.0]
    c = cosine_cost(person, one_cell([1.0, 0.0]), np.array([[0, 1]]), ONE)
    assert c.values.shape == (1, 1)


def test_cosine_empty_mask_raises():
    with pytest.raises(EmptyDomainError):
        cosine_cost(one_cell([1.0]), one_cell([1.0]), np.zeros((1, 1)), ONE)


def test_cosine_channel_mismatch():
    with pytest.raises(DimensionError):
        cosine_cost(one_cell([1.0, 0.0]), one_cell([1.0]), ONE, ONE)


def test_cosine_matches_loop_oracle():
    rng = np.random.default_rng(4)
    p, g = rng.normal(size=(3, 4, 5)), rng.normal(size=(4, 3, 5))
    pm, gm = rng.random((3, 4)) > 0.3, rng.random((4, 3)) > 0.3
    c = cosine_cost(p, g, pm, gm)
    for a, (pr, pc) in enumerate(np.argwhere(pm)):
        for b, (gr, gc) in enumerate(np.argwhere(gm)):
            u, v = p[pr, pc], g[gr, gc]
            expected = sum(x * y for x, y in zip(u, v)) / (np.sqrt(sum(x * x for x in u)) * np.sqrt(sum(y * y for y in v)))
            assert c.values[a, b] == pytest.approx(expected, abs=1e-12)


grids = st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**32 - 1))


@settings(max_examples=40, deadline=None)
@given(grids)
def test_cosine_swap_is_transpose(spec):
    h, w, c, seed = spec
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(h, w, c)), rng.normal(size=(w, h, c))
    ma, mb = np.ones((h, w)), np.ones((w, h))
    np.testing.assert_allclose(cosine_cost(a, b, ma, mb).values, cosine_cost(b, a, mb, ma).values.T, atol=1e-12)
    assert np.all(np.abs(cosine_cost(a, b, ma, mb).values) <= 1.0)


@settings(max_examples=40, deadline=None)
@given(grids)
def test_cosine_scale_invariance(spec):
    h, w, c, seed = spec
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(h, w, c)), rng.normal(size=(h, w, c))
    m = np.ones((h, w))
    scaled = a * rng.uniform(0.1, 10.0, (h, w, 1))
    np.testing.assert_allclose(cosine_cost(a, b, m, m).values, cosine_cost(scaled, b, m, m).values, atol=1e-12)


# ---------------------------------------------------------------- argmax_flow


def test_argmax_identity_cost():
    flow = argmax_flow(cost_from_matrix(np.eye(6), (2, 3), (2, 3)))
    np.testing.assert_array_equal(flow.targets, identity_flow(2, 3).targets)
    assert flow.valid.all()


def test_argmax_tie_breaks_to_lowest_index():
    row = np.zeros((1, 9))
    row[0, 3] = row[0, 7] = 1.0
    flow = argmax_flow(cost_from_matrix(row, (1, 1), (3, 3)))
    assert tuple(flow.targets[0, 0]) == (1.0, 0.0)  # linear index 3 on a 3x3 grid


def test_argmax_planted_permutation():
    cost, perm = planted_cost()
    flow = argmax_flow(cost)
    expected = grid_locs(3, 3)[perm]
    np.testing.assert_array_equal(flow.targets.reshape(9, 2), expected)
    np.testing.assert_array_equal(perm, brute_argmax(cost.values))


def test_argmax_backward_direction():
    cost, perm = planted_cost()
    back = argmax_flow(cost, GARMENT_TO_PERSON)
    inv = np.argsort(perm)
    np.testing.assert_array_equal(back.targets.reshape(9, 2), grid_locs(3, 3)[inv])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**32 - 1), st.booleans())
def test_argmax_equals_brute_force(rows, cols, seed, coarse):
    rng = np.random.default_rng(seed)
    values = rng.integers(0, 3, (rows, cols)).astype(float) if coarse else rng.normal(size=(rows, cols))
    cost = CostMap(np.c_[np.zeros(rows, int), np.arange(rows)], np.c_[np.zeros(cols, int), np.arange(cols)],
                   values, (1, rows), (1, cols))
    flow = argmax_flow(cost)
    np.testing.assert_array_equal(flow.targets[0, :, 1], brute_argmax(values))


# ---------------------------------------------------------------- cycle consistency


def test_cycle_identity_all_reliable():
    f = identity_flow(4, 8)
    assert cycle_consistency_mask(f, f, 3.0).all()


def test_cycle_shift_exceeds_gamma():
    h, w = 4, 8
    targets = identity_flow(h, w).targets.copy()
    targets[..., 1] += 5
    valid = targets[..., 1] < w
    fwd = FlowField(targets, valid, (h, w))
    rel = cycle_consistency_mask(fwd, identity_flow(h, w), 3.0)
    assert valid.any() and not rel.any()


def test_cycle_gamma_zero_rejects_everything():
    f = identity_flow(3, 3)
    assert not cycle_consistency_mask(f, f, 0.0).any()


def test_cycle_grid_mismatch():
    with pytest.raises(DimensionError):
        cycle_consistency_mask(identity_flow(3, 3), identity_flow(2, 3), 3.0)


def test_cycle_rounds_fractional_targets():
    fwd = identity_flow(3, 3)
    fwd = FlowField(fwd.targets + 0.4, fwd.valid, (3, 3))
    assert cycle_consistency_mask(fwd, identity_flow(3, 3), 0.5).all()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 6), st.floats(0, 6))
def test_cycle_monotone_in_gamma(seed, g1, g2):
    g1, g2 = min(g1, g2), max(g1, g2)
    rng = np.random.default_rng(seed)
    cost = cost_from_matrix(rng.normal(size=(20, 20)), (4, 5), (5, 4))
    fwd, bwd = argmax_flow(cost), argmax_flow(cost, GARMENT_TO_PERSON)
    small, large = cycle_consistency_mask(fwd, bwd, g1), cycle_consistency_mask(fwd, bwd, g2)
    assert not np.any(small & ~large)


# ---------------------------------------------------------------- pseudo_gt


def test_pseudo_gt_identity():
    cost = cost_from_matrix(np.eye(4), (2, 2), (2, 2))
    s = pseudo_gt(cost, np.ones((2, 2)))
    np.testing.assert_array_equal(s.matches, s.queries)
    assert s.reliable.all()


def test_pseudo_gt_all_unreliable():
    cost = cost_from_matrix(np.eye(4), (2, 2), (2, 2))
    assert pseudo_gt(cost, np.zeros((2, 2))).n_reliable == 0


def test_pseudo_gt_checkerboard():
    cost, perm = planted_cost()
    checker = (np.add.outer(np.arange(3), np.arange(3)) % 2 == 0)
    s = pseudo_gt(cost, checker)
    expected = grid_locs(3, 3)[perm]
    for q, m, r in zip(s.queries, s.matches, s.reliable):
        assert r == checker[tuple(q)]
        if r:
            np.testing.assert_array_equal(m, expected[q[0] * 3 + q[1]])
    assert s.n_reliable == 5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pseudo_gt_all_ones_equals_argmax(seed):
    rng = np.random.default_rng(seed)
    cost = cost_from_matrix(rng.normal(size=(12, 6)), (3, 4), (2, 3))
    s = pseudo_gt(cost, np.ones((3, 4)))
    flow = argmax_flow(cost)
    np.testing.assert_array_equal(s.matches, flow.targets.reshape(-1, 2))


# ---------------------------------------------------------------- pck


def corr_set(queries, matches, reliable=None):
    q = np.asarray(queries, int)
    return CorrespondenceSet(q, np.asarray(matches, float), np.ones(len(q), bool) if reliable is None else np.asarray(reliable))


def test_pck_perfect():
    s = corr_set([[0, 0], [0, 1]], [[3, 3], [4, 4]])
    assert pck(s, s, 0.5) == 1.0


def test_pck_all_outside():
    gt = corr_set([[0, 0], [0, 1]], [[3, 3], [4, 4]])
    pred = corr_set([[0, 0], [0, 1]], [[3, 3 + 17], [4, 4 + 17]])
    assert pck(pred, gt, 16) == 0.0


def test_pck_counted_by_hand():
    gt = corr_set([[0, i] for i in range(4)], [[0, 0]] * 4)
    pred = corr_set([[0, i] for i in range(4)], [[0, 0], [0, 1], [0, 5], [0, 20]])
    assert pck(pred, gt, 16) == 0.75


def test_pck_ignores_unreliable_and_errors_when_empty():
    gt = corr_set([[0, 0], [0, 1]], [[0, 0], [9, 9]], [True, False])
    pred = corr_set([[0, 0], [0, 1]], [[0, 0], [0, 0]])
    assert pck(pred, gt, 1.0) == 1.0
    with pytest.raises(EmptyDomainError):
        pck(pred, corr_set([[0, 0]], [[0, 0]], [False]), 1.0)


def test_pck_missing_query():
    with pytest.raises(DimensionError):
        pck(corr_set([[0, 0]], [[0, 0]]), corr_set([[1, 1]], [[0, 0]]), 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 10), st.floats(0, 10))
def test_pck_monotone_in_alpha(seed, a1, a2):
    a1, a2 = min(a1, a2), max(a1, a2)
    rng = np.random.default_rng(seed)
    q = grid_locs(3, 3)
    gt = corr_set(q, rng.integers(0, 8, (9, 2)))
    pred = corr_set(q, rng.integers(0, 8, (9, 2)))
    assert pck(pred, gt, a1) <= pck(pred, gt, a2)
    assert pck(pred, gt, 0.0) == 0.0
    assert pck(gt, gt, max(a2, 1e-3)) == 1.0


# ---------------------------------------------------------------- pearson_r


def test_pearson_examples():
    x = np.arange(10.0)
    assert pearson_r(x, 2 * x + 1) == pytest.approx(1.0)
    assert pearson_r(x, -x) == pytest.approx(-1.0)
    assert pearson_r([1, 2, 3, 4], [2, 1, 4, 3]) == pytest.approx(0.6, abs=1e-12)


def test_pearson_degenerate():
    with pytest.raises(DegenerateError):
        pearson_r([1, 1, 1], [1, 2, 3])
    with pytest.raises(DegenerateError):
        pearson_r([1], [1])


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 50), st.integers(0, 2**32 - 1))
def test_pearson_matches_scipy(n, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=n), rng.normal(size=n)
    assert pearson_r(x, y) == pytest.approx(stats.pearsonr(x, y)[0], abs=1e-10)


# ---------------------------------------------------------------- warp_by_flow


def test_warp_identity():
    g = np.random.default_rng(1).normal(size=(3, 4, 2))
    np.testing.assert_array_equal(warp_by_flow(g, identity_flow(3, 4)), g)


def test_warp_constant_flow():
    g = np.random.default_rng(1).normal(size=(3, 4, 2))
    flow = FlowField(np.zeros((3, 4, 2)), np.ones((3, 4), bool), (3, 4))
    np.testing.assert_array_equal(warp_by_flow(g, flow), np.broadcast_to(g[0, 0], g.shape))


def test_warp_planted_permutation_and_inverse():
    cost, perm = planted_cost()
    g = np.arange(18, dtype=float).reshape(3, 3, 2)
    fwd = argmax_flow(cost)
    warped = warp_by_flow(g, fwd)
    np.testing.assert_array_equal(warped.reshape(9, 2), g.reshape(9, 2)[perm])
    back = argmax_flow(cost, GARMENT_TO_PERSON)
    np.testing.assert_array_equal(warp_by_flow(warped, back), g)


def test_warp_invalid_zero_and_clamp():
    g = np.ones((2, 2, 1))
    targets = np.array([[[0, 0], [5, 5]], [[-3, 0], [0, 0]]], float)
    valid = np.array([[True, True], [True, False]])
    out = warp_by_flow(g, FlowField(targets, valid, (2, 2)))
    np.testing.assert_array_equal(out[..., 0], [[1, 1], [1, 0]])
