import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coral.attention import (
    AttentionLayer,
    Segment,
    TokenSequence,
    apply_rope,
    diptych_layout,
    entropies,
    entropies_vjp,
    extract_sub_attention,
    full_attention,
    hard_correspondence,
    row_entropy,
    soft_argmax,
    soft_argmax_vjp,
    soft_correspondence,
    softmax,
    softmax_vjp,
)
from coral.errors import ConfigError, DegenerateError, EmptyDomainError, InvalidDistributionError
from coral.losses import gradient_check


def eye_layer(dim, heads=1):
    eye = np.eye(dim)
    return AttentionLayer(eye, eye.copy(), eye.copy(), eye.copy(), heads)


def sequence(h=2, w=2, dim=8, context=0, pose=True, seed=0):
    segments, positions = diptych_layout(h, w, context, pose)
    n = positions.shape[0]
    emb = np.random.default_rng(seed).normal(size=(n, dim))
    return TokenSequence(segments, emb, positions)


# ---------------------------------------------------------------- rope


def test_rope_zero_position_is_identity():
    x = np.random.default_rng(0).normal(size=(3, 8))
    np.testing.assert_array_equal(apply_rope(x, np.zeros((3, 2))), x)


def test_rope_quarter_turn():
    x = np.array([[1.0, 2.0, 3.0, 4.0]])
    out = apply_rope(x, np.array([[1.0, 0.0]]), freqs=np.array([np.pi / 2]))
    # row-axis plane (x, y) -> (-y, x); column-axis plane untouched at column 0
    np.testing.assert_allclose(out, [[-2.0, 1.0, 3.0, 4.0]], atol=1e-15)


def test_rope_odd_planes_rejected():
    with pytest.raises(ConfigError):
        apply_rope(np.zeros((1, 6)), np.zeros((1, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-40, 40), st.floats(-40, 40))
def test_rope_shared_index_preserves_dot(seed, r, c):
    rng = np.random.default_rng(seed)
    q, k = rng.normal(size=(1, 16)), rng.normal(size=(1, 16))
    pos = np.array([[r, c]])
    rq, rk = apply_rope(q, pos), apply_rope(k, pos)
    assert (rq @ rk.T).item() == pytest.approx((q @ k.T).item(), rel=1e-12, abs=1e-12)


def test_rope_inverse_undoes_rotation():
    rng = np.random.default_rng(2)
    x, pos = rng.normal(size=(5, 8)), rng.normal(size=(5, 2)) * 4
    np.testing.assert_allclose(apply_rope(apply_rope(x, pos), pos, inverse=True), x, atol=1e-12)


# ---------------------------------------------------------------- layout


def test_pose_tokens_share_person_positions():
    seq = sequence(3, 4, context=2)
    person, pose = seq.segment("person"), seq.segment("pose")
    assert pose.count == person.count == 12
    np.testing.assert_array_equal(seq.positions[pose.slice], seq.positions[person.slice])
    assert len(seq) == 2 + 3 * 12


def test_layout_rejects_unshared_pose_positions():
    segments, positions = diptych_layout(2, 2, 0, True)
    positions = positions.copy()
    positions[-1] += 1
    with pytest.raises(ConfigError):
        TokenSequence(segments, np.zeros((len(positions), 4)), positions)


# ---------------------------------------------------------------- full attention


def test_single_token_attention():
    segments = [Segment("context", 1, 0), Segment("garment", 0, 1, (0, 0)),
                Segment("person", 0, 1, (0, 0)), Segment("pose", 0, 1)]
    seq = TokenSequence(segments, np.ones((1, 4)), np.zeros((1, 2)))
    _, attn = full_attention(eye_layer(4), seq)
    np.testing.assert_array_equal(attn, [[[1.0]]])


def test_identical_keys_split_evenly():
    seq = sequence(1, 1, dim=4, pose=False)
    seq.embeddings[:] = [1.0, 2.0, 0.5, -1.0]
    seq.positions[:] = 0.0
    _, attn = full_attention(eye_layer(4), seq)
    np.testing.assert_allclose(attn, 0.5, atol=1e-15)


def test_three_token_hand_softmax():
    segments = [
        Segment(name, count, offset, shape)
        for name, count, offset, shape in (("context", 3, 0, None), ("garment", 0, 3, (0, 0)),
                                           ("person", 0, 3, (0, 0)), ("pose", 0, 3, None))
    ]
    q = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 2.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0]])
    seq = TokenSequence(segments, q, np.zeros((3, 2)))
    _, attn = full_attention(eye_layer(4), seq)
    expected = []
    for a in q:
        logits = [sum(x * y for x, y in zip(a, b)) / math.sqrt(4) for b in q]
        z = sum(math.exp(v) for v in logits)
        expected.append([math.exp(v) / z for v in logits])
    np.testing.assert_allclose(attn[0], expected, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 2, 4]))
def test_attention_rows_are_distributions(seed, h, w, heads):
    rng = np.random.default_rng(seed)
    seq = sequence(h, w, dim=16, seed=seed)
    seq.embeddings[:] *= 5
    layer = AttentionLayer.init(rng, 16, heads, 8)
    _, attn = full_attention(layer, seq)
    assert attn.min() >= 0
    np.testing.assert_allclose(attn.sum(-1), 1.0, atol=1e-6)
    ent = entropies(attn)
    assert np.all(ent >= -1e-12) and np.all(ent <= np.log(attn.shape[-1]) + 1e-12)


# ---------------------------------------------------------------- sub-attention


def test_sub_attention_all_ones_masks_is_block():
    seq = sequence(2, 2)
    attn = softmax(np.random.default_rng(0).normal(size=(2, len(seq), len(seq))))
    sub = extract_sub_attention(attn, seq, np.ones((2, 2)), np.ones((2, 2)))
    p, g = seq.segment("person").slice, seq.segment("garment").slice
    np.testing.assert_allclose(sub.values, attn.mean(0)[p, g])


def test_sub_attention_single_garment_column():
    seq = sequence(2, 2)
    attn = softmax(np.random.default_rng(1).normal(size=(1, len(seq), len(seq))))
    gm = np.zeros((2, 2), bool)
    gm[1, 0] = True
    sub = extract_sub_attention(attn, seq, np.ones((2, 2)), gm)
    assert sub.values.shape == (4, 1)
    np.testing.assert_allclose(sub.values[:, 0], attn[0, 4:8, 2])


def test_sub_attention_checkerboard_indices():
    seq = sequence(2, 2)  # garment tokens 0..3, person 4..7, pose 8..11
    attn = softmax(np.random.default_rng(2).normal(size=(1, 12, 12)))
    pm = np.array([[1, 0], [0, 1]], bool)
    gm = np.array([[0, 1], [1, 0]], bool)
    sub = extract_sub_attention(attn, seq, pm, gm)
    np.testing.assert_array_equal(sub.query_tokens, [4, 7])
    np.testing.assert_array_equal(sub.key_tokens, [1, 2])
    np.testing.assert_allclose(sub.values, attn[0][np.ix_([4, 7], [1, 2])])
    np.testing.assert_allclose(sub.values.sum(1) + sub.residual, 1.0, atol=1e-12)


def test_sub_attention_per_head_and_empty():
    seq = sequence(2, 2)
    attn = softmax(np.random.default_rng(3).normal(size=(3, 12, 12)))
    sub = extract_sub_attention(attn, seq, np.ones((2, 2)), np.ones((2, 2)), head_reduce="per-head")
    assert sub.values.shape == (3, 4, 4)
    np.testing.assert_allclose(sub.values.sum(-1) + sub.residual, 1.0, atol=1e-12)
    with pytest.raises(EmptyDomainError):
        extract_sub_attention(attn, seq, np.zeros((2, 2)), np.ones((2, 2)))


# ---------------------------------------------------------------- readouts


def block_sub(values, garment_shape=(3, 3)):
    """SubAttention over a 1-query x full garment grid block built from raw rows."""
    from coral.attention import SubAttention

    values = np.atleast_2d(np.asarray(values, float))
    keys = np.argwhere(np.ones(garment_shape, bool))
    queries = np.c_[np.zeros(len(values), int), np.arange(len(values))]
    return SubAttention(values, 1 - values.sum(1), queries, keys, np.arange(len(values)), np.arange(len(keys)), garment_shape)


def test_hard_correspondence_identity_tie_and_planted():
    sub = block_sub(np.eye(9))
    np.testing.assert_array_equal(hard_correspondence(sub).matches, sub.key_locations)
    row = np.zeros(9)
    row[3] = row[7] = 0.5
    assert tuple(hard_correspondence(block_sub(row)).matches[0]) == (1.0, 0.0)
    perm = np.array([4, 0, 8, 1, 6, 2, 7, 3, 5])
    vals = np.full((9, 9), 0.05)
    vals[np.arange(9), perm] = 0.5
    np.testing.assert_array_equal(hard_correspondence(block_sub(vals)).matches, sub.key_locations[perm])


def test_soft_correspondence_examples():
    one_hot = np.zeros((1, 20))
    one_hot[0, 2 * 5 + 3] = 1.0
    np.testing.assert_allclose(soft_correspondence(block_sub(one_hot, (4, 5))), [[2.0, 3.0]])
    n = 7
    strip = block_sub(np.full((1, n), 1.0 / n), (1, n))
    np.testing.assert_allclose(soft_correspondence(strip), [[0.0, (n - 1) / 2]], atol=1e-12)
    np.testing.assert_allclose(soft_argmax(np.array([[0.25, 0.75]]), np.array([[0.0, 0.0], [4.0, 0.0]])), [[3.0, 0.0]])


def test_soft_correspondence_renormalizes_and_raw_mode():
    sub = block_sub(np.array([[0.1, 0.1, 0, 0, 0, 0, 0, 0, 0]]))
    np.testing.assert_allclose(soft_correspondence(sub), [[0.0, 0.5]])
    np.testing.assert_allclose(soft_correspondence(sub, renormalize=False), [[0.0, 0.1]])
    np.testing.assert_allclose(soft_correspondence(sub, coords="linear"), [[0.5]])
    with pytest.raises(DegenerateError):
        soft_correspondence(block_sub(np.zeros((1, 9))))


def test_hard_equals_soft_on_one_hot():
    rng = np.random.default_rng(5)
    for _ in range(10):
        row = np.zeros((1, 9))
        row[0, rng.integers(9)] = 1.0
        sub = block_sub(row)
        np.testing.assert_array_equal(hard_correspondence(sub).matches, soft_correspondence(sub))


def test_row_entropy_examples():
    assert row_entropy([0, 0, 1.0, 0]) == 0.0
    assert row_entropy(np.full(64, 1 / 64)) == pytest.approx(np.log(64))
    assert row_entropy([0.5, 0.5]) == pytest.approx(0.6931471805599453, abs=1e-15)
    with pytest.raises(InvalidDistributionError):
        row_entropy([1.5, -0.5])
    with pytest.raises(InvalidDistributionError):
        row_entropy([0.5, 0.4])


# ---------------------------------------------------------------- analytic gradients vs finite differences


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("renormalize", [True, False])
def test_soft_argmax_gradient_through_softmax(seed, renormalize):
    rng = np.random.default_rng(seed)
    locs = rng.integers(0, 4, (8, 2)).astype(float)
    g_out = rng.normal(size=(3, 2))

    def fn(params):
        p = softmax(params["logits"])
        keep = p[:, :6]  # six garment keys out of eight
        val = soft_argmax(keep, locs[:6], renormalize)
        d_keep = soft_argmax_vjp(keep, locs[:6], g_out, renormalize)
        d_p = np.zeros_like(p)
        d_p[:, :6] = d_keep
        return float(np.sum(val * g_out)), {"logits": softmax_vjp(p, d_p)}

    report = gradient_check(fn, {"logits": rng.normal(size=(3, 8))}, step=1e-5, tolerance=1e-4)
    assert report.passed, report.max_rel_error


@pytest.mark.parametrize("seed", range(5))
def test_entropy_gradient_through_softmax(seed):
    rng = np.random.default_rng(seed)

    def fn(params):
        p = softmax(params["logits"])
        w = np.arange(1, 5, dtype=float)
        return float(entropies(p) @ w), {"logits": softmax_vjp(p, entropies_vjp(p, w))}

    report = gradient_check(fn, {"logits": rng.normal(size=(4, 8)) * 2}, step=1e-5, tolerance=1e-4)
    assert report.passed, report.max_rel_error


def test_attention_layer_backward_matches_fd():
    from coral.attention import attention_backward, attention_forward

    rng = np.random.default_rng(7)
    seq = sequence(2, 2, dim=8)
    g_out = rng.normal(size=(len(seq), 8))
    g_attn = rng.normal(size=(2, len(seq), len(seq)))
    base = AttentionLayer.init(rng, 8, 2, 4)

    def fn(params):
        layer = AttentionLayer(params["wq"], params["wk"], params["wv"], params["wo"], 2)
        out, attn, cache = attention_forward(layer, params["x"], seq.positions)
        dx, grads = attention_backward(layer, cache, g_out, g_attn)
        grads["x"] = dx
        return float(np.sum(out * g_out) + np.sum(attn * g_attn)), grads

    params = {**base.params(), "x": seq.embeddings}
    report = gradient_check(fn, params, step=1e-6, tolerance=1e-4, max_entries=20)
    assert report.passed, report.max_rel_error
