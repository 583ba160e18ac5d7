import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsevt import autograd as ag
from sparsevt.attention import (RelPosBias, cls_attention, dense_attention, dense_attention_probs,
                                extract_cls_attention, merge_heads, sparse_attention, split_heads)
from sparsevt.topology import EdgeSet, build_edge_set, chunk_blocks, complete_edge_set


def qkv(rng, n, d=8, lead=()):
    return [rng.standard_normal(lead + (n, d)) for _ in range(3)]


def test_uniform_logits_give_mean_of_values(rng):
    _, _, v = qkv(rng, 5)
    q = np.zeros((3, 8))
    k = rng.standard_normal((5, 8))
    out = dense_attention(q, k, v)
    np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (3, 1)), atol=1e-12)


def test_single_key_returns_its_value(rng):
    q = rng.standard_normal((4, 8))
    k, v = rng.standard_normal((1, 8)), rng.standard_normal((1, 8))
    np.testing.assert_allclose(dense_attention(q, k, v), np.tile(v, (4, 1)), atol=1e-12)


def test_hand_computed_two_by_three():
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    k = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    v = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    # scale 1: row 0 logits (1, 0, 1), row 1 logits (0, 1, 1)
    e = np.e
    w0 = np.array([e, 1, e]) / (2 * e + 1)
    w1 = np.array([1, e, e]) / (2 * e + 1)
    expected = np.stack([w0 @ v, w1 @ v])
    np.testing.assert_allclose(dense_attention(q, k, v, scale=1.0), expected, atol=1e-6)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        dense_attention(np.zeros((2, 4)), np.zeros((3, 4)), np.zeros((2, 4)))


def test_empty_row_is_an_error():
    mask = np.array([[True, False], [False, False]])
    with pytest.raises(ag.GradientError):
        dense_attention(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2)), mask=mask)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 120), g=st.integers(1, 40), seed=st.integers(0, 10_000))
def test_complete_graph_equals_dense(n, g, seed):
    rng = np.random.default_rng(seed)
    q, k, v = qkv(rng, n + 1, lead=(2,))
    out = sparse_attention(q, k, v, complete_edge_set(n, g))
    np.testing.assert_allclose(out, dense_attention(q, k, v), atol=1e-6)


def test_diagonal_single_token_blocks_copy_values(rng):
    n = 6
    es = EdgeSet(chunk_blocks(n, 1), 0, ((),) * n, has_global=False)
    q, k, v = qkv(rng, n + 1)
    out = sparse_attention(q, k, v, es)
    np.testing.assert_allclose(out[1:], v[1:], atol=1e-12)


def test_sparse_matches_masked_dense(rng):
    es = build_edge_set(8, 2, 1, 1, seed=3)
    q, k, v = qkv(rng, 9, lead=(3,))
    expected = dense_attention(q, k, v, mask=es.token_mask())
    np.testing.assert_allclose(sparse_attention(q, k, v, es), expected, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 90), g=st.integers(1, 16), kl=st.sampled_from([1, 3]),
       kr=st.integers(0, 3), glob=st.booleans(), seed=st.integers(0, 10_000))
def test_sparse_matches_masked_dense_with_bias(n, g, kl, kr, glob, seed):
    rng = np.random.default_rng(seed)
    grid = (1, 1, n)
    coords = np.stack(np.unravel_index(np.arange(n), grid), axis=-1)
    bias = RelPosBias(rng.standard_normal((2, 1, 1, 2 * n - 1)))
    es = build_edge_set(n, g, kl, kr, seed=seed, has_global=glob)
    q, k, v = qkv(rng, n + 1, lead=(2,))
    mask = es.token_mask()
    mask[0, 0] = True          # without global edges the class token sees only itself
    expected = dense_attention(q, k, v, bias=bias.dense(coords).data, mask=mask)
    got = sparse_attention(q, k, v, es, rel_bias=bias, coords=coords)
    np.testing.assert_allclose(got, expected, atol=1e-6)


def test_rows_sum_to_one(rng):
    es = build_edge_set(40, 6, 3, 2, seed=1)
    q, k, _ = qkv(rng, 41)
    p = dense_attention_probs(q, k, mask=es.token_mask())
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(p[~es.token_mask()] == 0)


def test_shift_invariance(rng):
    q, k, v = qkv(rng, 7)
    bias = np.zeros((7, 7))
    bias[3] += 12.5
    np.testing.assert_allclose(dense_attention(q, k, v, bias=bias), dense_attention(q, k, v),
                               atol=1e-6)


def test_zero_bias_is_bit_identical(rng):
    n = 12
    coords = np.stack(np.unravel_index(np.arange(n), (2, 2, 3)), axis=-1)
    es = build_edge_set(n, 4, 1, 1, seed=0)
    q, k, v = qkv(rng, n + 1)
    zero = RelPosBias(np.zeros((1, 3, 3, 5)))
    a = sparse_attention(q, k, v, es, rel_bias=zero, coords=coords)
    b = sparse_attention(q, k, v, es)
    assert np.array_equal(a, b)


def test_single_head_split_matches_plain(rng):
    q, k, v = qkv(rng, 5, d=6, lead=(2,))
    heads = [split_heads(x, 1) for x in (q, k, v)]
    out = merge_heads(dense_attention(*heads))
    np.testing.assert_allclose(out.data, dense_attention(q, k, v), atol=1e-12)


def test_relative_bias_lookup_offsets():
    table = np.arange(3 * 5 * 7, dtype=float).reshape(1, 3, 5, 7)
    bias = RelPosBias(table)
    qc = np.array([[0, 0, 0]])
    kc = np.array([[1, 2, 3]])
    # offset (1, 2, 3) shifted by (T-1, H-1, W-1) = (1, 2, 3)
    assert bias.lookup(bias.index(qc, kc)).data[0, 0, 0] == table[0, 2, 4, 6]


def test_relative_bias_out_of_range():
    bias = RelPosBias(np.zeros((1, 1, 3, 3)))
    with pytest.raises(IndexError):
        bias.index(np.array([[0, 0, 0]]), np.array([[0, 2, 0]]))


@given(t=st.integers(1, 3), h=st.integers(1, 4), w=st.integers(1, 4))
def test_relative_bias_index_in_bounds(t, h, w):
    bias = RelPosBias(np.zeros((1, 2 * t - 1, 2 * h - 1, 2 * w - 1)))
    coords = np.stack(np.unravel_index(np.arange(t * h * w), (t, h, w)), axis=-1)
    idx = bias.index(coords, coords)
    assert idx.min() >= 0 and idx.max() < bias.table.data.size


def test_cls_attention_examples():
    n = 4
    k = np.zeros((n + 1, 3))
    q = np.ones((n + 1, 3))
    np.testing.assert_allclose(cls_attention(q, k), [0.25] * 4)
    np.testing.assert_allclose(cls_attention(np.ones((2, 3)), np.zeros((2, 3))), [1.0])
    # logits 1, 2, 3 with unit scale
    q = np.array([[1.0], [0.0], [0.0], [0.0]])
    k = np.array([[9.0], [1.0], [2.0], [3.0]])
    np.testing.assert_allclose(cls_attention(q, k, scale=1.0), [0.0900, 0.2447, 0.6652], atol=1e-4)


def test_cls_attention_heads_averaged(rng):
    q, k, _ = qkv(rng, 6, lead=(3,))
    per_head = np.stack([cls_attention(q[h], k[h]) for h in range(3)])
    np.testing.assert_allclose(extract_cls_attention(q, k), per_head.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(extract_cls_attention(q, k).sum(), 1.0, atol=1e-12)


def test_large_instance_complete_graph(rng):
    n = 511
    q, k, v = qkv(rng, n + 1)
    out = sparse_attention(q, k, v, complete_edge_set(n, 64))
    assert np.abs(out - dense_attention(q, k, v)).max() <= 1e-6
