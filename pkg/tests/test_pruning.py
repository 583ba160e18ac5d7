import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sparsevt.pruning import (MASK_HEADER, PruneSchedule, TokenSequence, cross_modal_scores,
                              keep_count, keep_mask_rows, prune_multimodal, prune_visual,
                              read_keep_mask_csv, topk_keep, write_keep_mask_csv)


def seq(n, d=3, batch=None):
    emb = np.arange((n + 1) * d, dtype=float).reshape(n + 1, d)
    coords = np.stack(np.unravel_index(np.arange(n), (1, 1, n)), axis=-1)
    ts = TokenSequence(emb, coords, np.arange(n), n)
    if batch:
        ts = TokenSequence(np.stack([emb] * batch), np.stack([coords] * batch),
                           np.stack([np.arange(n)] * batch), n)
    return ts


def test_keep_count_is_exact():
    assert keep_count(270, 0.1) == 27
    assert keep_count(785, 0.1) == 79
    assert keep_count(784, 0.7) == 549
    with pytest.raises(ValueError):
        keep_count(10, 0)


def test_rate_one_is_identity():
    out, dec = prune_visual(seq(5), np.array([0.1, 0.5, 0.2, 0.1, 0.1]), 1.0)
    assert dec.kept_indices.tolist() == [0, 1, 2, 3, 4]
    assert np.array_equal(out.embeddings, seq(5).embeddings)


def test_top_two():
    _, dec = prune_visual(seq(4), np.array([0.4, 0.3, 0.2, 0.1]), 0.5)
    assert dec.kept_indices.tolist() == [0, 1]


def test_ties_go_to_lower_index():
    _, dec = prune_visual(seq(4), np.array([0.3, 0.3, 0.3, 0.1]), 0.5)
    assert dec.kept_indices.tolist() == [0, 1]


def test_multimodal_examples():
    scores = np.full(10, 0.05)
    scores[7] = 0.5
    _, dec = prune_multimodal(seq(10), scores, 0.1)
    assert dec.kept_indices.tolist() == [7]
    out, dec = prune_multimodal(seq(10), scores, 1.0)
    assert out.n_regional == 10


def test_cls_row_always_kept():
    out, _ = prune_visual(seq(6), np.arange(6.0), 0.34)
    assert np.array_equal(out.embeddings[0], seq(6).embeddings[0])
    assert out.orig_index.tolist() == [3, 4, 5]


def test_zero_rate_rejected():
    with pytest.raises(ValueError):
        prune_visual(seq(4), np.ones(4), 0.0)


def test_cross_modal_scores_examples():
    np.testing.assert_allclose(cross_modal_scores(np.ones(2), np.zeros((5, 2))), [0.2] * 5)
    np.testing.assert_allclose(cross_modal_scores(np.ones(2), np.zeros((1, 2))), [1.0])
    keys = np.array([[0.0], [np.log(2)], [np.log(4)]])
    np.testing.assert_allclose(cross_modal_scores(np.ones(1), keys, scale=1.0),
                               [1 / 7, 2 / 7, 4 / 7], atol=1e-12)


@given(n=st.integers(1, 200), q1=st.floats(0.01, 1.0), q2=st.floats(0.01, 1.0),
       seed=st.integers(0, 1000))
def test_composition_matches_recurrence(n, q1, q2, seed):
    rng = np.random.default_rng(seed)
    s, _ = prune_visual(seq(n), rng.random(n), q1)
    s, _ = prune_visual(s, rng.random(s.n_regional), q2)
    assert s.n_regional == keep_count(keep_count(n, q1), q2)
    assert s.n_regional == math.ceil(q2 * math.ceil(q1 * n - 1e-9) - 1e-9)


@given(scores=st.lists(st.integers(-40, 40), min_size=1, max_size=60), q=st.floats(0.01, 1.0))
def test_monotone_transform_invariance(scores, q):
    # scores on a coarse grid so the transform stays strictly monotone in floating point
    s = np.array(scores) / 8.0
    assert np.array_equal(topk_keep(s, q), topk_keep(np.exp(s) * 3 + 1, q))
    assert np.array_equal(topk_keep(s, q), topk_keep(s ** 3 + s, q))


@given(scores=st.lists(st.integers(0, 4), min_size=1, max_size=60), q=st.floats(0.01, 1.0))
def test_kept_set_is_top_k_in_order(scores, q):
    s = np.array(scores, dtype=float)
    keep = topk_keep(s, q)
    assert np.all(np.diff(keep) > 0)
    assert len(keep) == keep_count(len(s), q)
    dropped = np.setdiff1d(np.arange(len(s)), keep)
    if len(dropped):
        assert s[keep].min() >= s[dropped].max()
        # among equal scores at the boundary the lower indices survive
        boundary = s[keep].min()
        tied_kept = keep[s[keep] == boundary]
        tied_dropped = dropped[s[dropped] == boundary]
        if len(tied_dropped):
            assert tied_kept.max() < tied_dropped.min()


def test_equal_scores_keep_lowest_indices():
    assert topk_keep(np.ones(9), 0.4).tolist() == [0, 1, 2, 3]


def test_batched_prune_tracks_original_positions():
    ts = seq(6, batch=2)
    scores = np.array([[0, 1, 2, 3, 4, 5], [5, 4, 3, 2, 1, 0]], dtype=float)
    out, dec = prune_visual(ts, scores, 0.5)
    assert out.orig_index.tolist() == [[3, 4, 5], [0, 1, 2]]
    assert out.alive_mask.sum(axis=1).tolist() == [3, 3]
    assert out.coords[0, :, 2].tolist() == [3, 4, 5]


def test_schedule_validation():
    PruneSchedule((4, 7, 10), (0.7,) * 3, (1,), (0.1,)).validate(12, 3)
    with pytest.raises(ValueError):
        PruneSchedule((4, 4), (0.7, 0.7)).validate(12, 3)
    with pytest.raises(ValueError):
        PruneSchedule((13,), (0.7,)).validate(12, 3)
    with pytest.raises(ValueError):
        PruneSchedule((4,), (1.5,)).validate(12, 3)
    with pytest.raises(ValueError):
        PruneSchedule((4,), ()).validate(12, 3)


def test_keep_mask_csv_roundtrip(tmp_path):
    alive = np.array([1, 0, 1, 1, 0, 0, 1, 0])
    rows = keep_mask_rows(3, alive, (2, 2, 2))
    path = tmp_path / "m.csv"
    write_keep_mask_csv(path, rows)
    assert path.read_text().splitlines()[0] == ",".join(MASK_HEADER)
    back = read_keep_mask_csv(path)
    assert back == rows
    assert back[4] == (3, 1, 0, 0, 0)
