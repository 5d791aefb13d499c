import random

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from capmt.attention import (
    AttentionTensor,
    ContextWindow,
    SentenceAttentionMatrix,
    SentenceMap,
    average_heads,
    fixed_context,
    select_context,
    sentence_attention,
    sentence_sentence_score,
    token_sentence_score,
)
from capmt.errors import AbsentScore, InvalidTensor, SelfScore

from oracles import (
    loop_average_heads,
    loop_sentence_sentence,
    loop_token_sentence,
    random_assignment,
    random_causal_tensor,
    rank_select,
)

NaN = float("nan")


def test_single_head_is_identity():
    m = random_causal_tensor(random.Random(0), 1, 5)
    np.testing.assert_array_equal(average_heads(AttentionTensor(m)), m[0])


def test_two_head_mean():
    w = np.array([[[1.0, 0.0], [0.2, 0.8]], [[1.0, 0.0], [0.6, 0.4]]])
    np.testing.assert_allclose(average_heads(AttentionTensor(w))[1], [0.4, 0.6], atol=1e-15)


def test_average_rows_stay_stochastic():
    w = random_causal_tensor(random.Random(3), 4, 9)
    avg = average_heads(AttentionTensor(w))
    np.testing.assert_allclose(avg.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.triu(avg, 1) == 0)


@pytest.mark.parametrize(
    "weights",
    [
        [[[1.0, 0.0], [0.5, np.nan]]],
        [[[1.0, 0.0], [np.inf, 0.0]]],
        [[[1.0, 0.0], [1.2, -0.2]]],
        [[[1.0, 0.0], [0.25, 0.25]]],
        [[[0.5, 0.5], [0.5, 0.5]]],
        [[1.0, 0.0]],
    ],
    ids=["nan", "inf", "negative", "row-sum", "future-weight", "bad-shape"],
)
def test_invalid_tensors_rejected(weights):
    with pytest.raises(InvalidTensor):
        AttentionTensor(np.array(weights))


def test_bidirectional_tensor_accepts_future_weight():
    assert AttentionTensor(np.array([[[0.5, 0.5], [0.5, 0.5]]]), causal=False).num_tokens == 2


def test_average_heads_rejects_nan_array():
    with pytest.raises(InvalidTensor):
        average_heads(np.full((1, 2, 2), np.nan))


def test_token_sentence_examples():
    matrix = np.array([[0.3, 0.5, 0.2]] * 3)
    smap = SentenceMap.from_assignments([0, 0, 1])
    assert token_sentence_score(matrix, 2, 0, smap, "max") == 0.5
    assert token_sentence_score(matrix, 2, 0, smap, "avg") == pytest.approx(0.4, abs=1e-15)


def test_token_sentence_respects_causality():
    matrix = np.eye(3)
    smap = SentenceMap.from_assignments([0, 1, 1])
    with pytest.raises(AbsentScore):
        token_sentence_score(matrix, 0, 1, smap)
    assert token_sentence_score(matrix, 0, 1, smap, causal=False) == 0.0


def test_sentence_score_is_mean_over_tokens():
    # tokens 2 and 3 form sentence 1; their max scores toward sentence 0 are 0.5 and 0.3
    matrix = np.zeros((4, 4))
    matrix[2, :3] = [0.5, 0.1, 0.4]
    matrix[3, :4] = [0.2, 0.3, 0.2, 0.3]
    smap = SentenceMap.from_assignments([0, 0, 1, 1])
    assert sentence_sentence_score(matrix, 1, 0, smap) == pytest.approx(0.4, abs=1e-15)


def test_single_token_sentence_equals_token_score():
    matrix = np.tril(np.full((4, 4), 0.25))
    smap = SentenceMap.from_assignments([0, 0, 1, 2])
    for mode in ("max", "avg"):
        assert sentence_sentence_score(matrix, 2, 0, smap, mode) == token_sentence_score(matrix, 3, 0, smap, mode)


def test_self_score_and_absent_pair():
    matrix = np.eye(3)
    smap = SentenceMap.from_assignments([0, 1, 2])
    with pytest.raises(SelfScore):
        sentence_sentence_score(matrix, 1, 1, smap)
    with pytest.raises(AbsentScore):
        sentence_sentence_score(matrix, 0, 2, smap)
    scores = sentence_attention(matrix, smap)
    assert not scores.is_present(0, 2)
    assert scores.to_nested()[0] == [None, None, None]
    assert scores.to_nested()[2] == [0.0, 0.0, None]


def test_special_tokens_are_excluded():
    # token 0 is BOS with most of the mass; it never contributes
    matrix = np.array([[1.0, 0, 0], [0.9, 0.1, 0], [0.8, 0.05, 0.15]])
    smap = SentenceMap.from_assignments([None, 0, 1])
    assert sentence_attention(matrix, smap).scores[1, 0] == 0.05


def test_sentence_map_from_char_ranges():
    smap = SentenceMap.from_char_ranges([(0, 0), (0, 4), (4, 5), (5, 6), (6, 9), (9, 10)], [(0, 5), (6, 10)])
    assert smap.token_to_sentence.tolist() == [-1, 0, 0, -1, 1, 1]
    assert [t.tolist() for t in smap.sentence_tokens] == [[1, 2], [4, 5]]


def test_sentence_map_rejects_inconsistent_inverse():
    with pytest.raises(ValueError):
        SentenceMap(np.array([0, 1]), (np.array([0, 1]), np.array([], dtype=int)))


def test_loop_oracles_on_random_documents():
    rng = random.Random(11)
    for _ in range(200):
        causal = rng.random() < 0.8
        T = rng.randint(2, 20)
        w = random_causal_tensor(rng, rng.randint(1, 4), T, causal)
        assignment = random_assignment(rng, T, 8)
        smap = SentenceMap.from_assignments(assignment)
        matrix = average_heads(AttentionTensor(w, causal))
        for mode in ("max", "avg"):
            full = sentence_attention(matrix, smap, mode, causal).scores
            for I in range(smap.num_sentences):
                for S in range(smap.num_sentences):
                    if I == S:
                        assert np.isnan(full[I, S])
                        continue
                    want = loop_sentence_sentence(matrix.tolist(), I, S, assignment, mode, causal)
                    if want is None:
                        assert np.isnan(full[I, S])
                    else:
                        assert abs(full[I, S] - want) <= 1e-12


def test_select_context_examples():
    row = np.array([[NaN] * 4, [NaN] * 4, [NaN] * 4, [0.1, 0.4, 0.3, NaN]])
    assert select_context(row, 3, 2).members == (1, 2)
    tie = np.array([[NaN, NaN, NaN], [NaN, NaN, NaN], [0.4, 0.4, NaN]])
    assert select_context(tie, 2, 1).members == (0,)


def test_select_context_no_candidates():
    window = select_context(np.full((2, 2), NaN), 0, 3)
    assert window.members == () and len(window) == 0


def test_select_context_fewer_candidates_than_n():
    scores = np.array([[NaN, NaN], [0.7, NaN]])
    assert select_context(scores, 1, 3).members == (0,)


def test_select_context_accepts_matrix_object():
    m = SentenceAttentionMatrix(np.array([[NaN, 0.2, 0.9], [NaN] * 3, [NaN] * 3]), "max")
    assert select_context(m, 0, 1).members == (2,)


@pytest.mark.parametrize("current,members", [(0, (1, 2)), (2, (0, 1, 3, 4)), (4, (2, 3))])
def test_fixed_context(current, members):
    assert fixed_context(current, 5).members == members


def test_context_window_invariants():
    with pytest.raises(ValueError):
        ContextWindow(2, (1, 0), 3)
    with pytest.raises(ValueError):
        ContextWindow(1, (0, 1), 3)
    with pytest.raises(ValueError):
        ContextWindow(4, (0, 1, 2), 2)


score_rows = hnp.arrays(
    np.float64, st.integers(2, 8),
    elements=st.one_of(st.sampled_from([0.0, 0.25, 0.5, NaN]), st.floats(0, 1, allow_nan=False)),
)


@settings(max_examples=300, deadline=None)
@given(score_rows, st.integers(0, 7), st.integers(1, 4))
def test_select_context_matches_rank_oracle(row, current, n):
    assume(current < len(row))
    S = len(row)
    scores = np.full((S, S), NaN)
    scores[current] = row
    members = select_context(scores, current, n).members
    assert list(members) == rank_select(row.tolist(), current, n)
    assert all(a < b for a, b in zip(members, members[1:]))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.integers(-8, 8), st.sampled_from(["max", "avg"]))
def test_positive_scaling_preserves_selection(seed, exp, mode):
    rng = random.Random(seed)
    T = rng.randint(3, 12)
    matrix = average_heads(random_causal_tensor(rng, rng.randint(1, 4), T))
    assignment = random_assignment(rng, T, 6)
    smap = SentenceMap.from_assignments(assignment)
    current = smap.num_sentences - 1
    base = sentence_attention(matrix, smap, mode)
    scaled = sentence_attention(matrix * 2.0**exp, smap, mode)
    for n in (1, 2, 3):
        assert select_context(base, current, n).members == select_context(scaled, current, n).members


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31))
def test_head_average_is_linear_in_rows(seed):
    rng = random.Random(seed)
    w = random_causal_tensor(rng, rng.randint(1, 4), rng.randint(1, 12))
    avg = average_heads(AttentionTensor(w))
    for i in range(w.shape[1]):
        np.testing.assert_allclose(avg[i], np.mean([w[h][i] for h in range(w.shape[0])], axis=0), atol=1e-15)
    np.testing.assert_allclose(avg, loop_average_heads(w), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["max", "avg"]))
def test_single_token_sentences_reproduce_token_matrix(seed, mode):
    rng = random.Random(seed)
    T = rng.randint(2, 10)
    w = random_causal_tensor(rng, 1, T, causal=False)
    smap = SentenceMap.from_assignments(list(range(T)))
    scores = sentence_attention(average_heads(AttentionTensor(w, causal=False)), smap, mode, causal=False).scores
    off = ~np.eye(T, dtype=bool)
    np.testing.assert_array_equal(scores[off], w[0][off])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["max", "avg"]))
def test_causal_selection_never_picks_invisible_sentences(seed, mode):
    rng = random.Random(seed)
    T = rng.randint(3, 14)
    assignment = random_assignment(rng, T, 8)
    smap = SentenceMap.from_assignments(assignment)
    matrix = average_heads(random_causal_tensor(rng, rng.randint(1, 4), T))
    scores = sentence_attention(matrix, smap, mode)
    for current in range(smap.num_sentences):
        first_visible = smap.sentence_tokens[current].max()
        for m in select_context(scores, current, 4).members:
            assert smap.sentence_tokens[m].min() <= first_visible
            assert m < current


def test_token_score_loop_oracle_on_twelve_tokens():
    rng = random.Random(5)
    for _ in range(100):
        w = random_causal_tensor(rng, 3, 12)
        assignment = random_assignment(rng, 12, 5)
        smap = SentenceMap.from_assignments(assignment)
        matrix = average_heads(AttentionTensor(w))
        for i in range(12):
            for s in range(smap.num_sentences):
                for mode in ("max", "avg"):
                    want = loop_token_sentence(matrix.tolist(), i, assignment, s, mode, True)
                    if want is None:
                        with pytest.raises(AbsentScore):
                            token_sentence_score(matrix, i, s, smap, mode)
                    else:
                        assert abs(token_sentence_score(matrix, i, s, smap, mode) - want) <= 1e-12
