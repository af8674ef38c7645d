import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hgda.crf import TagVocab, log_partition, marginals, nll, nll_backward, path_score, viterbi
from hgda.errors import NonFiniteScore, StaleCache, TagIndexOutOfRange
from oracles import brute_argmax, brute_log_partition, brute_nll, central_diff, enumerate_paths, rel_close


def random_instance(rng, L, T, scale=1.0):
    scores = rng.normal(0, scale, (L, T))
    phi = {
        "trans": rng.normal(0, scale, (T, T)),
        "start": rng.normal(0, scale, T),
        "end": rng.normal(0, scale, T),
    }
    return scores, phi


def zero_phi(T):
    return {"trans": np.zeros((T, T)), "start": np.zeros(T), "end": np.zeros(T)}


def test_log_partition_single_position_uniform():
    assert log_partition(np.zeros((1, 2)), zero_phi(2)) == pytest.approx(np.log(2), abs=1e-15)


def test_log_partition_matches_enumeration_l2_t3():
    scores, phi = random_instance(np.random.default_rng(3), 2, 3)
    assert abs(log_partition(scores, phi) - brute_log_partition(scores, phi)) < 1e-10


def test_log_partition_shift_identity():
    scores, phi = random_instance(np.random.default_rng(4), 4, 3)
    shifted = scores.copy()
    shifted[2] += 3.7
    assert log_partition(shifted, phi) - log_partition(scores, phi) == pytest.approx(3.7, abs=1e-12)


def test_log_partition_overflow_safe():
    rng = np.random.default_rng(5)
    scores, phi = random_instance(rng, 5, 4)
    assert np.isfinite(log_partition(scores * 1e4, phi))


def test_nonfinite_scores_rejected():
    with pytest.raises(NonFiniteScore):
        log_partition(np.array([[0.0, np.nan]]), zero_phi(2))
    with pytest.raises(NonFiniteScore):
        viterbi(np.array([[0.0, np.inf]]), zero_phi(2))


def test_nll_uniform_is_log2():
    val, _ = nll(np.zeros((1, 2)), [0], zero_phi(2))
    assert val == pytest.approx(np.log(2), abs=1e-15)


def test_nll_matches_enumeration_l3_t3():
    rng = np.random.default_rng(6)
    scores, phi = random_instance(rng, 3, 3)
    gold = rng.integers(0, 3, 3)
    val, _ = nll(scores, gold, phi)
    assert abs(val - brute_nll(scores, gold, phi)) < 1e-10


def test_nll_dominating_gold_path():
    T, L = 3, 4
    gold = np.array([0, 2, 1, 1])
    scores = np.zeros((L, T))
    scores[np.arange(L), gold] = 50.0
    val, cache = nll(scores, gold, zero_phi(T))
    assert 0 <= val < 1e-8
    g, ds = nll_backward(cache)
    assert np.max(np.abs(ds)) < 1e-6
    assert all(np.max(np.abs(v)) < 1e-6 for v in g.values())


def test_nll_errors():
    with pytest.raises(TagIndexOutOfRange):
        nll(np.zeros((2, 2)), [0, 2], zero_phi(2))
    _, cache = nll(np.zeros((2, 2)), [0, 1], zero_phi(2))
    nll_backward(cache)
    with pytest.raises(StaleCache):
        nll_backward(cache)


def test_emission_gradient_rows_sum_to_zero():
    rng = np.random.default_rng(7)
    scores, phi = random_instance(rng, 5, 4)
    _, cache = nll(scores, rng.integers(0, 4, 5), phi)
    _, ds = nll_backward(cache)
    np.testing.assert_allclose(ds.sum(axis=1), 0.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_nll_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    L, T = rng.integers(1, 4), rng.integers(1, 4)
    scores, phi = random_instance(rng, L, T)
    gold = rng.integers(0, T, L)
    _, cache = nll(scores, gold, phi)
    g, ds = nll_backward(cache)
    num = central_diff(lambda: nll(scores, gold, phi)[0], {"scores": scores, **phi})
    assert rel_close(ds, num["scores"])
    for k in ("trans", "start", "end"):
        assert rel_close(g[k], num[k]), k


def test_marginals_normalized():
    scores, phi = random_instance(np.random.default_rng(8), 4, 3)
    unary, pair = marginals(scores, phi)
    np.testing.assert_allclose(unary.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(pair.sum(axis=(1, 2)), 1.0, atol=1e-12)


def test_viterbi_follows_strong_emissions():
    best = np.array([2, 0, 1, 1, 2])
    scores = np.zeros((5, 3))
    scores[np.arange(5), best] = 10.0
    np.testing.assert_array_equal(viterbi(scores, zero_phi(3)), best)


def test_viterbi_tie_break_lowest_index():
    np.testing.assert_array_equal(viterbi(np.zeros((4, 3)), zero_phi(3)), [0, 0, 0, 0])


def test_viterbi_matches_enumeration_l4_t3():
    scores, phi = random_instance(np.random.default_rng(9), 4, 3)
    np.testing.assert_array_equal(viterbi(scores, phi), brute_argmax(scores, phi))


def test_viterbi_mask_yields_valid_iob2():
    tv = TagVocab.from_types(["Drug"])
    allowed, start = tv.transition_mask()
    scores = np.array([[0.0, 0.0, 5.0], [0.0, 0.0, 5.0]])  # favours I-Drug everywhere
    tags = tv.decode(viterbi(scores, zero_phi(3), allowed, start))
    assert tags == ["B-Drug", "I-Drug"]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 3))
def test_path_probabilities(seed, L, T):
    rng = np.random.default_rng(seed)
    scores, phi = random_instance(rng, L, T, scale=2.0)
    logz = log_partition(scores, phi)
    probs = [np.exp(s - logz) for _, s in enumerate_paths(scores, phi)]
    assert abs(sum(probs) - 1.0) < 1e-9
    gold = rng.integers(0, T, L)
    p = np.exp(path_score(scores, gold, phi) - logz)
    assert 0 < p <= 1.0 + 1e-12
    best = viterbi(scores, phi)
    assert path_score(scores, best, phi) >= path_score(scores, gold, phi) - 1e-12


def test_tagvocab():
    tv = TagVocab.from_types(["Gene", "Drug"])
    assert tv.tags == ("O", "B-Drug", "I-Drug", "B-Gene", "I-Gene")
    np.testing.assert_array_equal(tv.encode(["O", "B-Gene"]), [0, 3])
    with pytest.raises(TagIndexOutOfRange):
        tv.index("B-Species")
    allowed, start = tv.transition_mask()
    assert not allowed[0, 2] and allowed[1, 2] and allowed[2, 2] and not allowed[3, 2]
    assert not start[2] and start[1]
