import numpy as np
import pytest

from gradcases import encoder_case
from hgda.encoder import (
    EncoderDims,
    encode,
    encode_backward,
    init_encoder,
    lstm_backward,
    lstm_forward,
    pool,
    reverse_index,
)
from hgda.errors import DimensionMismatch, StaleCache
from oracles import central_diff, rel_close

DIMS = EncoderDims(vocab_size=7, embed_dim=3, hidden_dim=6, char_features=False, n_chars=0)


def test_lstm_gradients():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(2, 3, 4))
    W, U, b = rng.normal(size=(4, 8)), rng.normal(size=(2, 8)), rng.normal(size=8)
    up = rng.normal(size=(2, 3, 2))
    _, cache = lstm_forward(X, W, U, b)
    dX, dW, dU, db = lstm_backward(cache, up)
    num = central_diff(lambda: float((lstm_forward(X, W, U, b)[0] * up).sum()), {"X": X, "W": W, "U": U, "b": b})
    for got, k in ((dX, "X"), (dW, "W"), (dU, "U"), (db, "b")):
        assert rel_close(got, num[k]), k


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("chars,dropout", [(False, 0.0), (True, 0.0), (False, 0.4), (True, 0.4)])
def test_encoder_gradients(seed, chars, dropout):
    analytic, numeric = encoder_case(seed, chars, dropout)
    assert set(analytic) == set(numeric)
    for k in numeric:
        assert rel_close(analytic[k], numeric[k]), k


def test_reverse_index():
    idx = reverse_index(np.array([3, 1]), 4)
    np.testing.assert_array_equal(idx, [[2, 1, 0, 3], [0, 1, 2, 3]])


def test_padding_does_not_change_valid_features():
    """A sentence alone and the same sentence inside a padded batch encode identically."""
    rng = np.random.default_rng(3)
    theta = init_encoder(DIMS, rng)
    short = np.array([[1, 2]])
    alone, _ = encode(theta, short, np.array([2]), DIMS)
    batch = np.array([[1, 2, 0, 0], [3, 4, 5, 6]])
    feats, _ = encode(theta, batch, np.array([2, 4]), DIMS)
    np.testing.assert_allclose(feats[0, :2], alone[0], rtol=0, atol=1e-14)
    assert np.all(feats[0, 2:] == 0)
    # change the padding token ids: nothing moves
    batch[0, 2:] = 6
    feats2, _ = encode(theta, batch, np.array([2, 4]), DIMS)
    np.testing.assert_array_equal(feats, feats2)


def test_backward_direction_sees_the_future():
    rng = np.random.default_rng(4)
    theta = init_encoder(DIMS, rng)
    a, _ = encode(theta, np.array([[1, 2, 3]]), np.array([3]), DIMS)
    b, _ = encode(theta, np.array([[1, 2, 4]]), np.array([3]), DIMS)
    h = DIMS.hidden_dim // 2
    np.testing.assert_array_equal(a[0, :2, :h], b[0, :2, :h])  # forward half is causal
    assert np.any(a[0, 0, h:] != b[0, 0, h:])


def test_dropout_determinism_and_eval_mode():
    rng = np.random.default_rng(5)
    theta = init_encoder(DIMS, rng)
    ids, lens = np.array([[1, 2, 3]]), np.array([3])
    a, _ = encode(theta, ids, lens, DIMS, dropout=0.5, rng=np.random.default_rng(9))
    b, _ = encode(theta, ids, lens, DIMS, dropout=0.5, rng=np.random.default_rng(9))
    c, _ = encode(theta, ids, lens, DIMS)
    np.testing.assert_array_equal(a, b)
    assert np.any(a != c)


def test_stale_cache():
    theta = init_encoder(DIMS, np.random.default_rng(0))
    feats, cache = encode(theta, np.array([[1]]), np.array([1]), DIMS)
    encode_backward(cache, np.ones_like(feats))
    with pytest.raises(StaleCache):
        encode_backward(cache, np.ones_like(feats))


def test_dimension_checks():
    theta = init_encoder(DIMS, np.random.default_rng(0))
    with pytest.raises(DimensionMismatch):
        encode(theta, np.array([[1, 2]]), np.array([3]), DIMS)
    bad = EncoderDims(vocab_size=7, embed_dim=4, hidden_dim=6, char_features=False, n_chars=0)
    with pytest.raises(DimensionMismatch):
        encode(theta, np.array([[1]]), np.array([1]), bad)


def test_pool_masks_padding():
    f = np.arange(12, dtype=float).reshape(1, 4, 3)
    np.testing.assert_allclose(pool(f, np.array([2])), [[1.5, 2.5, 3.5]])
    np.testing.assert_allclose(pool(f[0]), f[0].mean(axis=0))


def test_init_range():
    theta = init_encoder(DIMS, np.random.default_rng(0))
    bound = 1 / np.sqrt(DIMS.embed_dim)
    assert np.abs(theta["fwd_W"]).max() <= bound
    assert theta["fwd_W"].shape == (3, 4 * 3)
