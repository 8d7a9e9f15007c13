import numpy as np
import pytest

from hrlcap import autodiff as ad
from hrlcap.autodiff import Tensor
from hrlcap.errors import DimensionError, InputError
from hrlcap.gradcheck import finite_difference_check
from hrlcap.nn import ParamStore
from hrlcap.recurrent import GruParams, LstmParams, VideoEncoder, gru_step, lstm_step


def zeroed(store):
    for t in store.values():
        t.data[...] = 0.0
    return store


def test_lstm_zero_params():
    store = ParamStore(seed=0)
    p = LstmParams.create(store, "l", 3, 2)
    zeroed(store)
    h, c = lstm_step(Tensor(np.ones((1, 3))), Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))), p)
    np.testing.assert_array_equal(h.data, 0.0)
    np.testing.assert_array_equal(c.data, 0.0)
    h, c = lstm_step(Tensor(np.ones((1, 3))), Tensor(np.zeros((1, 2))), Tensor(np.ones((1, 2))), p)
    np.testing.assert_array_equal(c.data, 0.5)
    np.testing.assert_allclose(h.data, 0.5 * np.tanh(0.5))
    assert h.data[0, 0] == pytest.approx(0.2311, abs=1e-4)


def test_gru_zero_params_halves_state():
    store = ParamStore(seed=0)
    p = GruParams.create(store, "g", 2, 3)
    zeroed(store)
    h_prev = np.array([[1.0, -2.0, 0.4]])
    h = gru_step(Tensor(np.ones((1, 2))), Tensor(h_prev), p)
    np.testing.assert_allclose(h.data, 0.5 * h_prev)


def test_cell_shapes_and_mismatch():
    store = ParamStore(seed=1)
    lp, gp = LstmParams.create(store, "l", 3, 4), GruParams.create(store, "g", 3, 4)
    h, c = lstm_step(Tensor(np.ones((5, 3))), Tensor(np.zeros((5, 4))), Tensor(np.zeros((5, 4))), lp)
    assert h.shape == c.shape == (5, 4)
    assert gru_step(Tensor(np.ones((5, 3))), Tensor(np.zeros((5, 4))), gp).shape == (5, 4)
    with pytest.raises(DimensionError, match="lstm_step"):
        lstm_step(Tensor(np.ones((1, 2))), Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))), lp)
    with pytest.raises(DimensionError, match="gru_step"):
        gru_step(Tensor(np.ones((1, 3))), Tensor(np.zeros((1, 5))), gp)


def make_encoder(feat=4, low=4, high=4, seed=0, scale=None):
    store = ParamStore(seed=seed)
    enc = VideoEncoder(store, feat, 3, low, high)
    if scale:
        rng = np.random.default_rng(seed)
        for t in store.values():
            t.data[...] = rng.uniform(-scale, scale, t.shape)
    return store, enc


def test_encoder_shapes():
    _, enc = make_encoder()
    out = enc(np.random.default_rng(0).normal(size=(4, 4)))
    assert out.low.shape == (1, 4, 8) and out.high.shape == (1, 4, 4)
    assert out.n == 4


def test_encoder_backward_direction_mirrors_forward():
    store, enc = make_encoder(scale=0.8)
    enc.bwd.weight.data[...] = enc.fwd.weight.data
    enc.bwd.bias.data[...] = enc.fwd.bias.data
    x = np.random.default_rng(1).normal(size=(1, 5, 4))
    a, b = enc(x).low.data, enc(x[:, ::-1]).low.data
    np.testing.assert_allclose(b[0, ::-1, 4:], a[0, :, :4], atol=1e-14)


def test_padded_batch_matches_individual_runs():
    _, enc = make_encoder(scale=0.5)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 6, 4))
    lengths = np.array([6, 2, 4])
    batch = enc(x, lengths)
    for b, n in enumerate(lengths):
        single = enc(x[b:b + 1, :n])
        np.testing.assert_allclose(batch.low.data[b, :n], single.low.data[0], atol=1e-13)
        np.testing.assert_allclose(batch.high.data[b, :n], single.high.data[0], atol=1e-13)
    np.testing.assert_array_equal(batch.low_mask.sum(axis=1), lengths)


def test_unrolled_encoder_gradients():
    store, enc = make_encoder(feat=3, low=2, high=3, seed=5, scale=0.9)
    x = np.random.default_rng(3).normal(size=(2, 5, 3))
    w_low = np.random.default_rng(4).normal(size=(2, 5, 4))
    w_high = np.random.default_rng(5).normal(size=(2, 5, 3))

    def fn():
        out = enc(x, [5, 3])
        return ad.add(ad.sum_(ad.mul(out.low, Tensor(w_low))), ad.sum_(ad.mul(out.high, Tensor(w_high))))

    assert finite_difference_check(fn, list(store.values()), extended=True) < 1e-6


def test_encoder_rejects_bad_input():
    _, enc = make_encoder()
    with pytest.raises(InputError):
        enc(np.zeros((1, 0, 4)))
    with pytest.raises(InputError):
        enc(np.full((2, 4), np.nan))
    with pytest.raises(InputError):
        enc(np.zeros((2, 3, 4)), [3, 0])
    with pytest.raises(DimensionError):
        enc(np.zeros((2, 5)))
