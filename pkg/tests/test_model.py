import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pepita_adv.model import (
    Layer, Mlp, checkpoint_bytes, forward, forward_frozen, forward_modulated, load_checkpoint,
    model_from_bytes, model_hash, predict, predict_proba, sample_masks, save_checkpoint,
)
from pepita_adv.numerics import ShapeError, make_rng

from conftest import hand_net, random_net


def test_invariants_rejected():
    W = np.zeros((3, 2))
    with pytest.raises(ShapeError):
        Layer(W, np.zeros(2))
    with pytest.raises(ValueError):
        Mlp([Layer(W, np.zeros(3), "relu")], np.zeros((2, 3)))  # last must be softmax
    with pytest.raises(ShapeError):
        Mlp([Layer(W, np.zeros(3), "softmax")], np.zeros((3, 3)))
    with pytest.raises(ShapeError):
        Mlp([Layer(W, np.zeros(3), "relu"), Layer(np.zeros((2, 2)), np.zeros(2), "softmax")], np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Mlp([Layer(W, np.zeros(3), "softmax")], np.zeros((2, 3)), dropout_rate=1.0)


def test_no_dropout_train_equals_eval():
    m = random_net(0, [6, 5, 3])
    x = make_rng(1, "init").uniform(size=(6, 4))
    a = forward(m, x, rng=make_rng(2, "dropout"))
    b = forward(m, x)
    for u, v in zip(a.hs, b.hs):
        assert np.array_equal(u, v)


def test_zero_net_uniform_output():
    m = Mlp([Layer(np.zeros((4, 3)), np.zeros(4)), Layer(np.zeros((10, 4)), np.zeros(10), "softmax")], np.zeros((3, 10)))
    np.testing.assert_allclose(forward(m, np.ones(3)).output, np.full(10, 0.1), atol=1e-15)


def test_hand_forward():
    m = hand_net()
    x = np.array([0.4, 0.8])
    # z1 = [0.5*0.4 - 0.25*0.8 + 0.1, 0.75*0.4 + 0.8 - 0.2] = [0.1, 0.9]
    h1 = np.array([0.1, 0.9])
    z2 = np.array([0.1 - 0.9, 0.05 + 1.8 + 0.3])
    ez = np.exp(z2 - z2.max())
    tr = forward(m, x)
    np.testing.assert_allclose(tr.hs[1], h1, atol=1e-12)
    np.testing.assert_allclose(tr.output, ez / ez.sum(), atol=1e-12)


def test_modulated_zero_error_and_zero_F():
    m = random_net(3, [5, 4, 3], dropout=0.2)
    x = make_rng(4, "init").uniform(size=(5, 6))
    tr = forward(m, x, rng=make_rng(5, "dropout"))
    mod = forward_modulated(m, x, np.zeros((3, 6)), tr.masks)
    for u, v in zip(tr.hs[1:], mod.hs[1:]):
        assert np.array_equal(u, v)
    m.F[:] = 0.0
    mod = forward_modulated(m, x, make_rng(6, "init").standard_normal((3, 6)), tr.masks)
    for u, v in zip(tr.hs[1:], mod.hs[1:]):
        assert np.array_equal(u, v)


def test_modulated_hand():
    m = hand_net()
    x = np.array([0.4, 0.8])
    e = np.array([0.5, -0.5])
    x_mod = x + m.F @ e  # [0.4 + 0.05 + 0.1, 0.8 + 0.15 - 0.025]
    np.testing.assert_allclose(x_mod, [0.55, 0.925], atol=1e-15)
    h1 = np.maximum(m.layers[0].W @ x_mod + m.layers[0].b, 0)
    mod = forward_modulated(m, x, e, [None, None])
    np.testing.assert_allclose(mod.hs[1], h1, atol=1e-12)
    np.testing.assert_allclose(mod.x_mod, x_mod, atol=1e-15)


def test_modulated_shape_errors():
    m = random_net(0, [3, 2, 2])
    with pytest.raises(ShapeError):
        forward_modulated(m, np.ones(3), np.ones(3), [None, None])
    with pytest.raises(ShapeError):
        forward(m, np.ones(4))


def test_frozen_alias_and_determinism():
    m = random_net(7, [4, 6, 3], dropout=0.5)
    x = make_rng(8, "init").uniform(size=(4, 5))
    a, b = forward_frozen(m, x), forward(m, x)
    assert np.array_equal(a.output, b.output)
    assert np.array_equal(forward_frozen(m, x).output, a.output)
    np.testing.assert_allclose(a.output.sum(axis=0), 1.0, atol=1e-12)


def test_predict_ties_and_batching():
    m = Mlp([Layer(np.zeros((2, 3)), np.zeros(2)), Layer(np.zeros((4, 2)), np.zeros(4), "softmax")], np.zeros((3, 4)))
    assert predict(m, np.ones(3)) == 0
    net = random_net(9, [4, 5, 3])
    x = make_rng(10, "init").uniform(size=(4, 3))
    batched = predict(net, x)
    assert [predict(net, x[:, i]) for i in range(3)] == batched.tolist()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 8))
def test_batched_equals_single_and_simplex(seed, n):
    m = random_net(seed, [5, 7, 4])
    x = make_rng(seed, "init", 1).uniform(size=(5, n))
    out = predict_proba(m, x)
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-12)
    for i in range(n):
        np.testing.assert_allclose(predict_proba(m, x[:, i]), out[:, i], rtol=0, atol=1e-12)


def test_inverted_dropout_expectation():
    m = random_net(11, [6, 8, 3], dropout=0.3)
    x = make_rng(12, "init").uniform(size=6)
    eval_h = forward(m, x).hs[1]
    X = np.repeat(x[:, None], 10_000, axis=1)
    train_h = forward(m, X, rng=make_rng(13, "dropout")).hs[1].mean(axis=1)
    active = eval_h > 0.05
    assert np.all(np.abs(train_h[active] - eval_h[active]) <= 0.02 * eval_h[active] + 1e-3)


def test_masks_hidden_only_by_default():
    m = random_net(0, [4, 5, 3], dropout=0.1)
    masks = sample_masks(m, 2, make_rng(0, "dropout"))
    assert masks[0] is None and masks[1].shape == (5, 2)
    m.input_dropout = True
    assert sample_masks(m, 2, make_rng(0, "dropout"))[0].shape == (4, 2)


def test_identity_hidden_layer():
    m = random_net(1, [3, 4, 2])
    m.layers[0].activation = "identity"
    x = -np.ones(3)
    np.testing.assert_allclose(forward(m, x).hs[1], m.layers[0].W @ x, atol=1e-15)


def test_checkpoint_roundtrip(tmp_path):
    m = random_net(14, [7, 5, 3], dropout=0.2)
    m.layers[0].b[:] = make_rng(1, "init").standard_normal(5)
    path = save_checkpoint(m, tmp_path / "m.ckpt", {"seed": 14})
    loaded, meta = load_checkpoint(path)
    assert checkpoint_bytes(loaded) == checkpoint_bytes(m) == path.read_bytes()
    assert meta["seed"] == 14 and meta["sha256"] == model_hash(m)
    assert loaded.dropout_rate == 0.2
    for a, b in zip(loaded.layers, m.layers):
        assert np.array_equal(a.W, b.W) and np.array_equal(a.b, b.b)
    assert np.array_equal(loaded.F, m.F)


def test_checkpoint_layout_header():
    raw = checkpoint_bytes(random_net(0, [3, 2, 2]))
    assert raw[:9] == b"PEPITAMLP"
    assert int.from_bytes(raw[9:13], "little") == 1
    assert int.from_bytes(raw[13:17], "little") == 2
    n_floats = 2 * 3 + 2 + 2 * 2 + 2 + 3 * 2
    assert len(raw) == 9 + 8 + 16 + 8 * n_floats


def test_checkpoint_rejects_corruption():
    raw = checkpoint_bytes(random_net(0, [3, 2, 2]))
    with pytest.raises(ValueError, match="magic"):
        model_from_bytes(b"X" + raw[1:])
    with pytest.raises(ValueError, match="truncated"):
        model_from_bytes(raw[:-8])
    with pytest.raises(ValueError, match="trailing"):
        model_from_bytes(raw + b"\0")
