import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stepattn import nn


def _num_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def test_conv_matches_correlate():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 145))
    k = rng.normal(size=49)
    y = nn.conv1d_forward(x, k)
    assert y.shape == (3, 145)
    for r in range(3):
        ref = np.correlate(np.pad(x[r], 24), k, mode="valid")
        np.testing.assert_allclose(y[r], ref, rtol=1e-12, atol=1e-12)


def test_conv_backward_numeric():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 20))
    k = rng.normal(size=5)
    w = rng.normal(size=(2, 20))
    f = lambda: float(np.sum(nn.conv1d_forward(x, k, padding=2) * w))
    dx, dk = nn.conv1d_backward(x, k, w, padding=2)
    np.testing.assert_allclose(dx, _num_grad(f, x), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(dk, _num_grad(f, k), rtol=1e-6, atol=1e-8)


def test_layernorm_forward_and_backward():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 9))
    g = rng.normal(size=9)
    b = rng.normal(size=9)
    out, cache = nn.layernorm_forward(x, g, b)
    mu = x.mean(1, keepdims=True)
    var = ((x - mu) ** 2).mean(1, keepdims=True)
    np.testing.assert_allclose(out, (x - mu) / np.sqrt(var + 1e-5) * g + b, rtol=1e-12)
    w = rng.normal(size=(4, 9))
    f = lambda: float(np.sum(nn.layernorm_forward(x, g, b)[0] * w))
    dx, dg, db = nn.layernorm_backward(w, cache)
    np.testing.assert_allclose(dx, _num_grad(f, x), rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(dg, _num_grad(f, g), rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(db, _num_grad(f, b), rtol=1e-5, atol=1e-8)


def test_pool_oracle():
    x = np.arange(145, dtype=float)
    y = nn.avgpool_forward(x)
    assert y.shape == (24,)
    assert all(y[o] == pytest.approx(np.mean(x[6 * o : 6 * o + 7])) for o in range(24))
    with pytest.raises(ValueError):
        nn.avgpool_forward(np.zeros(10))


@settings(max_examples=100)
@given(arrays(np.float64, (3, 12), elements=st.floats(-30, 30)), arrays(np.bool_, (3, 12)))
def test_masked_softmax_contract(logits, mask):
    mask[:, 0] = True
    p = nn.masked_softmax(logits, mask)
    assert np.all(p[~mask] == 0.0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p >= 0)


def test_masked_softmax_empty_raises():
    with pytest.raises(nn.EmptyAttentionSet):
        nn.masked_softmax(np.zeros((1, 3)), np.zeros((1, 3), bool))


def test_softmax_backward_numeric():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(2, 6))
    m = rng.random((2, 6)) > 0.3
    m[:, 0] = True
    w = rng.normal(size=(2, 6))
    p = nn.masked_softmax(z, m)
    f = lambda: float(np.sum(nn.masked_softmax(z, m) * w))
    np.testing.assert_allclose(nn.masked_softmax_backward(p, w), _num_grad(f, z), atol=1e-8)


def test_affine_relu_mae():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 3))
    W = rng.normal(size=(2, 3))
    b = rng.normal(size=2)
    np.testing.assert_allclose(nn.affine_forward(x, W, b), x @ W.T + b)
    assert list(nn.relu_forward(np.array([-1.0, 0.0, 2.0]))) == [0.0, 0.0, 2.0]
    assert nn.mae([1, 2, 3], [2, 2, 2]) == pytest.approx(2 / 3)
    assert list(nn.mae_backward([1.0, 2.0, 3.0], [2, 2, 2])) == pytest.approx([-1 / 3, 0, 1 / 3])


def test_adam_hand_oracle():
    p = nn.ParamTensor("w", np.array([1.0, -2.0]))
    opt = nn.Adam(0.1)
    p.grad[...] = [0.5, -1.0]
    opt.step([p])
    # first bias-corrected step moves each coordinate by lr * sign(grad)
    np.testing.assert_allclose(p.values, [0.9, -1.9], rtol=1e-7)
    assert np.all(p.grad == 0)
    before = p.values[0]
    p.grad[...] = [0.5, 0.0]
    opt.step([p])
    m1 = 0.9 * 0.05 + 0.1 * 0.5
    v1 = 0.999 * 0.00025 + 0.001 * 0.25
    step = 0.1 * (m1 / (1 - 0.81)) / (np.sqrt(v1 / (1 - 0.999**2)) + 1e-8)
    assert p.values[0] == pytest.approx(before - step, rel=1e-12)


def test_adam_zero_lr_is_fixed_point():
    p = nn.ParamTensor("w", np.array([0.3, 0.7]))
    p.grad[...] = [5.0, -5.0]
    nn.Adam(0.0).step([p])
    assert list(p.values) == [0.3, 0.7]


def test_finite_diff_check_detects_wrong_gradient():
    p = nn.ParamTensor("w", np.array([0.5, -1.5, 2.0]))

    def good():
        p.grad[...] = 2 * p.values
        return float(np.sum(p.values**2))

    def bad():
        p.grad[...] = 2.5 * p.values
        return float(np.sum(p.values**2))

    assert nn.finite_diff_check(good, [p]) < 1e-8
    assert nn.finite_diff_check(bad, [p]) > 1e-2


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    ps = [nn.ParamTensor("b", rng.normal(size=(3, 4))), nn.ParamTensor("a", rng.normal(size=7) * 1e-300)]
    path = tmp_path / "m.ckpt"
    nn.save_checkpoint(path, ps, {"d_k": 8})
    tensors, meta = nn.load_checkpoint(path)
    assert meta == {"d_k": "8"}
    for p in ps:
        assert np.array_equal(tensors[p.name], p.values)
    first = path.read_bytes()
    nn.save_checkpoint(path, ps, {"d_k": 8})
    assert path.read_bytes() == first
    bad = tmp_path / "bad.ckpt"
    bad.write_text("nope\n")
    with pytest.raises(ValueError):
        nn.load_checkpoint(bad)
