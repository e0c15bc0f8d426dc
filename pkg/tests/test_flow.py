import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ostrich import autodiff as ad
from ostrich.autodiff import Tensor
from ostrich.errors import DomainError, SingularMatrixError, SizeError
from ostrich.flow import (
    SQUASH_EPS,
    AffineCoupling,
    ChannelMix,
    FlowStack,
    channel_mix_forward,
    channel_mix_inverse,
    flow_forward,
    flow_inverse,
    squeeze,
    unsqueeze,
)


def randomize(fs: FlowStack, rng, scale=0.05):
    for cp in fs.couplings:
        cp.w2.data[...] = rng.normal(0, scale, cp.w2.shape)
        cp.b2.data[...] = rng.normal(0, scale, cp.b2.shape)
    return fs


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([1, 3, 4]), st.sampled_from([2, 4, 8, 16, 64]), st.sampled_from([2, 4, 8, 16, 64]), st.integers(1, 2))
def test_squeeze_bitwise_round_trip(c, h, w, n):
    x = np.random.default_rng(h * w + c).normal(size=(n, c, h, w))
    s = squeeze(x).data
    assert s.shape == (n, 4 * c, h // 2, w // 2)
    assert np.array_equal(unsqueeze(s).data, x)
    assert np.array_equal(squeeze(unsqueeze(s)).data, s)


def test_squeeze_channels_are_contiguous_quadrants():
    h = w = 8
    x = np.arange(2 * h * w, dtype=float).reshape(1, 2, h, w)
    s = squeeze(x).data
    for ch in range(2):
        quads = [x[0, ch, :4, :4], x[0, ch, :4, 4:], x[0, ch, 4:, :4], x[0, ch, 4:, 4:]]
        for q in range(4):
            np.testing.assert_array_equal(s[0, 4 * ch + q], quads[q])
    # a checkerboard (space-to-depth) squeeze would put x[0,0,0,1] next to x[0,0,0,0]
    # in different channels; here horizontally adjacent pixels share a channel
    assert s[0, 0, 0, 1] == x[0, 0, 0, 1]
    checker = x[0, 0, 0::2, 0::2]
    assert not np.array_equal(s[0, 0], checker)


def test_squeeze_gradient(rng):
    x = rng.normal(size=(1, 2, 4, 6))
    g = rng.normal(size=(1, 8, 2, 3))
    assert ad.grad_check(lambda t: (squeeze(t) * g).sum(), x) <= 1e-4


@pytest.mark.parametrize("shape", [(1, 3, 5, 4), (1, 3, 4, 7), (3, 4, 4)])
def test_squeeze_rejects_bad_shapes(shape):
    with pytest.raises(SizeError):
        squeeze(np.zeros(shape))


def test_fresh_coupling_is_identity(rng):
    cp = AffineCoupling(12, hidden=8, rng=rng)
    x = Tensor(rng.normal(size=(2, 12, 4, 4)))
    assert np.array_equal(cp.forward(x).data, x.data)


def test_coupling_inverse_and_gradients(rng):
    cp = AffineCoupling(5, hidden=6, clamp=2.0, rng=rng)
    cp.w2.data[...] = rng.normal(0, 0.3, cp.w2.shape)
    cp.b2.data[...] = rng.normal(0, 0.3, cp.b2.shape)
    x = rng.normal(size=(2, 5, 5, 5))
    y = cp.forward(Tensor(x))
    np.testing.assert_allclose(cp.inverse(y).data, x, atol=1e-12)
    g = rng.normal(size=x.shape)
    assert ad.grad_check(lambda t: (cp.forward(t) * g).sum(), x) <= 1e-4
    w2 = cp.w2.data.copy()
    def via_w2(t):
        cp.w2 = t
        return (cp.forward(Tensor(x)) * g).sum()
    assert ad.grad_check(via_w2, w2) <= 1e-4


def test_coupling_scale_is_clamped(rng):
    cp = AffineCoupling(4, hidden=4, clamp=0.5, rng=rng)
    cp.b2.data[:2] = 100.0
    s, _ = cp.scale_shift(Tensor(rng.normal(size=(1, 2, 3, 3))))
    assert np.abs(s.data).max() <= 0.5


def test_channel_mix_inverse(rng):
    w = rng.normal(size=(6, 6)) + 3 * np.eye(6)
    x = rng.normal(size=(2, 6, 3, 3))
    y = channel_mix_forward(x, w)
    np.testing.assert_allclose(channel_mix_inverse(y, w).data, x, atol=1e-12)


def test_channel_mix_singular_raises():
    w = np.eye(4)
    w[3] = w[2]
    with pytest.raises(SingularMatrixError):
        channel_mix_inverse(np.zeros((1, 4, 2, 2)), w)
    with pytest.raises(SingularMatrixError):
        channel_mix_forward(np.zeros((1, 4, 2, 2)), w)


def test_color_init_structure(rng):
    m = ChannelMix(12, rng, "color")
    w = m.weight.data
    np.testing.assert_allclose(w @ w.T, np.eye(12), atol=1e-12)
    q = w[::4, ::4]
    np.testing.assert_allclose(w, np.kron(q, np.eye(4)), atol=0)
    with pytest.raises(SizeError):
        ChannelMix(6, rng, "color")


def test_reproject_restores_orthogonality():
    m = ChannelMix(4, init="identity")
    m.weight.data[...] = np.diag([1.0, 1.0, 1.0, 1e-9])
    assert m.reproject_if_needed()
    np.testing.assert_allclose(m.weight.data @ m.weight.data.T, np.eye(4), atol=1e-12)
    assert not m.reproject_if_needed()


def test_identity_stack_is_squash_of_channel0(rng):
    fs = FlowStack(depth=2, hidden=4, mix_init="identity")
    x = rng.normal(size=(2, 3, 4, 4))
    y, z = fs.forward(x)
    np.testing.assert_allclose(y.data, 1 / (1 + np.exp(-x[:, :1])), atol=1e-15)
    np.testing.assert_array_equal(z.data, x[:, 1:])


@pytest.mark.parametrize("seed", range(5))
def test_stack_round_trip(seed):
    rng = np.random.default_rng(seed)
    fs = randomize(FlowStack(depth=8, hidden=8, seed=seed), rng)
    x = rng.random((2, 3, 16, 16))
    y, z = flow_forward(x, fs)
    assert y.shape == (2, 1, 16, 16) and z.shape == (2, 2, 16, 16)
    assert np.abs(flow_inverse(y, z, fs).data - x).max() <= 1e-9


def test_inverse_round_trip_from_latent(rng):
    fs = randomize(FlowStack(depth=4, hidden=8, seed=3), rng)
    y = rng.uniform(0.01, 0.99, (1, 1, 8, 8))
    z = rng.normal(size=(1, 2, 8, 8))
    y2, z2 = fs.forward(fs.inverse(y, z))
    assert np.abs(y2.data - y).max() <= 1e-9 and np.abs(z2.data - z).max() <= 1e-9


def test_inverse_shares_parameters(rng):
    fs = randomize(FlowStack(depth=2, hidden=4, seed=1), rng)
    x = rng.random((1, 3, 8, 8))
    y, z = fs.forward(x)
    fs.couplings[0].b2.data += 0.5
    assert np.abs(fs.inverse(y, z).data - x).max() > 1e-3


def test_inverse_domain_errors(rng):
    fs = FlowStack(depth=1, hidden=4)
    z = np.zeros((1, 2, 4, 4))
    with pytest.raises(DomainError):
        fs.inverse(np.full((1, 1, 4, 4), 1.5), z)
    with pytest.raises(SizeError):
        fs.inverse(np.full((1, 1, 4, 4), 0.5), np.zeros((1, 3, 4, 4)))
    with pytest.raises(SizeError):
        fs.forward(np.zeros((1, 2, 4, 4)))


def test_inverse_clamps_binary_maps(rng):
    fs = FlowStack(depth=1, hidden=4, mix_init="identity")
    y = (rng.random((1, 1, 4, 4)) > 0.5).astype(float)
    x = fs.inverse(y, np.zeros((1, 2, 4, 4))).data
    bound = np.log((1 - SQUASH_EPS) / SQUASH_EPS)
    np.testing.assert_allclose(np.abs(x[:, 0]), bound, rtol=1e-9)


def test_stack_gradients(rng):
    fs = randomize(FlowStack(depth=2, hidden=4, seed=0), rng, 0.2)
    x = rng.random((1, 3, 4, 4))
    gy = rng.normal(size=(1, 1, 4, 4))
    gz = rng.normal(size=(1, 2, 4, 4))
    def f(t):
        y, z = fs.forward(t)
        return (y * gy).sum() + (z * gz).sum()
    assert ad.grad_check(f, x) <= 1e-4
