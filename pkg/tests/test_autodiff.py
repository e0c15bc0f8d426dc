import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ostrich import autodiff as ad
from ostrich.autodiff import Tensor
from ostrich.errors import NumericError, ShapeError, SizeError, StateError

TOL = 1e-4


def conv_loops(x, k, b=None, stride=1, pad=0):
    """Direct nested-loop cross-correlation."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for r in range(ho):
                for c in range(wo):
                    patch = xp[i, :, r * stride:r * stride + kh, c * stride:c * stride + kw]
                    out[i, o, r, c] = (patch * k[o]).sum() + (0.0 if b is None else b[o])
    return out


@pytest.mark.parametrize("cin,cout,stride,pad", [(6, 3, 1, 1), (3, 6, 1, 1), (3, 4, 2, 1), (2, 2, 1, 0), (5, 1, 1, 1)])
def test_conv2d_matches_loops(rng, cin, cout, stride, pad):
    x = rng.normal(size=(2, cin, 7, 6))
    k = rng.normal(size=(cout, cin, 3, 3))
    b = rng.normal(size=cout)
    out = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, pad=pad).data
    np.testing.assert_allclose(out, conv_loops(x, k, b, stride, pad), atol=1e-12)


@pytest.mark.parametrize("cin,cout,stride,pad", [(6, 3, 1, 1), (3, 6, 1, 1), (3, 4, 2, 1), (2, 2, 1, 0)])
def test_conv2d_gradients(rng, cin, cout, stride, pad):
    x = rng.normal(size=(2, cin, 6, 6))
    k = rng.normal(size=(cout, cin, 3, 3))
    b = rng.normal(size=cout)
    w_out = rng.normal(size=(2, cout, (6 + 2 * pad - 3) // stride + 1, (6 + 2 * pad - 3) // stride + 1))
    f_x = lambda t: (ad.conv2d(t, Tensor(k), Tensor(b), stride=stride, pad=pad) * w_out).sum()
    f_k = lambda t: (ad.conv2d(Tensor(x), t, Tensor(b), stride=stride, pad=pad) * w_out).sum()
    f_b = lambda t: (ad.conv2d(Tensor(x), Tensor(k), t, stride=stride, pad=pad) * w_out).sum()
    assert ad.grad_check(f_x, x) <= TOL
    assert ad.grad_check(f_k, k) <= TOL
    assert ad.grad_check(f_b, b) <= TOL


UNARY = {
    "exp": lambda t: ad.exp(t * 0.3),
    "log": lambda t: ad.log(ad.tabs(t) + 1.5),
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "abs": lambda t: ad.tabs(t + 0.05),
    "leaky_relu": lambda t: ad.leaky_relu(t + 0.05, 0.2),
    "pow": lambda t: (t * t + 1.0) ** 1.5,
    "div": lambda t: 1.0 / (t * t + 1.0),
    "instance_norm": ad.instance_norm,
    "reshape": lambda t: t.reshape(2, -1) * 2.0,
    "transpose": lambda t: t.transpose(0, 2, 3, 1) * 2.0,
    "getitem": lambda t: t[:, 1:, ::2] * 2.0,
    "concat": lambda t: ad.concat([t, t * t], axis=1),
    "mean_axis": lambda t: t.mean(axis=(2, 3), keepdims=True) * t,
    "sum_axis": lambda t: t.sum(axis=1) ** 2,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(rng, name):
    x = rng.normal(size=(2, 3, 4, 4))
    w = rng.normal(size=UNARY[name](Tensor(x)).shape)
    assert ad.grad_check(lambda t: (UNARY[name](t) * w).sum(), x) <= TOL


def test_binary_broadcast_gradients(rng):
    a = rng.normal(size=(2, 3, 4, 4))
    b = rng.normal(size=(1, 3, 1, 1))
    for op in (ad.add, ad.sub, ad.mul, lambda p, q: ad.div(p, q * q + 1.0)):
        assert ad.grad_check(lambda t: (op(t, Tensor(b)) ** 2).sum(), a) <= TOL
        assert ad.grad_check(lambda t: (op(Tensor(a), t) ** 2).sum(), b) <= TOL


def test_channel_mix_gradients(rng):
    x = rng.normal(size=(2, 4, 3, 3))
    w = rng.normal(size=(4, 4))
    g = rng.normal(size=x.shape)
    assert ad.grad_check(lambda t: (ad.channel_mix(t, Tensor(w)) * g).sum(), x) <= TOL
    assert ad.grad_check(lambda t: (ad.channel_mix(Tensor(x), t) * g).sum(), w) <= TOL


def test_shared_subexpression_accumulates(rng):
    x = rng.normal(size=(3, 3))
    assert ad.grad_check(lambda t: (t * t + ad.tanh(t) * t).sum(), x) <= TOL


def test_backward_requires_scalar():
    t = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        ad.backward(t * 2.0)


def test_step_without_grad_raises():
    p = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(StateError):
        ad.step([p], 0.1)


def test_step_directions():
    p = Tensor(np.ones(2), requires_grad=True)
    p.grad = np.array([1.0, -2.0])
    ad.step([p], 0.5, "descend")
    np.testing.assert_array_equal(p.data, [0.5, 2.0])
    assert p.grad is None
    p.grad = np.array([1.0, 1.0])
    ad.step([p], 1.0, "ascend")
    np.testing.assert_array_equal(p.data, [1.5, 3.0])


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert ad.clip_grad_norm([a, b], 1.0) == 5.0
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8], atol=1e-15)


def test_conv_rejects_bad_shapes_and_nonfinite():
    x = Tensor(np.ones((1, 2, 5, 5)))
    with pytest.raises(SizeError):
        ad.conv2d(x, Tensor(np.ones((1, 3, 3, 3))))
    bad = np.ones((1, 2, 5, 5))
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        ad.conv2d(Tensor(bad), Tensor(np.ones((1, 2, 3, 3))))


def test_no_grad_records_nothing():
    p = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        out = (p * 2.0).sum()
    assert not out.requires_grad and out._parents == ()
    assert ad.is_grad_enabled()


def test_rng_state_round_trip():
    r = ad.RngState(7)
    r.normal(5)
    saved = r.get_state()
    a = r.normal((2, 3))
    r.set_state(saved)
    np.testing.assert_array_equal(a, r.normal((2, 3)))
    np.testing.assert_array_equal(ad.RngState(7).normal(4), ad.RngState(7).normal(4))
    assert not np.array_equal(r.spawn(1).normal(4), r.spawn(2).normal(4))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(3, 7), st.integers(0, 2), st.integers(1, 2))
def test_conv_property_matches_loops(n, c, h, pad, stride):
    r = np.random.default_rng(n * 100 + c * 10 + h)
    x = r.normal(size=(n, c, h, h))
    k = r.normal(size=(2, c, 3, 3))
    if h + 2 * pad < 3:
        return
    out = ad.conv2d(Tensor(x), Tensor(k), stride=stride, pad=pad).data
    np.testing.assert_allclose(out, conv_loops(x, k, None, stride, pad), atol=1e-11)
