import numpy as np
import pytest

from ostrich import autodiff as ad
from ostrich.errors import SizeError
from ostrich.flow import FlowStack
from ostrich.operators import (
    EmbedOperatorE,
    PairDiscriminator,
    SegOperatorF,
    discriminate,
    e_forward,
    empirical_slope,
    f_forward,
    g_synthesize,
    lipschitz_enforce,
)


def test_f_and_g_share_storage(rng):
    fs = FlowStack(depth=2, hidden=4)
    op = SegOperatorF(fs)
    assert all(p is q for p, q in zip(op.parameters().values(), fs.parameters().values()))
    x = rng.random((1, 3, 8, 8))
    y = f_forward(op, x)
    assert y.shape == (1, 1, 8, 8)
    assert 0 < y.data.min() and y.data.max() < 1
    _, z = op.with_residual(x)
    np.testing.assert_allclose(g_synthesize(op, y, z).data, x, atol=1e-12)


def test_embed_shapes_and_zero_init(rng):
    x = rng.random((2, 3, 8, 8))
    assert e_forward(EmbedOperatorE(hidden=4), x).shape == (2, 2, 8, 8)
    assert not e_forward(EmbedOperatorE(hidden=4, zero=True), x).data.any()


def test_embed_gradient(rng):
    e = EmbedOperatorE(hidden=3, seed=5)
    x = rng.random((1, 3, 4, 4))
    g = rng.normal(size=(1, 2, 4, 4))
    assert ad.grad_check(lambda t: (e(t) * g).sum(), x) <= 1e-4


def test_discriminator_outputs_one_score_per_sample(rng):
    d = PairDiscriminator(depth=2, width=4)
    out = discriminate(d, rng.random((3, 1, 16, 16)), rng.normal(size=(3, 2, 16, 16)))
    assert out.shape == (3,)
    assert not discriminate(PairDiscriminator(depth=2, width=4, zero=True), rng.random((2, 1, 8, 8)), rng.normal(size=(2, 2, 8, 8))).data.any()
    with pytest.raises(SizeError):
        d(np.zeros((2, 1, 8, 8)), np.zeros((1, 2, 8, 8)))


def test_discriminator_is_per_sample(rng):
    d = PairDiscriminator(depth=2, width=4, clip=0.5)
    y, z = rng.random((4, 1, 8, 8)), rng.normal(size=(4, 2, 8, 8))
    together = d(y, z).data
    alone = np.concatenate([d(y[i:i + 1], z[i:i + 1]).data for i in range(4)])
    np.testing.assert_allclose(together, alone, atol=1e-14)


def test_clip_postcondition(rng):
    d = PairDiscriminator(depth=3, width=4, clip=1.0)
    for p in d.parameters().values():
        p.data[...] = rng.normal(0, 1, p.shape)
    lipschitz_enforce(d, 0.01)
    assert d.max_abs_weight() <= 0.01
    with pytest.raises(ValueError):
        lipschitz_enforce(d, 0.0)


def test_slope_shrinks_with_clip(rng):
    slopes = []
    for c in (0.5, 0.05, 0.005):
        d = PairDiscriminator(depth=2, width=4, clip=1.0, seed=3)
        for p in d.parameters().values():
            p.data[...] = rng.uniform(-1, 1, p.shape)
        d.enforce(c)
        slopes.append(empirical_slope(d, n_probes=4, shape=(1, 1, 8, 8)))
    assert slopes[0] > slopes[1] > slopes[2]
