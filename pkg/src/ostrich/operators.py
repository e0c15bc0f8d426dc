"""The trainable actors: segmentation operator F, embedding operator E, pair critic."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import SizeError
from .flow import FlowStack, squeeze, unsqueeze


def _he(rng, shape, gain=2.0):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(gain / fan_in), shape)


class SegOperatorF:
    """Segmentation operator; its inverse (the synthesis path) shares every parameter."""

    def __init__(self, stack: FlowStack):
        self.stack = stack

    def parameters(self) -> dict[str, Tensor]:
        return self.stack.parameters()

    def __call__(self, x) -> Tensor:
        return self.stack.forward(x)[0]

    def with_residual(self, x) -> tuple[Tensor, Tensor]:
        return self.stack.forward(x)

    def synthesize(self, y, z) -> Tensor:
        return self.stack.inverse(y, z)


class EmbedOperatorE:
    """Feed-forward encoder to a 2-channel embedding.

    Works at half resolution on the quadrant-squeezed input (3 -> 12
    channels), runs three 3x3 convs 12 -> hidden -> hidden -> 8 and
    unsqueezes back to [N,2,H,W].
    """

    def __init__(self, hidden: int = 32, in_channels: int = 3, out_channels: int = 2, seed: int = 1, zero: bool = False):
        rng = np.random.default_rng(seed)
        self.in_channels = in_channels
        self.out_channels = out_channels
        shapes = [(hidden, 4 * in_channels, 3, 3), (hidden, hidden, 3, 3), (4 * out_channels, hidden, 3, 3)]
        self.weights = []
        self.biases = []
        for i, shp in enumerate(shapes):
            w = np.zeros(shp) if zero else _he(rng, shp, 2.0 if i < 2 else 0.1)
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros(shp[0]), requires_grad=True))

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"conv{i}.w"] = w
            out[f"conv{i}.b"] = b
        return out

    def __call__(self, x) -> Tensor:
        h = squeeze(ad.as_tensor(x))
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.conv2d(h, w, b, pad=1)
            if i < last:
                h = ad.leaky_relu(ad.instance_norm(h), 0.2)
        return unsqueeze(h)


class PairDiscriminator:
    """Wasserstein critic on concat(y, z): strided convs with instance norm, then a global mean.

    No output nonlinearity; the Lipschitz bound comes from clipping every
    parameter into [-clip, clip].
    """

    def __init__(self, depth: int = 4, width: int = 64, in_channels: int = 3, clip: float = 0.01, seed: int = 2, zero: bool = False):
        rng = np.random.default_rng(seed)
        self.clip = float(clip)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        cin = in_channels
        for _ in range(depth):
            shp = (width, cin, 4, 4)
            w = np.zeros(shp) if zero else rng.uniform(-self.clip, self.clip, shp)
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros(width), requires_grad=True))
            cin = width
        head = np.zeros((1, cin, 1, 1)) if zero else rng.uniform(-self.clip, self.clip, (1, cin, 1, 1))
        self.head = Tensor(head, requires_grad=True)
        self.head_bias = Tensor(np.zeros(1), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"conv{i}.w"] = w
            out[f"conv{i}.b"] = b
        out["head.w"] = self.head
        out["head.b"] = self.head_bias
        return out

    def __call__(self, y, z) -> Tensor:
        y, z = ad.as_tensor(y), ad.as_tensor(z)
        if y.ndim != 4 or z.ndim != 4 or y.shape[0] != z.shape[0] or y.shape[2:] != z.shape[2:]:
            raise SizeError(f"pair shapes disagree: y {y.shape}, z {z.shape}")
        h = ad.concat([y, z], axis=1)
        for w, b in zip(self.weights, self.biases):
            h = ad.leaky_relu(ad.instance_norm(ad.conv2d(h, w, b, stride=2, pad=1)), 0.2)
        h = ad.conv2d(h, self.head, self.head_bias)
        return h.mean(axis=(1, 2, 3))

    def enforce(self, c: float | None = None) -> None:
        lipschitz_enforce(self, self.clip if c is None else c)

    def max_abs_weight(self) -> float:
        return max(float(np.abs(p.data).max()) for p in self.parameters().values())


def f_forward(op: SegOperatorF, x) -> Tensor:
    return op(x)


def e_forward(op: EmbedOperatorE, x) -> Tensor:
    return op(x)


def g_synthesize(op: SegOperatorF, y, z) -> Tensor:
    return op.synthesize(y, z)


def discriminate(disc: PairDiscriminator, y, z) -> Tensor:
    return disc(y, z)


def lipschitz_enforce(disc: PairDiscriminator, c: float) -> None:
    if c <= 0:
        raise ValueError("clip bound must be positive")
    for p in disc.parameters().values():
        np.clip(p.data, -c, c, out=p.data)


def empirical_slope(disc: PairDiscriminator, n_probes: int = 16, shape=(1, 1, 16, 16), seed: int = 0) -> float:
    """Largest |psi(p1) - psi(p2)| / ||p1 - p2||_1 over random probe pairs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    with ad.no_grad():
        for _ in range(n_probes):
            y1, y2 = rng.random(shape), rng.random(shape)
            zs = (shape[0], 2) + tuple(shape[2:])
            z1, z2 = rng.normal(size=zs), rng.normal(size=zs)
            d = abs(disc(y1, z1).data[0] - disc(y2, z2).data[0])
            dist = np.abs(y1 - y2).sum() + np.abs(z1 - z2).sum()
            worst = max(worst, d / dist)
    return worst
