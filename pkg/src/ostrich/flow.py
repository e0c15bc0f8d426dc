"""Invertible generator: quadrant squeeze, affine couplings, channel mixing, squash.

The same parameter set drives both directions: ``FlowStack.forward`` maps an
RGB patch to (segmentation map, residual latent) and ``FlowStack.inverse``
maps such a pair back to an image.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError, SingularMatrixError, SizeError

SQUASH_EPS = 1e-6
DET_FLOOR = 1e-8


# ------------------------------------------------------------ squeeze


def squeeze(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,4C,H/2,W/2]; channel i becomes its TL, TR, BL, BR quadrants.

    Each output channel is a spatially contiguous block of the input, so
    neighbouring pixels stay neighbours (unlike checkerboard squeezing).
    """
    x = ad.as_tensor(x)
    if x.ndim != 4:
        raise SizeError(f"squeeze expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise SizeError(f"squeeze needs even H and W, got {h}x{w}")
    t = x.reshape(n, c, 2, h // 2, 2, w // 2).transpose(0, 1, 2, 4, 3, 5)
    return t.reshape(n, 4 * c, h // 2, w // 2)


def unsqueeze(x: Tensor) -> Tensor:
    """Exact inverse of :func:`squeeze`: [N,4C,H,W] -> [N,C,2H,2W]."""
    x = ad.as_tensor(x)
    if x.ndim != 4:
        raise SizeError(f"unsqueeze expects [N,C,H,W], got {x.shape}")
    n, c4, h, w = x.shape
    if c4 % 4:
        raise SizeError(f"unsqueeze needs a channel count divisible by 4, got {c4}")
    c = c4 // 4
    t = x.reshape(n, c, 2, 2, h, w).transpose(0, 1, 2, 4, 3, 5)
    return t.reshape(n, c, 2 * h, 2 * w)


# ----------------------------------------------------------- coupling


class AffineCoupling:
    """Affine coupling: the first ceil(C/2) channels condition scale and shift of the rest.

    The conditioner is conv3x3 -> leaky_relu(0.2) -> conv3x3; its last layer
    starts at zero so a fresh coupling is the identity.  Scale logits pass
    through ``clamp * tanh(s / clamp)``.
    """

    def __init__(self, channels: int, hidden: int = 32, clamp: float = 2.0, rng: np.random.Generator | None = None):
        if channels < 2:
            raise SizeError("coupling needs at least 2 channels")
        self.channels = channels
        self.n_pass = (channels + 1) // 2
        self.n_trans = channels - self.n_pass
        self.hidden = hidden
        self.clamp = float(clamp)
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = self.n_pass * 9
        self.w1 = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), (hidden, self.n_pass, 3, 3)), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(np.zeros((2 * self.n_trans, hidden, 3, 3)), requires_grad=True)
        self.b2 = Tensor(np.zeros(2 * self.n_trans), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def scale_shift(self, x1: Tensor) -> tuple[Tensor, Tensor]:
        h = ad.leaky_relu(ad.conv2d(x1, self.w1, self.b1, pad=1), 0.2)
        st = ad.conv2d(h, self.w2, self.b2, pad=1)
        k = self.n_trans
        s = ad.tanh(st[:, :k] * (1.0 / self.clamp)) * self.clamp
        return s, st[:, k:]

    def forward(self, x: Tensor) -> Tensor:
        x1, x2 = x[:, : self.n_pass], x[:, self.n_pass:]
        s, t = self.scale_shift(x1)
        return ad.concat([x1, x2 * ad.exp(s) + t], axis=1)

    def inverse(self, y: Tensor) -> Tensor:
        y1, y2 = y[:, : self.n_pass], y[:, self.n_pass:]
        s, t = self.scale_shift(y1)
        return ad.concat([y1, (y2 - t) * ad.exp(-s)], axis=1)


def coupling_forward(x: Tensor, layer: AffineCoupling) -> Tensor:
    return layer.forward(ad.as_tensor(x))


def coupling_inverse(y: Tensor, layer: AffineCoupling) -> Tensor:
    return layer.inverse(ad.as_tensor(y))


# -------------------------------------------------------- channel mix


def random_rotation(c: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(c, c)))
    return q * np.sign(np.diag(r))


def nearest_orthogonal(w: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(w)
    return u @ vt


class ChannelMix:
    """Invertible 1x1 convolution with a directly parameterised matrix."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None, init: str = "rotation"):
        if init == "identity":
            w = np.eye(channels)
        elif init == "rotation":
            w = random_rotation(channels, rng if rng is not None else np.random.default_rng(0))
        elif init == "color":
            # same random rotation of the colour channels inside every quadrant
            if channels % 4:
                raise SizeError("colour mixing needs a channel count divisible by 4")
            q = random_rotation(channels // 4, rng if rng is not None else np.random.default_rng(0))
            w = np.kron(q, np.eye(4))
        else:
            raise ValueError(f"unknown mix init {init!r}")
        self.weight = Tensor(w, requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight}

    def det(self) -> float:
        return float(np.linalg.det(self.weight.data))

    def reproject_if_needed(self) -> bool:
        """Snap W to the nearest orthogonal matrix when it drifts towards singularity."""
        if abs(self.det()) > DET_FLOOR:
            return False
        self.weight.data[...] = nearest_orthogonal(self.weight.data)
        return True

    def forward(self, x: Tensor) -> Tensor:
        return ad.channel_mix(x, self.weight)

    def inverse(self, y: Tensor) -> Tensor:
        return channel_mix_inverse(y, self.weight)


def channel_mix_forward(x: Tensor, weight) -> Tensor:
    w = ad.as_tensor(weight)
    if abs(np.linalg.det(w.data)) <= DET_FLOOR:
        raise SingularMatrixError("mixing matrix is (near) singular")
    return ad.channel_mix(ad.as_tensor(x), w)


def channel_mix_inverse(y: Tensor, weight) -> Tensor:
    """Solve ``W x = y`` per pixel (no gradient is recorded)."""
    y = ad.as_tensor(y)
    w = np.asarray(weight.data if isinstance(weight, Tensor) else weight, dtype=np.float64)
    if abs(np.linalg.det(w)) <= DET_FLOOR:
        raise SingularMatrixError("mixing matrix is (near) singular")
    n, c, h, wd = y.shape
    rhs = y.data.transpose(1, 0, 2, 3).reshape(c, -1)
    x = np.linalg.solve(w, rhs).reshape(c, n, h, wd).transpose(1, 0, 2, 3)
    return Tensor(np.ascontiguousarray(x))


# -------------------------------------------------------------- squash


def squash(u: Tensor) -> Tensor:
    return ad.sigmoid(u)


def unsquash(y: np.ndarray, eps: float = SQUASH_EPS) -> np.ndarray:
    y = np.clip(y, eps, 1.0 - eps)
    return np.log(y) - np.log1p(-y)


# ---------------------------------------------------------- flow stack


class FlowStack:
    """Squeeze, K x (ChannelMix, AffineCoupling), unsqueeze, squash on channel 0."""

    def __init__(
        self,
        depth: int = 8,
        in_channels: int = 3,
        hidden: int = 32,
        clamp: float = 2.0,
        seed: int = 0,
        mix_init: str = "rotation",
    ):
        self.depth = depth
        self.in_channels = in_channels
        c = 4 * in_channels
        rng = np.random.default_rng(seed)
        self.mixes = [ChannelMix(c, rng, mix_init) for _ in range(depth)]
        self.couplings = [AffineCoupling(c, hidden, clamp, rng) for _ in range(depth)]

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for k, (mix, cp) in enumerate(zip(self.mixes, self.couplings)):
            out[f"mix{k}.weight"] = mix.weight
            for name, p in cp.parameters().items():
                out[f"coupling{k}.{name}"] = p
        return out

    def reproject(self) -> int:
        return sum(m.reproject_if_needed() for m in self.mixes)

    def min_abs_det(self) -> float:
        return min(abs(m.det()) for m in self.mixes)

    def pre_squash(self, x: Tensor) -> Tensor:
        h = squeeze(x)
        for mix, cp in zip(self.mixes, self.couplings):
            h = cp.forward(mix.forward(h))
        return unsqueeze(h)

    def forward(self, x) -> tuple[Tensor, Tensor]:
        x = ad.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise SizeError(f"flow expects [N,{self.in_channels},H,W], got {x.shape}")
        u = self.pre_squash(x)
        return squash(u[:, :1]), u[:, 1:]

    def inverse(self, y, z) -> Tensor:
        y = ad.as_tensor(y)
        z = ad.as_tensor(z)
        if y.ndim != 4 or y.shape[1] != 1 or z.ndim != 4 or z.shape[1] != self.in_channels - 1:
            raise SizeError(f"inverse expects y [N,1,H,W] and z [N,{self.in_channels - 1},H,W]")
        if y.shape[0] != z.shape[0] or y.shape[2:] != z.shape[2:]:
            raise SizeError(f"y {y.shape} and z {z.shape} disagree")
        if y.data.min() < 0.0 or y.data.max() > 1.0 or not np.isfinite(y.data).all():
            raise DomainError("segmentation map must lie in [0, 1]")
        with ad.no_grad():
            u = Tensor(np.concatenate([unsquash(y.data), z.data], axis=1))
            h = squeeze(u)
            for mix, cp in zip(reversed(self.mixes), reversed(self.couplings)):
                h = mix.inverse(cp.inverse(h))
            return unsqueeze(h)


def flow_forward(x, stack: FlowStack) -> tuple[Tensor, Tensor]:
    return stack.forward(x)


def flow_inverse(y, z, stack: FlowStack) -> Tensor:
    return stack.inverse(y, z)
