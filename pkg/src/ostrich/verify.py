"""Self-check battery: one line per check, at least one check per module."""
from __future__ import annotations

import math
import tempfile
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import integrate

from . import _accel
from . import autodiff as ad
from .autodiff import Tensor
from .data import PriorSampler, split_dataset, synth_histology
from .flow import FlowStack, squeeze, unsqueeze
from .losses import cycle_diagnostic, ssim_reg_loss
from .metrics import dice, jaccard, paired_t_one_tailed, wilcoxon_one_tailed
from .operators import PairDiscriminator
from .stain import hed_to_rgb, otsu_threshold, rgb_to_hed, ssim, voronoi_labeling
from .trainer import TrainConfig, TrainState, checkpoint_load, checkpoint_save


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name:<28} {self.detail}"


CHECKS: list[tuple[str, Callable]] = []


def check(name: str):
    def deco(fn):
        CHECKS.append((name, fn))
        return fn

    return deco


def _small_stack(seed: int) -> FlowStack:
    fs = FlowStack(depth=4, hidden=8, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for cp in fs.couplings:
        cp.w2.data[...] = rng.normal(0, 0.02, cp.w2.shape)
        cp.b2.data[...] = rng.normal(0, 0.02, cp.b2.shape)
    return fs


# ------------------------------------------------------------- checks


@check("autodiff.gradcheck")
def _gradcheck(seed, fault):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 6, 6))
    w = Tensor(rng.normal(size=(4, 3, 3, 3)))
    err = max(
        ad.grad_check(lambda t: (ad.conv2d(t, w, pad=1) ** 2).sum(), x),
        ad.grad_check(lambda t: ad.sigmoid(ad.instance_norm(t)).sum(), x),
        ad.grad_check(lambda t: ad.tanh(t * 0.5).mean(), x),
    )
    return err <= 1e-4, f"max rel err {err:.2e}"


@check("accel.backend_equivalence")
def _backends(seed, fault):
    rng = np.random.default_rng(seed)
    mask = rng.random((40, 40)) > 0.6
    xp = rng.normal(size=(2, 3, 10, 10))
    prev = _accel.backend()
    try:
        outs = []
        for b in ("numpy", "numba"):
            _accel.set_backend(b)
            outs.append((_accel.connected_components_8(mask), _accel.im2col(xp, 3, 3, 1, 8, 8)))
    finally:
        _accel.set_backend(prev)
    (l0, c0), i0 = outs[0]
    (l1, c1), i1 = outs[1]
    ok = c0 == c1 and np.array_equal(l0, l1) and np.array_equal(i0, i1)
    return ok, f"{c0} components, im2col bitwise equal={np.array_equal(i0, i1)}"


@check("flow.squeeze_identity")
def _squeeze(seed, fault):
    x = np.random.default_rng(seed).normal(size=(2, 3, 8, 16))
    back = unsqueeze(squeeze(x)).data
    return np.array_equal(back, x), "bitwise"


@check("flow.round_trip")
def _round_trip(seed, fault):
    fs = _small_stack(seed)
    x = np.random.default_rng(seed).random((2, 3, 16, 16))
    y, z = fs.forward(x)
    if fault == "inverse":
        z = Tensor(z.data + 0.1)
    err = float(np.abs(fs.inverse(y, z).data - x).max())
    return err <= 1e-9, f"max |G(F(x)) - x| = {err:.2e}"


@check("losses.cycle_diagnostic")
def _cycle(seed, fault):
    fs = _small_stack(seed)
    rng = np.random.default_rng(seed)
    x = rng.random((2, 3, 16, 16))
    y = rng.uniform(0.05, 0.95, (2, 1, 16, 16))
    z = rng.normal(size=(2, 2, 16, 16))
    lat = fs.forward(x)[1].data + 0.1 if fault == "inverse" else None
    val = cycle_diagnostic(fs, None, x, y, z, x_latent=lat)
    return val <= 1e-8, f"sum of round-trip terms {val:.2e}"


@check("losses.ssim_gradient")
def _ssim_grad(seed, fault):
    rng = np.random.default_rng(seed)
    t = (rng.random((1, 1, 14, 14)) > 0.5).astype(float)
    err = ad.grad_check(lambda y: ssim_reg_loss(y, targets=t), rng.uniform(0.2, 0.8, (1, 1, 14, 14)))
    return err <= 1e-4, f"max rel err {err:.2e}"


@check("operators.clip_postcondition")
def _clip(seed, fault):
    d = PairDiscriminator(depth=2, width=4, clip=0.5, seed=seed)
    d.enforce(0.01)
    m = d.max_abs_weight()
    return m <= 0.01, f"max |w| = {m:.3g}"


@check("stain.hed_round_trip")
def _hed(seed, fault):
    conc = np.random.default_rng(seed).uniform(0, 1, (3, 8, 8))
    err = float(np.abs(rgb_to_hed(hed_to_rgb(conc)) - conc).max())
    return err <= 1e-10, f"max err {err:.2e}"


def otsu_bruteforce(values: np.ndarray, bins: int = 256) -> float:
    """Exhaustive threshold search with exact rational between-class variance."""
    lo, hi = float(values.min()), float(values.max())
    idx = np.clip(np.floor((values - lo) / (hi - lo) * bins).astype(int), 0, bins - 1).tolist()
    best, arg = None, -1
    for k in range(bins - 1):
        a = [i for i in idx if i <= k]
        b = [i for i in idx if i > k]
        if not a or not b:
            continue
        n = len(idx)
        w0, w1 = Fraction(len(a), n), Fraction(len(b), n)
        m0, m1 = Fraction(sum(a), len(a)), Fraction(sum(b), len(b))
        var = w0 * w1 * (m0 - m1) ** 2
        if best is None or var > best:
            best, arg = var, k
    return lo + (arg + 0.5) * (hi - lo) / bins


@check("stain.otsu_bruteforce")
def _otsu(seed, fault):
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(5):
        v = rng.normal(size=300) + 3 * (rng.random(300) > 0.5)
        bad += otsu_threshold(v) != otsu_bruteforce(v)
    return bad == 0, f"{5 - bad}/5 histograms agree exactly"


@check("stain.voronoi_bruteforce")
def _voronoi(seed, fault):
    rng = np.random.default_rng(seed)
    mask = rng.random((20, 20)) > 0.3
    seeds = rng.uniform(0, 20, (5, 2))
    lab = voronoi_labeling(mask, seeds)
    rr, cc = np.mgrid[0:20, 0:20]
    d2 = (rr[..., None] - seeds[:, 0]) ** 2 + (cc[..., None] - seeds[:, 1]) ** 2
    near = np.where(mask, d2.argmin(axis=2) + 1, 0)
    ridge = np.zeros_like(mask)
    for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        nb = np.zeros_like(near)
        src = near[max(dr, 0):20 + min(dr, 0), max(dc, 0):20 + min(dc, 0)]
        nb[max(-dr, 0):20 + min(-dr, 0), max(-dc, 0):20 + min(-dc, 0)] = src
        ridge |= (nb > 0) & (nb < near)
    ok = np.array_equal(lab > 0, (near > 0) & ~ridge)
    return ok, "foreground and ridges match brute force"


@check("stain.ssim_identity")
def _ssim_id(seed, fault):
    a = np.random.default_rng(seed).random((1, 16, 16))
    v = ssim(a, a)
    return abs(v - 1) <= 1e-12, f"SSIM(x,x) = {v:.15f}"


@check("metrics.dice_jaccard_identity")
def _dj(seed, fault):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(50):
        p, g = rng.random((12, 12)) > 0.5, rng.random((12, 12)) > 0.5
        d = dice(p, g)
        worst = max(worst, abs(jaccard(p, g) - d / (2 - d)))
    return worst <= 1e-12, f"max |J - D/(2-D)| = {worst:.1e}"


@check("metrics.paired_t_quadrature")
def _ttest(seed, fault):
    p = paired_t_one_tailed([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
    t, df = math.sqrt(12.0), 2
    dens = lambda s: math.gamma((df + 1) / 2) / (math.sqrt(df * math.pi) * math.gamma(df / 2)) * (1 + s * s / df) ** (-(df + 1) / 2)
    ref = integrate.quad(dens, t, np.inf)[0]
    return abs(p - ref) <= 1e-3, f"p = {p:.6f}, quadrature {ref:.6f}"


@check("metrics.wilcoxon_exact")
def _wilcoxon(seed, fault):
    p = wilcoxon_one_tailed([1, 2, 3, 4, 5], [0, 0, 0, 0, 0])
    return abs(p - 1 / 32) <= 1e-15, f"p = {p}"


@check("data.split_and_prior")
def _data(seed, fault):
    tr, va, te = split_dataset(list(range(30)), (5, 1, 4), seed=seed)
    draws = PriorSampler(ad.RngState(seed), (10, 2, 100, 100)).sample()
    ok = (len(tr), len(va), len(te)) == (15, 3, 12) and abs(draws.mean()) < 0.01 and abs(draws.var() - 1) < 0.01
    return ok, f"split {len(tr)}/{len(va)}/{len(te)}, prior mean {draws.mean():+.4f} var {draws.var():.4f}"


@check("data.synthetic_determinism")
def _synth(seed, fault):
    a = synth_histology(2, 32, 32, seed=seed)
    b = synth_histology(2, 32, 32, seed=seed)
    ok = all(np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask) for x, y in zip(a.items, b.items))
    return ok, "identical bytes for one seed"


@check("trainer.checkpoint_bytes")
def _ckpt(seed, fault):
    cfg = TrainConfig(flow_depth=2, flow_hidden=4, enc_hidden=4, disc_depth=2, disc_width=4, seed=seed)
    st = TrainState.fresh(cfg)
    with tempfile.TemporaryDirectory() as tmp:
        p1, p2 = Path(tmp) / "a.ostr", Path(tmp) / "b.ostr"
        checkpoint_save(st, p1)
        checkpoint_save(checkpoint_load(p1), p2)
        same = p1.read_bytes() == p2.read_bytes()
    return same, "save/load/save byte-identical"


def run_checks(seed: int = 0, fault: str | None = None) -> list[CheckResult]:
    """Run every registered check; exceptions turn into failures rather than aborting the battery."""
    out = []
    for name, fn in CHECKS:
        try:
            ok, detail = fn(seed, fault)
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        out.append(CheckResult(name, bool(ok), detail))
    return out
