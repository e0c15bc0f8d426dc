"""Objective terms and monitoring diagnostics."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import SizeError
from .flow import SQUASH_EPS, FlowStack
from .stain import ssim_batch, vo_target


@dataclass
class LossReport:
    epoch: int
    gan_pair: float
    ssim_reg: float
    cycle_diag: float
    transport_diag: float
    lambda1: float
    wall_ms: float = 0.0

    def is_finite(self) -> bool:
        return all(math.isfinite(getattr(self, f.name)) for f in fields(self))


LOG_COLUMNS = ["epoch", "gan_pair", "ssim_reg", "cycle_diag", "transport_diag", "lambda1", "wall_ms"]


def append_log(path, report: LossReport) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        if new:
            wr.writeheader()
        row = asdict(report)
        wr.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in LOG_COLUMNS})


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


# ------------------------------------------------------------- GAN term


def gan_pair_loss(disc, real_y, real_z, fake_y, fake_z) -> Tensor:
    """mean psi(real pair) - mean psi(fake pair); the critic ascends this."""
    real_y, real_z, fake_y, fake_z = (ad.as_tensor(t) for t in (real_y, real_z, fake_y, fake_z))
    if real_y.shape != fake_y.shape or real_z.shape != fake_z.shape:
        raise SizeError(f"real and fake batches differ: {real_y.shape}/{real_z.shape} vs {fake_y.shape}/{fake_z.shape}")
    # one critic pass over the stacked batch; the critic treats samples independently
    n = real_y.shape[0]
    scores = disc(ad.concat([real_y, fake_y], axis=0), ad.concat([real_z, fake_z], axis=0))
    return scores[:n].mean() - scores[n:].mean()


def generator_adv_loss(disc, fake_y, fake_z) -> Tensor:
    """The part of the pair loss the generators control: -mean psi(fake pair)."""
    return -disc(fake_y, fake_z).mean()


# ------------------------------------------------------------ SSIM term


def vo_targets(x) -> np.ndarray:
    """Weak targets for a batch [N,3,H,W] -> [N,1,H,W]."""
    arr = np.asarray(x.data if isinstance(x, Tensor) else x)
    return np.stack([vo_target(img) for img in arr])


def ssim_reg_loss(y_pred, x=None, targets=None) -> Tensor:
    """mean_i |1 - SSIM(y_pred_i, VO target_i)|; targets carry no gradient."""
    y_pred = ad.as_tensor(y_pred)
    if targets is None:
        if x is None:
            raise ValueError("need either x or precomputed targets")
        targets = vo_targets(x)
    targets = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if targets.shape != y_pred.shape:
        raise SizeError(f"targets {targets.shape} do not match predictions {y_pred.shape}")
    return ad.tabs(1.0 - ssim_batch(y_pred, Tensor(targets))).mean()


def lambda1_schedule(epoch: int, lambda0: float = 10.0, gamma: float = 0.97) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return lambda0 * gamma**epoch


# ---------------------------------------------------------- diagnostics


def _l1_mean(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).mean())


def cycle_terms(stack: FlowStack, batch_x, batch_y, batch_z, x_latent=None) -> dict[str, float]:
    """The four round-trip residuals, each as a mean absolute error.

    The embedding side is realised by the flow's residual channels, so both
    x-terms invert through (F(x), residual(x)) and the z-term reads the
    residual back.  ``x_latent`` overrides the residual used for the x-terms
    (fault injection).
    """
    x = np.asarray(ad.as_tensor(batch_x).data)
    y = np.asarray(ad.as_tensor(batch_y).data)
    z = np.asarray(ad.as_tensor(batch_z).data)
    with ad.no_grad():
        fy, fz = stack.forward(x)
        lat = fz.data if x_latent is None else np.asarray(x_latent)
        x_back = stack.inverse(fy.data, lat).data
        # the inverse clamps y into the squash range, so that is the y it must reproduce
        y = np.clip(y, SQUASH_EPS, 1.0 - SQUASH_EPS)
        gen = stack.inverse(y, z)
        y_back, z_back = stack.forward(gen)
    x_term = _l1_mean(x, x_back)
    return {
        "x_via_y": x_term,
        "x_via_z": x_term,
        "y": _l1_mean(y, y_back.data),
        "z": _l1_mean(z, z_back.data),
    }


def cycle_diagnostic(stack: FlowStack, E, batch_x, batch_y, batch_z, x_latent=None) -> float:
    """Sum of the four round-trip terms; zero up to rounding for an invertible stack."""
    return float(sum(cycle_terms(stack, batch_x, batch_y, batch_z, x_latent).values()))


def transport_cost_diag(x, y, z, stack: FlowStack, F, E, lambda1: float = 0.0, targets=None) -> float:
    """||x - G(y,z)||_1/N + ||F(x) - y||_1/N + ||E(x) - z||_1/N + lambda1 * l_ssim."""
    x = np.asarray(ad.as_tensor(x).data)
    y = np.asarray(ad.as_tensor(y).data)
    z = np.asarray(ad.as_tensor(z).data)
    n = x.shape[0]
    with ad.no_grad():
        gx = stack.inverse(y, z).data
        fx = F(x)
        ex = E(x)
        total = np.abs(x - gx).sum() / n + np.abs(fx.data - y).sum() / n + np.abs(ex.data - z).sum() / n
        if lambda1:
            total += lambda1 * float(ssim_reg_loss(fx, x, targets).data)
    return float(total)
