"""Alternating critic/generator training loop, early stopping, checkpoints."""
from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import RngState, Tensor
from .data import Dataset
from .errors import DataError, FormatError, NumericError
from .flow import FlowStack
from .losses import (
    LossReport,
    append_log,
    cycle_diagnostic,
    generator_adv_loss,
    gan_pair_loss,
    lambda1_schedule,
    ssim_reg_loss,
    transport_cost_diag,
    vo_targets,
)
from .operators import EmbedOperatorE, PairDiscriminator, SegOperatorF

log = logging.getLogger(__name__)

MAGIC = b"OSTR"
VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 200
    batch: int = 8
    lr_disc: float = 5e-3
    lr_F: float = 2e-2
    lr_E: float = 5e-3
    clip: float = 0.01
    critic_steps: int = 3
    lambda1_0: float = 10.0
    gamma: float = 0.97
    lambda2: float = 0.0
    grad_clip: float = 1.0
    patience: int = 20
    seed: int = 42
    flow_depth: int = 8
    flow_hidden: int = 16
    scale_clamp: float = 0.5
    mix_init: str = "color"
    enc_hidden: int = 16
    disc_depth: int = 4
    disc_width: int = 16

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "mix_init":
                if v not in ("rotation", "color", "identity"):
                    raise ValueError(f"unknown mix_init {v!r}")
                continue
            if f.name in ("lambda2",):
                continue
            if f.name == "lambda1_0":
                if v < 0:
                    raise ValueError("lambda1_0 must be >= 0")
                continue
            if f.name.startswith("lr_"):
                if v < 0:
                    raise ValueError(f"{f.name} must be >= 0")
                continue
            if f.name == "grad_clip":
                if v < 0:
                    raise ValueError("grad_clip must be >= 0 (0 disables)")
                continue
            if f.name == "seed":
                if v < 0:
                    raise ValueError("seed must be >= 0")
                continue
            if v <= 0:
                raise ValueError(f"{f.name} must be positive, got {v}")
        if self.lambda2 != 0:
            raise ValueError("lambda2 has no runtime role and must stay 0")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


class Networks:
    def __init__(self, cfg: TrainConfig):
        self.stack = FlowStack(cfg.flow_depth, 3, cfg.flow_hidden, cfg.scale_clamp, seed=cfg.seed, mix_init=cfg.mix_init)
        self.F = SegOperatorF(self.stack)
        self.E = EmbedOperatorE(cfg.enc_hidden, seed=cfg.seed + 1)
        self.D = PairDiscriminator(cfg.disc_depth, cfg.disc_width, clip=cfg.clip, seed=cfg.seed + 2)

    def groups(self) -> dict[str, dict[str, Tensor]]:
        return {"F": self.F.parameters(), "E": self.E.parameters(), "D": self.D.parameters()}

    def named(self) -> dict[str, Tensor]:
        return {f"{g}/{k}": v for g, ps in self.groups().items() for k, v in ps.items()}


@dataclass
class TrainState:
    cfg: TrainConfig
    nets: Networks
    rng: RngState
    epoch: int = 0
    best_val: float = float("inf")
    best_epoch: int = -1
    epochs_since_best: int = 0
    best_params: dict | None = None

    @classmethod
    def fresh(cls, cfg: TrainConfig) -> "TrainState":
        return cls(cfg, Networks(cfg), RngState(cfg.seed))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.nets.named().items()}

    def restore(self, params: dict[str, np.ndarray]) -> None:
        for k, v in self.nets.named().items():
            v.data[...] = params[k]


# ------------------------------------------------------------ one step


def train_step(state: TrainState, batch_x, batch_real_y, targets=None, diagnostics: bool = False) -> LossReport:
    """One iteration: critic ascent (``critic_steps`` times, clipped), then F and E descent."""
    cfg, nets = state.cfg, state.nets
    x = np.asarray(batch_x, dtype=np.float64)
    real_y = np.asarray(batch_real_y, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != 3:
        raise DataError(f"batch_x must be [M,3,H,W], got {x.shape}")
    if real_y.shape != (x.shape[0], 1) + x.shape[2:]:
        raise DataError(f"batch_real_y must be [M,1,H,W] matching batch_x, got {real_y.shape}")
    if targets is None:
        targets = vo_targets(x)
    lam1 = lambda1_schedule(state.epoch, cfg.lambda1_0, cfg.gamma)
    t0 = time.perf_counter()

    # generate y_m = F(x_m), z_m = E(x_m) once; the tape is reused for the generator update
    y, _ = nets.stack.forward(x)
    z = nets.E(x)
    fake_y, fake_z = y.detach(), z.detach()

    d_params = list(nets.D.parameters().values())
    gan_val = 0.0
    for _ in range(cfg.critic_steps):
        prior_z = state.rng.normal(fake_z.shape)
        obj = gan_pair_loss(nets.D, real_y, prior_z, fake_y, fake_z)
        ad.backward(obj)
        ad.step(d_params, cfg.lr_disc, "ascend")
        nets.D.enforce(cfg.clip)
        gan_val = float(obj.data)

    adv = generator_adv_loss(nets.D, y, z)
    if cfg.lambda1_0 > 0:
        reg = ssim_reg_loss(y, targets=targets)
        total = adv + reg * lam1
    else:
        with ad.no_grad():
            reg = ssim_reg_loss(y.detach(), targets=targets)
        total = adv
    ad.backward(total)
    ad.zero_grad(d_params)
    if cfg.grad_clip > 0:
        ad.clip_grad_norm(nets.F.parameters().values(), cfg.grad_clip)
        ad.clip_grad_norm(nets.E.parameters().values(), cfg.grad_clip)
    ad.step(nets.F.parameters().values(), cfg.lr_F, "descend")
    ad.step(nets.E.parameters().values(), cfg.lr_E, "descend")
    nets.stack.reproject()

    report = LossReport(
        epoch=state.epoch,
        gan_pair=gan_val,
        ssim_reg=float(reg.data),
        cycle_diag=0.0,
        transport_diag=0.0,
        lambda1=lam1,
    )
    if diagnostics:
        with ad.no_grad():
            prior_z = state.rng.normal(fake_z.shape)
            report.cycle_diag = cycle_diagnostic(nets.stack, nets.E, x, real_y, prior_z)
            fy, fres = nets.stack.forward(x)
            report.transport_diag = transport_cost_diag(x, fy, nets.E(x), nets.stack, nets.F, nets.E, lam1, targets)
    report.wall_ms = (time.perf_counter() - t0) * 1e3
    if not (np.isfinite(float(total.data)) and report.is_finite()):
        raise NumericError(f"non-finite loss at epoch {state.epoch}: {report}")
    return report


# ----------------------------------------------------------- validation


def validation_loss(state: TrainState, val_x: np.ndarray, val_targets: np.ndarray, batch: int = 16) -> float:
    """Generator objective on the validation split: -mean psi(F(x), E(x)) + lambda1(0) * SSIM term.

    The SSIM weight is held at its initial value so that epochs are compared
    on one scale; with the decaying weight the score would fall every epoch
    even for frozen parameters.
    """
    nets, cfg = state.nets, state.cfg
    total, n = 0.0, 0
    with ad.no_grad():
        for s in range(0, len(val_x), batch):
            xb = val_x[s:s + batch]
            yb, _ = nets.stack.forward(xb)
            adv = float(generator_adv_loss(nets.D, yb, nets.E(xb)).data)
            reg = float(ssim_reg_loss(yb, targets=val_targets[s:s + batch]).data)
            total += (adv + cfg.lambda1_0 * reg) * len(xb)
            n += len(xb)
    return total / n


def predict(nets_or_state, x: np.ndarray, batch: int = 16) -> np.ndarray:
    nets = nets_or_state.nets if isinstance(nets_or_state, TrainState) else nets_or_state
    out = []
    with ad.no_grad():
        for s in range(0, len(x), batch):
            out.append(nets.stack.forward(x[s:s + batch])[0].data)
    return np.concatenate(out)


# ----------------------------------------------------------- full loop


def train(
    cfg: TrainConfig,
    datasets: dict[str, Dataset],
    out_dir=None,
    state: TrainState | None = None,
    stop_after: int | None = None,
    epoch_callback=None,
) -> TrainState:
    """Epoch loop with best-checkpoint tracking and patience-based early stopping.

    ``state`` resumes a previous run; ``stop_after`` ends the call after that
    many epochs (used for interruption tests) without touching the schedule.
    """
    train_ds, val_ds = datasets.get("train"), datasets.get("val")
    if train_ds is None or len(train_ds) == 0 or val_ds is None or len(val_ds) == 0:
        raise DataError("train and val splits must be non-empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    state = state or TrainState.fresh(cfg)

    tx = train_ds.images()
    pool = train_ds.masks()[:, None].astype(np.float64)
    t_targets = vo_targets(tx)
    vx = val_ds.images()
    v_targets = vo_targets(vx)

    ran = 0
    while state.epoch < cfg.epochs:
        if stop_after is not None and ran >= stop_after:
            break
        t0 = time.perf_counter()
        order = state.rng.generator.permutation(len(tx))
        reports = []
        nb = (len(tx) + cfg.batch - 1) // cfg.batch
        for b in range(nb):
            idx = order[b * cfg.batch:(b + 1) * cfg.batch]
            real_idx = state.rng.generator.integers(0, len(pool), len(idx))
            try:
                rep = train_step(state, tx[idx], pool[real_idx], t_targets[idx], diagnostics=(b == nb - 1))
            except NumericError:
                if out is not None:
                    checkpoint_save(state, out / "crash_dump.ostr")
                raise
            reports.append(rep)
        last = reports[-1]
        summary = LossReport(
            epoch=state.epoch,
            gan_pair=float(np.mean([r.gan_pair for r in reports])),
            ssim_reg=float(np.mean([r.ssim_reg for r in reports])),
            cycle_diag=last.cycle_diag,
            transport_diag=last.transport_diag,
            lambda1=last.lambda1,
            wall_ms=(time.perf_counter() - t0) * 1e3,
        )
        val = validation_loss(state, vx, v_targets)
        if val < state.best_val:
            state.best_val = val
            state.best_epoch = state.epoch
            state.epochs_since_best = 0
            state.best_params = state.snapshot()
        else:
            state.epochs_since_best += 1
        log.info(
            "epoch %d gan=%.5f ssim=%.5f val=%.5f cycle=%.2e (%.1fs)",
            state.epoch, summary.gan_pair, summary.ssim_reg, val, summary.cycle_diag, summary.wall_ms / 1e3,
        )
        state.epoch += 1
        ran += 1
        if out is not None:
            append_log(out / "train_log.csv", summary)
            checkpoint_save(state, out / "last.ostr")
        if epoch_callback is not None:
            epoch_callback(state, summary, val)
        if state.epochs_since_best >= cfg.patience:
            log.info("early stop at epoch %d (best %d)", state.epoch, state.best_epoch)
            break
    if out is not None and state.best_params is not None:
        best = best_state(state)
        checkpoint_save(best, out / "best.ostr")
    return state


def best_state(state: TrainState) -> TrainState:
    """A copy of ``state`` whose live parameters are the best validation snapshot."""
    cfg = state.cfg
    clone = TrainState(cfg, Networks(cfg), RngState(cfg.seed), state.epoch, state.best_val, state.best_epoch, state.epochs_since_best, state.best_params)
    clone.rng.set_state(state.rng.get_state())
    clone.restore(state.best_params if state.best_params is not None else state.snapshot())
    return clone


# ---------------------------------------------------------- checkpoints


def _rng_words(st: dict) -> np.ndarray:
    s, inc = st["state"]["state"], st["state"]["inc"]
    words = [(s >> (32 * k)) & 0xFFFFFFFF for k in range(4)] + [(inc >> (32 * k)) & 0xFFFFFFFF for k in range(4)]
    words += [float(st["has_uint32"]), float(st["uinteger"])]
    return np.array(words, dtype=np.float64)


def _rng_from_words(w: np.ndarray) -> dict:
    w = [int(v) for v in w]
    s = sum(w[k] << (32 * k) for k in range(4))
    inc = sum(w[4 + k] << (32 * k) for k in range(4))
    return {"bit_generator": "PCG64", "state": {"state": s, "inc": inc}, "has_uint32": w[8], "uinteger": w[9]}


def _encode_text(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _decode_text(a: np.ndarray) -> str:
    return bytes(a.astype(np.uint8).tolist()).decode("utf-8")


def state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    t: dict[str, np.ndarray] = {
        "meta/config": _encode_text(json.dumps(asdict(state.cfg), sort_keys=True)),
        "meta/counters": np.array([state.epoch, state.best_val, state.best_epoch, state.epochs_since_best], dtype=np.float64),
        "meta/rng": _rng_words(state.rng.get_state()),
    }
    for k, v in state.nets.named().items():
        t[f"param/{k}"] = v.data
    if state.best_params is not None:
        for k, v in state.best_params.items():
            t[f"best/{k}"] = v
    return t


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def read_tensors(path) -> dict[str, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(ln)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: corrupt tensor name") from exc
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(raw):
        raise FormatError(f"{path}: trailing bytes after {count} tensors")
    return out


def checkpoint_save(state: TrainState, path) -> None:
    write_tensors(path, state_tensors(state))


def checkpoint_load(path) -> TrainState:
    t = read_tensors(path)
    try:
        cfg = TrainConfig.from_dict(json.loads(_decode_text(t["meta/config"])))
        epoch, best_val, best_epoch, since = t["meta/counters"].tolist()
        state = TrainState(cfg, Networks(cfg), RngState(cfg.seed), int(epoch), float(best_val), int(best_epoch), int(since))
        state.rng.set_state(_rng_from_words(t["meta/rng"]))
        for k, v in state.nets.named().items():
            src = t[f"param/{k}"]
            if src.shape != v.shape:
                raise FormatError(f"{path}: {k} has shape {src.shape}, expected {v.shape}")
            v.data[...] = src
        best = {k[len("best/"):]: v for k, v in t.items() if k.startswith("best/")}
        state.best_params = best or None
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: incomplete or inconsistent checkpoint ({exc})") from exc
    return state
