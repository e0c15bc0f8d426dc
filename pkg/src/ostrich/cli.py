"""Command line: synth-data, train, infer, eval, verify.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as dio
from . import metrics
from .errors import DataError, FormatError, IoError, NumericError, OstrichError, SizeError
from .losses import vo_targets
from .trainer import TrainConfig, checkpoint_load, predict, train

log = logging.getLogger("ostrich")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# keys accepted on top of the TrainConfig fields
EXTRA_DEFAULTS = {
    "data_dir": None,
    "n_train": 200,
    "n_val": 40,
    "n_test": 80,
    "patch": 64,
    "threshold": 0.5,
    "overlays": True,
}


class UsageError(OstrichError):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(config_path=None, overrides=(), seed=None) -> dict:
    """Defaults, then the JSON config file, then --set overrides, then --seed."""
    cfg = {f.name: getattr(TrainConfig(), f.name) for f in fields(TrainConfig)}
    cfg.update(EXTRA_DEFAULTS)
    layers = []
    if config_path:
        try:
            layers.append(json.loads(Path(config_path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from exc
    pairs = {}
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = _parse_value(v)
    layers.append(pairs)
    for layer in layers:
        unknown = sorted(set(layer) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config keys: {unknown}")
        cfg.update(layer)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict({f.name: cfg[f.name] for f in fields(TrainConfig)})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def write_snapshot(out: Path, command: str, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps({"command": command, **cfg}, indent=1, sort_keys=True))


def overlay(image: np.ndarray, target: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """input | VO target | prediction, side by side, as an 8-bit RGB buffer."""
    h, w = image.shape[1:]
    gap = np.full((h, 2, 3), 255, dtype=np.uint8)
    rgb = dio.to_uint8(image.transpose(1, 2, 0))
    tgt = np.repeat(dio.to_uint8(target)[..., None], 3, axis=2)
    prd = np.repeat(dio.to_uint8(pred)[..., None], 3, axis=2)
    return np.concatenate([rgb, gap, tgt, gap, prd], axis=1)


# --------------------------------------------------------------- commands


def cmd_synth_data(cfg: dict, out: Path) -> int:
    sets = dio.synth_splits(cfg["n_train"], cfg["n_val"], cfg["n_test"], cfg["patch"], cfg["patch"], seed=cfg["seed"])
    dio.save_dataset(out, sets)
    log.info("wrote %d patches to %s", sum(len(s) for s in sets.values()), out)
    return EXIT_OK


def _datasets(cfg: dict) -> dict:
    if not cfg["data_dir"]:
        raise DataError("train needs data_dir (use --set data_dir=PATH)")
    root = Path(cfg["data_dir"])
    if not (root / "manifest.tsv").exists():
        raise DataError(f"{root} has no manifest.tsv")
    return {split: dio.load_split(root, split) for split in ("train", "val")}


def cmd_train(cfg: dict, out: Path, checkpoint=None) -> int:
    tcfg = train_config(cfg)
    sets = _datasets(cfg)
    state = checkpoint_load(checkpoint) if checkpoint else None
    if state is not None:
        # only the epoch budget may change on resume
        if {**asdict(state.cfg), "epochs": 0} != {**asdict(tcfg), "epochs": 0}:
            raise UsageError("checkpoint was trained with a different configuration")
        state.cfg = tcfg
    sample = sets["val"].images()[:1]
    sample_target = vo_targets(sample)[0, 0]
    ov_dir = out / "overlays"
    if cfg["overlays"]:
        ov_dir.mkdir(parents=True, exist_ok=True)

    def on_epoch(st, summary, val):
        if cfg["overlays"]:
            pred = predict(st, sample)[0, 0]
            Image.fromarray(overlay(sample[0], sample_target, pred), mode="RGB").save(ov_dir / f"epoch_{st.epoch:04d}.png")

    state = train(tcfg, sets, out, state=state, epoch_callback=on_epoch)
    log.info("trained %d epochs, best epoch %d", state.epoch, state.best_epoch)
    return EXIT_OK


def _image_paths(inputs) -> list[Path]:
    paths = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.png")))
        elif p.exists():
            paths.append(p)
        else:
            raise IoError(f"no such image or directory: {p}")
    if not paths:
        raise DataError("no input images")
    return paths


def cmd_infer(cfg: dict, out: Path, checkpoint, inputs, synthesize: bool) -> int:
    if not checkpoint:
        raise UsageError("infer needs --checkpoint")
    state = checkpoint_load(checkpoint)
    t = cfg["threshold"]
    (out / "masks").mkdir(parents=True, exist_ok=True)
    if synthesize:
        (out / "synth").mkdir(parents=True, exist_ok=True)
    prior = np.random.default_rng(cfg["seed"])
    for path in _image_paths(inputs):
        x = dio.load_image(path)[None]
        y = predict(state, x)
        mask = metrics.binarize(y[0, 0], t)
        dio.save_mask(out / "masks" / f"{path.stem}.png", mask)
        if synthesize:
            z = prior.standard_normal((1, 2) + x.shape[2:])
            img = state.nets.F.synthesize(mask[None, None].astype(np.float64), z).data[0]
            dio.save_image(out / "synth" / f"{path.stem}.png", np.clip(img, 0.0, 1.0))
    return EXIT_OK


def _mask_dir(root) -> dict[str, np.ndarray]:
    root = Path(root)
    if not root.is_dir():
        raise IoError(f"not a directory: {root}")
    return {p.stem: dio.load_mask(p) for p in sorted(root.glob("*.png"))}


def cmd_eval(out: Path, pred_dir, gt_dir, pred_dir_b=None) -> int:
    gts = _mask_dir(gt_dir)
    preds = _mask_dir(pred_dir)
    if set(preds) != set(gts):
        raise DataError(f"unpaired stems: {sorted(set(preds) ^ set(gts))[:5]}")
    rows = metrics.evaluate_pairs(preds, gts)
    metrics.write_metrics_csv(out / "metrics.csv", rows)
    mean = metrics.summary_row(rows)
    print("mean " + " ".join(f"{k}={mean[k]:.6f}" for k in metrics.METRIC_COLUMNS[1:]))
    if pred_dir_b is not None:
        preds_b = _mask_dir(pred_dir_b)
        if set(preds_b) != set(gts):
            raise DataError("second prediction set is not paired with the ground truth")
        rows_b = metrics.evaluate_pairs(preds_b, gts)
        metrics.write_metrics_csv(out / "metrics_b.csv", rows_b)
        table = metrics.significance_table(rows, rows_b, Path(pred_dir).name, Path(pred_dir_b).name)
        metrics.write_significance_csv(out / "significance.csv", table)
    return EXIT_OK


def cmd_verify(cfg: dict) -> int:
    from .verify import run_checks

    results = run_checks(seed=cfg["seed"])
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.ok for r in results) else 1


# ------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ostrich", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of config keys")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth-data", parents=[common], help="write a synthetic H&E dataset")
    p = sub.add_parser("train", parents=[common], help="train on a dataset directory")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p = sub.add_parser("infer", parents=[common], help="predict masks for images")
    p.add_argument("--checkpoint")
    p.add_argument("--synthesize", action="store_true", help="also write G(mask, z) images")
    p.add_argument("--threshold", type=float)
    p.add_argument("images", nargs="+")
    p = sub.add_parser("eval", parents=[common], help="score predicted masks against ground truth")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("pred_dir_b", nargs="?", help="second prediction set for significance tests")
    sub.add_parser("verify", parents=[common], help="run the self-check battery")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("OSTRICH_LOG", "info").lower()
    logging.basicConfig(
        level={"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(level, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
    )


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        cfg = resolve_config(args.config, args.overrides, args.seed)
        if getattr(args, "threshold", None) is not None:
            cfg["threshold"] = args.threshold
        if not 0.0 < float(cfg["threshold"]) < 1.0:
            raise UsageError("threshold must lie in (0, 1)")
        if args.command != "verify":
            write_snapshot(out, args.command, cfg)
        if args.command == "synth-data":
            return cmd_synth_data(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out, args.checkpoint)
        if args.command == "infer":
            return cmd_infer(cfg, out, args.checkpoint, args.images, args.synthesize)
        if args.command == "eval":
            return cmd_eval(out, args.pred_dir, args.gt_dir, args.pred_dir_b)
        return cmd_verify(cfg)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, FormatError, IoError, SizeError) as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
