"""The desk-scale synthetic reproduction run and its committed summary."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .data import synth_splits
from .metrics import score_all
from .trainer import TrainConfig, TrainState, predict, train

SPLIT_SIZES = (200, 40, 80)
PATCH = 64
DATA_SEED = 42
REFERENCE_FILE = Path(__file__).with_name("reference_metrics.json")


def reference_datasets():
    return synth_splits(*SPLIT_SIZES, h=PATCH, w=PATCH, seed=DATA_SEED)


def evaluate(state: TrainState, dataset, threshold: float = 0.5) -> list[dict]:
    """Per-patch binary metrics of thresholded F(x) against the exact masks."""
    probs = predict(state, dataset.images())[:, 0]
    return [{"id": it.stem, **score_all(p > threshold, it.mask)} for it, p in zip(dataset.items, probs)]


def run_reference(cfg: TrainConfig | None = None, out_dir=None, **overrides) -> dict:
    """Train on the synthetic splits and score the final parameters on the test split."""
    cfg = replace(cfg or TrainConfig(), **overrides)
    datasets = reference_datasets()
    t0 = time.perf_counter()
    state = train(cfg, datasets, out_dir)
    wall = time.perf_counter() - t0
    rows = evaluate(state, datasets["test"])
    return {
        "config": asdict(cfg),
        "epochs_run": state.epoch,
        "best_epoch": state.best_epoch,
        "wall_seconds": wall,
        "dice": float(np.mean([r["dice"] for r in rows])),
        "jaccard": float(np.mean([r["jaccard"] for r in rows])),
        "per_patch": rows,
    }


def save_summary(summary: dict, path) -> None:
    Path(path).write_text(json.dumps(summary, indent=1))


def load_summary(path=REFERENCE_FILE) -> dict:
    return json.loads(Path(path).read_text())
