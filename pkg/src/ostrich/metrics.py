"""Binary segmentation metrics and one-tailed paired significance tests."""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from .errors import DegenerateSampleError, SizeError
from .stain import connected_components, distance_maxima_seeds, voronoi_labeling


def binarize(y, t: float = 0.5) -> np.ndarray:
    """Pixels strictly above ``t`` become foreground."""
    if not 0.0 < t < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    arr = np.asarray(getattr(y, "data", y), dtype=np.float64)
    return arr > t


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @classmethod
    def of(cls, pred, gt) -> "ConfusionCounts":
        p = np.asarray(pred, dtype=bool)
        g = np.asarray(gt, dtype=bool)
        if p.shape != g.shape:
            raise SizeError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
        tp = int(np.count_nonzero(p & g))
        fp = int(np.count_nonzero(p & ~g))
        fn = int(np.count_nonzero(~p & g))
        return cls(tp, fp, fn, p.size - tp - fp - fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def dice(pred, gt) -> float:
    c = ConfusionCounts.of(pred, gt)
    den = 2 * c.tp + c.fp + c.fn
    return 1.0 if den == 0 else 2 * c.tp / den


def jaccard(pred, gt) -> float:
    c = ConfusionCounts.of(pred, gt)
    den = c.tp + c.fp + c.fn
    return 1.0 if den == 0 else c.tp / den


def precision(pred, gt) -> float:
    c = ConfusionCounts.of(pred, gt)
    if c.tp + c.fp == 0:
        return 1.0 if c.tp + c.fn == 0 else 0.0
    return c.tp / (c.tp + c.fp)


def recall(pred, gt) -> float:
    c = ConfusionCounts.of(pred, gt)
    if c.tp + c.fn == 0:
        return 1.0 if c.tp + c.fp == 0 else 0.0
    return c.tp / (c.tp + c.fn)


def score_all(pred, gt) -> dict[str, float]:
    return {"dice": dice(pred, gt), "jaccard": jaccard(pred, gt), "precision": precision(pred, gt), "recall": recall(pred, gt)}


# --------------------------------------------------------------- tests


def t_sf(t: float, df: float) -> float:
    """Upper tail P(T > t) of Student's t via the regularised incomplete beta function."""
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    tail = 0.5 * float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))
    return tail if t >= 0 else 1.0 - tail


def paired_t_statistic(a, b) -> tuple[float, int]:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.ndim != 1 or len(d) < 2:
        raise SizeError("paired t needs two equal-length samples with n >= 2")
    if not d.any():
        raise DegenerateSampleError("all paired differences are zero")
    n = len(d)
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        return math.copysign(math.inf, mean), n - 1
    return float(mean / (sd / math.sqrt(n))), n - 1


def paired_t_one_tailed(a, b) -> float:
    """p-value for H1: mean(a - b) > 0."""
    if len(a) != len(b):
        raise SizeError(f"samples differ in length: {len(a)} vs {len(b)}")
    t, df = paired_t_statistic(a, b)
    return t_sf(t, df)


def signed_ranks(d: np.ndarray) -> np.ndarray:
    """Average ranks of |d| (ties share the mean rank)."""
    from scipy.stats import rankdata

    return rankdata(np.abs(d), method="average")


def _exact_upper_tail(ranks: np.ndarray, w_plus: float) -> float:
    """P(W+ >= w_plus) under the sign-flip null, by enumerating all 2^n sign patterns."""
    n = len(ranks)
    # ranks are multiples of 0.5; doubling makes the comparison exact in integers
    r2 = np.rint(2 * ranks).astype(np.int64)
    target = int(round(2 * w_plus))
    signs = np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int64)
    stats = signs @ r2
    return float(np.count_nonzero(stats >= target)) / (1 << n)


def wilcoxon_null_distribution(ranks) -> dict[float, float]:
    """Exact null pmf of W+ for the given ranks."""
    ranks = np.asarray(ranks, dtype=np.float64)
    n = len(ranks)
    signs = np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.float64)
    vals, counts = np.unique(signs @ ranks, return_counts=True)
    return {float(v): c / (1 << n) for v, c in zip(vals, counts)}


EXACT_MAX_N = 12


def wilcoxon_one_tailed(a, b, exact: bool | None = None) -> float:
    """Signed-rank p-value for H1: a > b.  Zero differences are dropped first."""
    if len(a) != len(b):
        raise SizeError(f"samples differ in length: {len(a)} vs {len(b)}")
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = d[d != 0]
    n = len(d)
    if n < 5:
        raise DegenerateSampleError(f"need at least 5 non-zero differences, got {n}")
    ranks = signed_ranks(d)
    w_plus = float(ranks[d > 0].sum())
    if exact is None:
        exact = n <= EXACT_MAX_N
    if exact:
        return _exact_upper_tail(ranks, w_plus)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((tie_counts**3 - tie_counts).sum()) / 48.0
    if var <= 0:
        raise DegenerateSampleError("signed-rank variance is zero")
    z = (w_plus - mean - 0.5) / math.sqrt(var)
    return float(special.ndtr(-z))


# ----------------------------------------------------------- instances


def mask_to_instances(mask, split: bool = False, min_distance: int = 2) -> tuple[np.ndarray, int]:
    """Connected components, optionally split at distance-transform maxima via Voronoi cells."""
    mask = np.asarray(mask, dtype=bool)
    if not split:
        return connected_components(mask)
    seeds = distance_maxima_seeds(mask, min_distance)
    if len(seeds) == 0:
        return np.zeros(mask.shape, dtype=np.int64), 0
    lab = voronoi_labeling(mask, seeds)
    return lab, int(lab.max())


# ----------------------------------------------------------------- CSV

METRIC_COLUMNS = ["id", "dice", "jaccard", "precision", "recall"]


def evaluate_pairs(preds: dict[str, np.ndarray], gts: dict[str, np.ndarray]) -> list[dict]:
    rows = []
    for stem in sorted(gts):
        rows.append({"id": stem, **score_all(preds[stem], gts[stem])})
    return rows


def summary_row(rows: list[dict]) -> dict:
    out = {"id": "mean"}
    for k in METRIC_COLUMNS[1:]:
        out[k] = float(np.mean([r[k] for r in rows])) if rows else float("nan")
    return out


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        wr.writeheader()
        for r in rows + [summary_row(rows)]:
            wr.writerow({k: (f"{r[k]:.6f}" if k != "id" else r[k]) for k in METRIC_COLUMNS})


def significance_table(a_rows: list[dict], b_rows: list[dict], a_name: str = "A", b_name: str = "B") -> list[dict]:
    """One row per metric with one-tailed paired-t and Wilcoxon p-values for 'A better than B'."""
    a_by = {r["id"]: r for r in a_rows}
    b_by = {r["id"]: r for r in b_rows}
    if set(a_by) != set(b_by):
        raise SizeError("the two result sets cover different images")
    ids = sorted(a_by)
    table = []
    for k in METRIC_COLUMNS[1:]:
        a = [a_by[i][k] for i in ids]
        b = [b_by[i][k] for i in ids]
        row = {"comparison": f"{a_name} vs {b_name}", "metric": k}
        for name, fn in (("paired_t_p", paired_t_one_tailed), ("wilcoxon_p", wilcoxon_one_tailed)):
            try:
                row[name] = fn(a, b)
            except DegenerateSampleError:
                row[name] = float("nan")
        table.append(row)
    return table


def write_significance_csv(path, table: list[dict]) -> None:
    cols = ["comparison", "metric", "paired_t_p", "wilcoxon_p"]
    with open(Path(path), "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        wr.writeheader()
        for r in table:
            wr.writerow({k: (f"{r[k]:.6g}" if isinstance(r[k], float) else r[k]) for k in cols})
