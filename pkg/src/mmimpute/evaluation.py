"""Masked-classification accuracy, voxel precision/recall and IoU, CSV reports."""
import csv
import io
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .channel import bernoulli_masks
from .errors import ConfigurationError, DomainError, ShapeError, StateError
from .imputation import STRATEGIES, STRATEGY_MODEL, impute_batch
from .kernels import masked_sq_dist, threshold_counts
from .model import encode_means

log = logging.getLogger(__name__)

DEFAULT_RATES = (0.3, 0.5, 0.7, 0.9)
SPLITS = ("train->test", "test->train")
IOU_THRESHOLD = 0.5


def default_thresholds(n: int = 99) -> np.ndarray:
    return np.arange(1, n + 1) / (n + 1.0)


def split_slug(direction: str) -> str:
    return direction.replace("->", "-")


@dataclass
class ExperimentGrid:
    missing_rates: tuple = DEFAULT_RATES
    strategies: tuple = STRATEGIES
    split_direction: str = "train->test"
    trials_per_item: int = 8
    seed: int = 0
    thresholds: np.ndarray = field(default_factory=default_thresholds)

    def __post_init__(self):
        self.missing_rates = tuple(float(r) for r in self.missing_rates)
        self.strategies = tuple(self.strategies)
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        if not self.strategies:
            raise ConfigurationError("at least one strategy is required")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ConfigurationError(f"unknown strategy {s!r}")
        for r in self.missing_rates:
            if not 0.0 < r < 1.0:
                raise ConfigurationError(f"missing rate {r} outside (0, 1)")
        if self.split_direction not in SPLITS:
            raise ConfigurationError(f"split direction must be one of {SPLITS}")
        if self.trials_per_item < 1:
            raise ConfigurationError("trials_per_item must be >= 1")
        check_thresholds(self.thresholds)


def check_thresholds(thresholds):
    t = np.asarray(thresholds)
    if t.ndim != 1 or t.size == 0 or np.any(t <= 0) or np.any(t >= 1) or np.any(np.diff(t) <= 0):
        raise DomainError("thresholds must be strictly increasing inside (0, 1)")


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float


def pr_from_counts(thresholds, tp, fp, fn) -> list:
    """Precision is 1 where nothing is predicted positive; recall is 1 where nothing is positive."""
    points = []
    for t, a, b, c in zip(thresholds, tp, fp, fn):
        precision = a / (a + b) if a + b > 0 else 1.0
        recall = a / (a + c) if a + c > 0 else 1.0
        points.append(PRPoint(float(t), float(precision), float(recall)))
    return points


def pr_points(pred, target, thresholds) -> list:
    check_thresholds(thresholds)
    tp, fp, fn = threshold_counts(np.asarray(pred, dtype=np.float64), np.asarray(target).astype(bool),
                                  np.asarray(thresholds, dtype=np.float64))
    return pr_from_counts(thresholds, tp, fp, fn)


def pr_auc(points) -> float:
    """Trapezoidal area under precision as a function of recall, over [0, max recall].

    The sampled thresholds rarely reach recall 0, so the curve is extended
    flat from its highest-threshold point down to recall 0.
    """
    r = np.array([p.recall for p in points])
    p = np.array([p.precision for p in points])
    order = np.argsort(r, kind="stable")
    r, p = r[order], p[order]
    r = np.concatenate([[0.0], r])
    p = np.concatenate([[p[0]], p])
    return float(np.trapezoid(p, r))


def voxel_iou(predicted, target, threshold: float = IOU_THRESHOLD) -> float:
    pred = np.asarray(predicted) >= threshold
    tgt = np.asarray(target).astype(bool)
    if pred.shape != tgt.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {tgt.shape}")
    union = np.logical_or(pred, tgt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, tgt).sum() / union)


# --- erasure draws shared by every strategy --------------------------------------

def erasure_masks(n_items: int, trials: int, latent_dim: int, rate: float, seed: int) -> np.ndarray:
    """``(n_items, trials, N)`` presence masks drawn from a stream that depends on the seed only.

    Every rate thresholds the same uniforms, so the survivors at a higher rate are a subset of
    those at a lower rate. Each element is still erased independently with probability ``rate``,
    and rates are compared on common draws rather than on independent noise.
    """
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    return bernoulli_masks(gen, (n_items, trials, latent_dim), rate)


def to_wire_precision(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64).astype(np.float32).astype(np.float64)


# --- classification ------------------------------------------------------------------

def correct_counts(mu, labels, means, masks) -> np.ndarray:
    """Per item, how many of its erasure trials select the true modal."""
    n, T, N = masks.shape
    vals = np.where(masks, np.repeat(mu[:, None, :], T, axis=1), 0.0).reshape(n * T, N)
    return correct_counts_from_frames(vals, masks.reshape(n * T, N), labels, means, T)


def correct_counts_from_frames(values, mask, labels, means, trials: int) -> np.ndarray:
    """Same as :func:`correct_counts` for received ``(n * trials, N)`` frames, item-major."""
    d = masked_sq_dist(np.asarray(values, dtype=np.float64), np.asarray(mask, dtype=bool), means)
    pick = np.argmin(d, axis=1)
    # a trial with nothing surviving cannot select anything
    pick[~np.asarray(mask).any(axis=1)] = -1
    return (pick.reshape(-1, trials) == np.asarray(labels)[:, None]).sum(axis=1)


def accuracy_two_ways(correct, trials: int):
    """(per-item averaged, pooled) accuracy as exact fractions."""
    per_item = sum((Fraction(int(c), trials) for c in correct), Fraction(0)) / len(correct)
    pooled = Fraction(int(np.sum(correct)), len(correct) * trials)
    return per_item, pooled


def masked_classification_accuracy(model, images, labels, rate: float, trials: int = 8, seed: int = 0) -> float:
    """Percentage of erased encodings whose nearest modal is the true label."""
    if model.trained_steps == 0:
        raise StateError("checkpoint is untrained; refusing to report accuracy")
    if not model.has_prior_bank:
        raise ConfigurationError(f"a {model.kind} checkpoint has no modals to classify with")
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"rate {rate} outside [0, 1)")
    mu = to_wire_precision(encode_means(model, images))
    masks = erasure_masks(len(labels), trials, mu.shape[1], rate, seed)
    correct = correct_counts(mu, labels, model.prior_bank().means, masks)
    per_item, pooled = accuracy_two_ways(correct, trials)
    assert per_item == pooled
    return 100.0 * float(pooled)


# --- reconstruction --------------------------------------------------------------------

@dataclass
class CellResult:
    strategy: str
    rate: float
    points: list
    auc: float
    mean_iou: float
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray


def side_information(model, strategy: str) -> dict:
    need = STRATEGY_MODEL[strategy]
    if model.kind != need:
        raise ConfigurationError(f"strategy {strategy} needs a {need} checkpoint, got {model.kind}")
    if strategy == "ae-mean":
        if model.latent_stats is None:
            raise ConfigurationError("ae checkpoint lacks training latent statistics")
        return {"stats": model.latent_stats}
    if strategy in ("mvae-a", "mvae-s"):
        return {"bank": model.prior_bank()}
    return {}


def evaluate_cell(model, strategy: str, values, mask, targets, thresholds, rate=float("nan"),
                  chunk: int = 256) -> CellResult:
    """Impute ``(M, N)`` transmissions, decode, and score against ``(M, D, D, D)`` targets."""
    if model.trained_steps == 0:
        raise StateError("checkpoint is untrained; refusing to evaluate")
    thresholds = np.asarray(thresholds, dtype=np.float64)
    check_thresholds(thresholds)
    side = side_information(model, strategy)
    imputed, _ = impute_batch(strategy, values, mask, **side)
    targets = np.asarray(targets).reshape(len(imputed), -1).astype(bool)
    tp = np.zeros(len(thresholds), dtype=np.int64)
    fp = np.zeros_like(tp)
    fn = np.zeros_like(tp)
    ious = np.zeros(len(imputed))
    for lo in range(0, len(imputed), chunk):
        probs = model.decode(imputed[lo:lo + chunk]).reshape(-1, targets.shape[1])
        tgt = targets[lo:lo + chunk]
        a, b, c = threshold_counts(probs, tgt, thresholds)
        tp += a
        fp += b
        fn += c
        pred = probs >= IOU_THRESHOLD
        inter = np.logical_and(pred, tgt).sum(axis=1)
        union = np.logical_or(pred, tgt).sum(axis=1)
        ious[lo:lo + chunk] = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    points = pr_from_counts(thresholds, tp, fp, fn)
    return CellResult(strategy, float(rate), points, pr_auc(points), float(ious.mean()), tp, fp, fn)


def voxel_pr_curve(model, strategy: str, images, voxels, rate: float, thresholds=None, seed: int = 0,
                   trials: int = 1) -> list:
    thresholds = default_thresholds() if thresholds is None else thresholds
    check_thresholds(thresholds)
    return transmit_and_score(model, strategy, images, voxels, rate, thresholds, seed, trials).points


def transmit_and_score(model, strategy, images, voxels, rate, thresholds, seed, trials) -> CellResult:
    mu = to_wire_precision(encode_means(model, images))
    n, N = mu.shape
    masks = erasure_masks(n, trials, N, rate, seed).reshape(n * trials, N)
    values = np.where(masks, np.repeat(mu, trials, axis=0), 0.0)
    targets = np.repeat(np.asarray(voxels).reshape(n, -1), trials, axis=0)
    return evaluate_cell(model, strategy, values, masks, targets, thresholds, rate)


# --- grid runner ---------------------------------------------------------------------------

@dataclass
class GridResults:
    grid: ExperimentGrid
    accuracy: dict = field(default_factory=dict)   # rate -> percent
    cells: dict = field(default_factory=dict)      # (strategy, rate) -> CellResult


def run_grid(grid: ExperimentGrid, models: dict, images, labels, voxels, workers: int = 1) -> GridResults:
    """Evaluate every (strategy, rate) cell; ``models`` maps model kind to a trained model.

    Cells are independent and run on a thread pool; results are keyed by cell
    so the worker count never changes the output.
    """
    res = GridResults(grid)
    if "mmvae" in models:
        for rate in grid.missing_rates:
            res.accuracy[rate] = masked_classification_accuracy(models["mmvae"], images, labels, rate,
                                                                grid.trials_per_item, grid.seed)
    cells = [(s, r) for s in grid.strategies for r in grid.missing_rates]
    for s, _ in cells:
        if STRATEGY_MODEL[s] not in models:
            raise ConfigurationError(f"strategy {s} needs a {STRATEGY_MODEL[s]} checkpoint")

    def run(cell):
        s, r = cell
        return transmit_and_score(models[STRATEGY_MODEL[s]], s, images, voxels, r, grid.thresholds,
                                  grid.seed, grid.trials_per_item)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for cell, out in zip(cells, pool.map(run, cells)):
            res.cells[cell] = out
    return res


# --- CSV reports -----------------------------------------------------------------------------

def _fmt(x) -> str:
    return "" if x is None else f"{x:.6f}"


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


REPORT_NOTES = """\
Report definitions
- acc_<split>.csv: percentage of erased encoder means whose nearest modal (squared
  distance over surviving elements) is the true label, pooled over items x trials.
- pr_<strategy>_<rate>.csv: per threshold t, a voxel is predicted occupied when its
  decoded probability is >= t. Counts are pooled over all test items and trials.
  precision = TP/(TP+FP), defined as 1 when nothing is predicted occupied;
  recall = TP/(TP+FN), defined as 1 when no voxel is occupied.
- iou_summary.csv: mean IoU at threshold 0.5 and trapezoidal area under the PR curve.
"""


def emit_report(grid: ExperimentGrid, results: GridResults, out_dir) -> tuple:
    """Write the CSVs; returns (paths, complete). Missing cells become empty fields."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    complete = True
    rates = grid.missing_rates

    acc_row = [grid.split_direction]
    for r in rates:
        v = results.accuracy.get(r)
        complete &= v is not None
        acc_row.append(_fmt(v))
    p = os.path.join(out_dir, f"acc_{split_slug(grid.split_direction)}.csv")
    _write_csv(p, ["split"] + [f"{r:.6f}" for r in rates], [acc_row])
    paths.append(p)

    iou_rows = []
    for s in grid.strategies:
        for r in rates:
            cell = results.cells.get((s, r))
            p = os.path.join(out_dir, f"pr_{s}_{r:.2f}.csv")
            if cell is None:
                complete = False
                rows = [[f"{t:.6f}", "", ""] for t in grid.thresholds]
                iou_rows.append([s, f"{r:.6f}", "", ""])
            else:
                rows = [[f"{pt.threshold:.6f}", _fmt(pt.precision), _fmt(pt.recall)] for pt in cell.points]
                iou_rows.append([s, f"{r:.6f}", _fmt(cell.mean_iou), _fmt(cell.auc)])
            _write_csv(p, ["threshold", "precision", "recall"], rows)
            paths.append(p)
    p = os.path.join(out_dir, "iou_summary.csv")
    _write_csv(p, ["strategy", "rate", "mean_iou", "pr_auc"], iou_rows)
    paths.append(p)
    p = os.path.join(out_dir, "report_notes.txt")
    with open(p, "w") as fh:
        fh.write(REPORT_NOTES)
    paths.append(p)
    if not complete:
        log.warning("report for %s is incomplete; empty cells written", grid.split_direction)
    return paths, complete
