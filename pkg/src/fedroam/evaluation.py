"""Metrics and experiment grids: accuracy at the 0.5 threshold, ROC/AUC with
a mandatory trapezoid-vs-concordance cross-check, the per-regime training
grids, and the sim-to-real hold-out series.

Prediction rule everywhere: an image is called blocked iff the model's
blocked probability is >= 0.5. AUC is threshold-free and is computed twice,
by trapezoidal integration of the ROC curve and by pairwise concordance
(ties scored 1/2); the two must agree to 1e-9 or evaluation aborts.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from . import fl, nn
from .data import REAL, SIM, Dataset, Partition

AUC_CROSSCHECK_TOL = 1e-9

CENTRALIZED = "centralized"
FEDERATED = "federated"


@dataclass(frozen=True)
class RocCurve:
    """ROC points from (0,0) to (1,1), both coordinates non-decreasing."""

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple((float(f), float(t)) for f, t in self.points)
        if len(pts) < 2 or pts[0] != (0.0, 0.0) or pts[-1] != (1.0, 1.0):
            raise ValueError(f"curve must run from (0,0) to (1,1), got {pts[:1]}..{pts[-1:]}")
        for (f0, t0), (f1, t1) in zip(pts, pts[1:]):
            if f1 < f0 or t1 < t0:
                raise ValueError("ROC coordinates must be non-decreasing")
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True)
class EvalReport:
    """One model scored on one dataset."""

    dataset_name: str
    accuracy: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        total = self.tp + self.fp + self.tn + self.fn
        if total <= 0:
            raise ValueError("confusion counts are empty")
        if abs(self.accuracy - (self.tp + self.tn) / total) > 1e-9:
            raise ValueError("accuracy disagrees with confusion counts")


@dataclass(frozen=True)
class Sim2RealPoint:
    combination: str
    regime: str
    accuracy: float


@dataclass(frozen=True)
class GridReport:
    """Rows: validation sets. Columns: training-set combinations."""

    regime: str
    rows: tuple[str, ...]
    columns: tuple[str, ...]
    cells: tuple[tuple[EvalReport, ...], ...]   # cells[row][col]

    def __post_init__(self):
        expected = {CENTRALIZED: 7, FEDERATED: 4}.get(self.regime)
        if expected is None:
            raise ValueError(f"unknown regime {self.regime!r}")
        if len(self.columns) != expected:
            raise ValueError(f"{self.regime} grid needs {expected} columns, got {len(self.columns)}")
        if len(self.cells) != len(self.rows):
            raise ValueError("one cell row per validation set required")
        if any(len(r) != len(self.columns) for r in self.cells):
            raise ValueError("ragged grid")

    def cell(self, row: str, column: str) -> EvalReport:
        return self.cells[self.rows.index(row)][self.columns.index(column)]

    def to_csv(self, metric: str) -> str:
        if metric not in ("accuracy", "auc"):
            raise ValueError(f"unknown metric {metric!r}")
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["validation"] + list(self.columns))
        for name, row in zip(self.rows, self.cells):
            writer.writerow([name] + [f"{getattr(c, metric):.6f}" for c in row])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# ROC / AUC


def _check_scores_labels(scores: Sequence[float], labels: Sequence[int]):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or y.shape != s.shape:
        raise ValueError(f"scores and labels must be 1-d and aligned: {s.shape} vs {y.shape}")
    if s.size and not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    y = y.astype(np.int64)
    if y.sum() == 0 or y.sum() == y.size:
        raise ValueError("AUC needs at least one positive and one negative label")
    return s, y


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """Threshold sweep over distinct scores, descending; ties collapse into
    single steps; endpoints pinned at (0,0) and (1,1)."""
    s, y = _check_scores_labels(scores, labels)
    order = np.argsort(-s, kind="stable")
    s = s[order]
    y = y[order]
    distinct = np.nonzero(np.diff(s))[0]
    cut = np.concatenate([distinct, [s.size - 1]])
    tps = np.cumsum(y)[cut].astype(np.float64)
    fps = (cut + 1 - np.cumsum(y)[cut]).astype(np.float64)
    p = tps[-1]
    n = fps[-1]
    pts = [(0.0, 0.0)] + [(f / n, t / p) for f, t in zip(fps, tps)]
    return RocCurve(tuple(pts))


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the ROC curve."""
    pts = curve.points
    area = 0.0
    for (f0, t0), (f1, t1) in zip(pts, pts[1:]):
        area += (f1 - f0) * (t0 + t1) / 2.0
    return area


def auc_concordance(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Independent AUC route: fraction of (positive, negative) pairs ranked
    concordantly, ties counting one half."""
    s, y = _check_scores_labels(scores, labels)
    pos = s[y == 1]
    neg = s[y == 0]
    diff = pos[:, None] - neg[None, :]
    wins = (diff > 0).sum() + 0.5 * (diff == 0).sum()
    return float(wins / (pos.size * neg.size))


def scores_for(params: nn.ModelParams, dataset: Dataset,
               batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Blocked-class probabilities and integer labels for a whole dataset."""
    x, y = dataset.arrays()
    outs = [nn.forward(params, x[i:i + batch])[:, nn.BLOCKED_INDEX]
            for i in range(0, x.shape[0], batch)]
    return np.concatenate(outs), y


def evaluate(params: nn.ModelParams, dataset: Dataset) -> EvalReport:
    """Accuracy, AUC and confusion counts of one model on one dataset.

    Runs both AUC routes and refuses to report if they disagree."""
    scores, y = scores_for(params, dataset)
    pred = scores >= 0.5
    actual = y == 1
    tp = int((pred & actual).sum())
    fp = int((pred & ~actual).sum())
    tn = int((~pred & ~actual).sum())
    fn = int((~pred & actual).sum())
    trapezoid = auc(roc_curve(scores, y))
    pairwise = auc_concordance(scores, y)
    if abs(trapezoid - pairwise) > AUC_CROSSCHECK_TOL:
        raise RuntimeError(
            f"AUC routes disagree on {dataset.name!r}: trapezoid {trapezoid!r} "
            f"vs concordance {pairwise!r}")
    return EvalReport(dataset.name, (tp + tn) / len(dataset), trapezoid, tp, fp, tn, fn)


# ---------------------------------------------------------------------------
# Experiment grids


def combination_label(names: Sequence[str]) -> str:
    """S0 + S1 -> "S01"; falls back to "+"-joining for unrelated names."""
    if len(names) == 1:
        return names[0]
    prefixes = {n[:1] for n in names}
    if len(prefixes) == 1 and all(len(n) == 2 for n in names):
        return names[0] + "".join(n[1:] for n in names[1:])
    return "+".join(names)


def _combo_indices(regime: str) -> list[tuple[int, ...]]:
    sizes = (1, 2, 3) if regime == CENTRALIZED else (2, 3)
    out: list[tuple[int, ...]] = []
    for size in sizes:
        out.extend(combinations(range(3), size))
    return out


def _train_combo(partitions: list[Partition], combo: tuple[int, ...], cfg: fl.RoundConfig,
                 regime: str, arch: nn.ArchDescriptor | None) -> nn.ModelParams:
    chosen = [partitions[i] for i in combo]
    if regime == CENTRALIZED:
        return fl.run_centralized([p.train for p in chosen], cfg, arch)
    clients = [fl.ClientState(p.name, p.train) for p in chosen]
    params, _ = fl.run_federated(clients, cfg, arch)
    return params


def train_grid_models(partitions: list[Partition], cfg: fl.RoundConfig, regime: str,
                      arch: nn.ArchDescriptor | None = None,
                      jobs: int = 1) -> list[tuple[str, nn.ModelParams]]:
    """One trained model per column of the grid, in canonical column order."""
    if len(partitions) != 3:
        raise ValueError(f"grids expect exactly 3 environment partitions, got {len(partitions)}")
    if regime not in (CENTRALIZED, FEDERATED):
        raise ValueError(f"unknown regime {regime!r}")
    combos = _combo_indices(regime)
    labels = [combination_label([partitions[i].name for i in combo]) for combo in combos]

    def build(k: int) -> nn.ModelParams:
        try:
            return _train_combo(partitions, combos[k], cfg, regime, arch)
        except Exception as e:
            raise RuntimeError(f"training column {labels[k]!r} ({regime}) failed: {e}") from e

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            models = list(pool.map(build, range(len(combos))))
    else:
        models = [build(k) for k in range(len(combos))]
    return list(zip(labels, models))


def run_experiment_grid(partitions: list[Partition], cfg: fl.RoundConfig, regime: str,
                        arch: nn.ArchDescriptor | None = None, jobs: int = 1) -> GridReport:
    """Train every column combination and score it on all validation sets."""
    columns = train_grid_models(partitions, cfg, regime, arch, jobs)
    rows = tuple(p.name for p in partitions)
    cells = tuple(
        tuple(evaluate(model, p.val) for _, model in columns)
        for p in partitions
    )
    return GridReport(regime, rows, tuple(label for label, _ in columns), cells)


def run_sim2real(partitions: list[Partition], holdout: Dataset, cfg: fl.RoundConfig,
                 arch: nn.ArchDescriptor | None = None,
                 jobs: int = 1) -> tuple[Sim2RealPoint, ...]:
    """Score all 7 centralized and 4 federated sim-trained models on the
    real-domain hold-out; returns the 11-point series in column order."""
    if holdout.domain != REAL:
        raise ValueError(f"hold-out must be real-domain, got {holdout.domain!r}")
    for p in partitions:
        if p.train.domain != SIM or p.val.domain != SIM:
            raise ValueError(f"training partition {p.name!r} must be sim-domain")
    points: list[Sim2RealPoint] = []
    for regime in (CENTRALIZED, FEDERATED):
        for label, model in train_grid_models(partitions, cfg, regime, arch, jobs):
            points.append(Sim2RealPoint(label, regime, evaluate(model, holdout).accuracy))
    return tuple(points)


def sim2real_csv(points: Sequence[Sim2RealPoint]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["combination", "regime", "accuracy"])
    for pt in points:
        writer.writerow([pt.combination, pt.regime, f"{pt.accuracy:.6f}"])
    return buf.getvalue()


def render_metric_table(centralized: GridReport, federated: GridReport, metric: str) -> str:
    """Fixed-width table with the centralized and federated column blocks
    side by side, one row per validation set."""
    if centralized.rows != federated.rows:
        raise ValueError("grids cover different validation sets")
    width = 7
    cen_cols = [f"{c:>{width}}" for c in centralized.columns]
    fed_cols = [f"{c:>{width}}" for c in federated.columns]
    header_groups = (f"{'':8}|{metric + ' / ' + CENTRALIZED:^{(width + 1) * 7}}|"
                     f"{metric + ' / ' + FEDERATED:^{(width + 1) * 4}}")
    header_cols = f"{'valid.':8}|" + " ".join(cen_cols) + " |" + " ".join(fed_cols)
    lines = [header_groups, header_cols, "-" * len(header_cols)]
    for row in centralized.rows:
        cen = " ".join(f"{getattr(centralized.cell(row, c), metric):>{width}.3f}"
                       for c in centralized.columns)
        fed = " ".join(f"{getattr(federated.cell(row, c), metric):>{width}.3f}"
                       for c in federated.columns)
        lines.append(f"{row:8}|" + cen + " |" + fed)
    return "\n".join(lines) + "\n"
