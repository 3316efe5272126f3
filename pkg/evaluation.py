"""
ROC / precision-recall evaluation, class activation maps and regime comparison
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from sklearn.metrics import auc, average_precision_score, precision_recall_curve, roc_curve

import plots
from classifier import ClassifierModel, forward, predict
from data_ingest import Sample
from utils.errors import InputError, ShapeMismatchError
from utils.logger import logger

PathLike = Union[str, Path]
COMPARISON_COLUMNS = ("regime", "roc_auc", "pr_auc", "recall", "precision", "specificity")


@dataclass
class ScoredSet:
    """Classifier scores and true labels for one regime on the validation samples"""
    scores: np.ndarray
    labels: np.ndarray
    regime: str = ""
    ids: Optional[List[str]] = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels).reshape(-1)
        if self.scores.shape != self.labels.shape:
            raise InputError(f"{self.scores.size} scores for {self.labels.size} labels")
        if not np.isin(self.labels, (0, 1)).all():
            raise InputError("labels must be 0 or 1")
        self.labels = self.labels.astype(np.int64)
        if self.ids is None:
            self.ids = [str(i) for i in range(self.scores.size)]
        elif len(self.ids) != self.scores.size:
            raise InputError(f"{len(self.ids)} ids for {self.scores.size} scores")

    @property
    def positives(self) -> int:
        return int(self.labels.sum())

    @property
    def negatives(self) -> int:
        return int(self.labels.size - self.labels.sum())


@dataclass
class CurveReport:
    regime: str
    sample_ids: List[str]
    roc_points: np.ndarray
    roc_auc: float
    pr_points: np.ndarray
    pr_auc: float
    threshold: float = 0.5
    recall: float = float("nan")
    precision: float = float("nan")
    specificity: float = float("nan")


@dataclass
class CAMap:
    heatmap: np.ndarray
    probability: float
    sample_id: str
    raw: Optional[np.ndarray] = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# Curves
# ---------------------------------------------------------------------------

def roc_auc(scored: ScoredSet) -> Tuple[np.ndarray, float]:
    """(fpr, tpr) points from (0, 0) to (1, 1) and the trapezoidal area

    Tied scores form a single threshold, so the area equals the Mann-Whitney
    statistic with ties credited 0.5.
    """
    if scored.positives == 0 or scored.negatives == 0:
        raise InputError("ROC AUC needs both classes")
    fpr, tpr, _ = roc_curve(scored.labels, scored.scores, drop_intermediate=False)
    return np.column_stack([fpr, tpr]), float(auc(fpr, tpr))


def pr_auc(scored: ScoredSet) -> Tuple[np.ndarray, float]:
    """(recall, precision) points with recall nondecreasing, and average precision

    The sweep starts at (0, 1); thresholds that catch no positive add no area
    and are left out.
    """
    if scored.positives == 0:
        raise InputError("precision-recall needs at least one positive sample")
    precision, recall, _ = precision_recall_curve(scored.labels, scored.scores)
    points = np.column_stack([recall[::-1], precision[::-1]])
    keep = (points[:, 0] > 0) | (np.arange(len(points)) == 0)
    return points[keep], float(average_precision_score(scored.labels, scored.scores))


def operating_point(scored: ScoredSet, threshold: float = 0.5) -> Dict[str, float]:
    """Recall, precision and specificity when predicting 1 for score >= threshold"""
    predicted = scored.scores >= threshold
    positive = scored.labels == 1
    tp = int(np.sum(predicted & positive))
    fp = int(np.sum(predicted & ~positive))
    tn = int(np.sum(~predicted & ~positive))
    return {
        "recall": tp / scored.positives if scored.positives else float("nan"),
        "precision": tp / (tp + fp) if tp + fp else 0.0,
        "specificity": tn / scored.negatives if scored.negatives else float("nan"),
    }


def curve_report(scored: ScoredSet, threshold: float = 0.5) -> CurveReport:
    roc_points, roc_value = roc_auc(scored)
    pr_points, pr_value = pr_auc(scored)
    return CurveReport(
        regime=scored.regime,
        sample_ids=list(scored.ids),
        roc_points=roc_points,
        roc_auc=roc_value,
        pr_points=pr_points,
        pr_auc=pr_value,
        threshold=threshold,
        **operating_point(scored, threshold),
    )


def score_samples(model: ClassifierModel, samples: Sequence[Sample], regime: str = "") -> ScoredSet:
    return ScoredSet(predict(model, samples), [s.label for s in samples], regime, [s.id for s in samples])


def write_curves(report: CurveReport, out_dir: PathLike) -> List[Path]:
    """ROC and PR point lists as CSV"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    roc_path = out_dir / f"roc_{report.regime}.csv"
    pr_path = out_dir / f"pr_{report.regime}.csv"
    pd.DataFrame(report.roc_points, columns=["fpr", "tpr"]).to_csv(
        roc_path, index=False, lineterminator="\n", float_format="%.12g")
    pd.DataFrame(report.pr_points, columns=["recall", "precision"]).to_csv(
        pr_path, index=False, lineterminator="\n", float_format="%.12g")
    return [roc_path, pr_path]


# ---------------------------------------------------------------------------
# Class activation maps
# ---------------------------------------------------------------------------

def class_activation_raw(features: np.ndarray, weights: np.ndarray, size: int) -> np.ndarray:
    """sum_k w_k * f_k for h x w x K features, bilinearly upsampled to size x size"""
    features = np.asarray(features, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if features.ndim != 3 or features.shape[2] != weights.size:
        raise ShapeMismatchError(f"features {features.shape} do not match {weights.size} head weights")
    raw = features @ weights
    tensor = torch.from_numpy(np.ascontiguousarray(raw))[None, None]
    upsampled = F.interpolate(tensor, size=(size, size), mode="bilinear", align_corners=False)
    return upsampled[0, 0].numpy()


def normalize_map(raw: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant map (up to rounding) becomes all zeros"""
    low, high = float(raw.min()), float(raw.max())
    if high - low <= 1e-12 * max(1.0, abs(high), abs(low)):
        return np.zeros_like(raw, dtype=np.float64)
    return (raw - low) / (high - low)


def compute_cam(model: ClassifierModel, sample: Sample) -> CAMap:
    probabilities, features = forward(model, sample.image[None], with_features=True)
    raw = class_activation_raw(features[0], model.head_weights(), model.resolution)
    return CAMap(normalize_map(raw), float(probabilities[0]), sample.id, raw)


def cam_peak(cam: CAMap) -> Tuple[int, int]:
    """(x, y) of the heatmap maximum"""
    y, x = np.unravel_index(int(np.argmax(cam.heatmap)), cam.heatmap.shape)
    return int(x), int(y)


# ---------------------------------------------------------------------------
# Regime comparison
# ---------------------------------------------------------------------------

def metrics_table(reports: Mapping[str, CurveReport]) -> pd.DataFrame:
    rows = [{
        "regime": regime,
        "roc_auc": report.roc_auc,
        "pr_auc": report.pr_auc,
        "recall": report.recall,
        "precision": report.precision,
        "specificity": report.specificity,
    } for regime, report in reports.items()]
    return pd.DataFrame(rows, columns=list(COMPARISON_COLUMNS))


def write_metrics(table: pd.DataFrame, metrics_dir: PathLike) -> List[Path]:
    metrics_dir = Path(metrics_dir)
    metrics_dir.mkdir(parents=True, exist_ok=True)
    csv_path = metrics_dir / "comparison.csv"
    json_path = metrics_dir / "comparison.json"
    table.to_csv(csv_path, index=False, lineterminator="\n", float_format="%.12g")
    records = [{k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in row.items()}
               for row in table.to_dict(orient="records")]
    json_path.write_text(json.dumps(records, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return [csv_path, json_path]


def compare_regimes(reports: Mapping[str, CurveReport], out_dir: PathLike) -> pd.DataFrame:
    """Comparison table in `out_dir/metrics/`, overlaid ROC + PR panels in `out_dir/plots/`"""
    if len(reports) < 2:
        raise InputError(f"comparison needs at least two regimes, got {len(reports)}")
    reference_regime, reference = next(iter(reports.items()))
    for regime, report in reports.items():
        if sorted(report.sample_ids) != sorted(reference.sample_ids):
            raise InputError(f"regime '{regime}' was evaluated on other validation samples "
                             f"than '{reference_regime}'")

    out_dir = Path(out_dir)
    table = metrics_table(reports)
    write_metrics(table, out_dir / "metrics")
    for report in reports.values():
        write_curves(report, out_dir / "metrics")
    plots.save_roc_pr(reports, out_dir / "plots" / "roc_pr")
    logger.info("REGIMES_COMPARED", regimes=list(reports), roc_auc={r: rep.roc_auc for r, rep in reports.items()})
    return table
