"""
Reconstruction-error scoring, score orientation, threshold calibration, ROC/AUC,
the maximum strategy and false-positive reporting.
"""
import csv
import logging
import time
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy.stats import rankdata
from sklearn import metrics

from sdd.cwt import SampleTensor, stack_samples
from sdd.engine import ModelGraph
from sdd.exceptions import InvalidArgumentError, UndefinedMetricError
from sdd.models import graph_modalities, reconstruct_batch
from sdd.schemas import EvalReport, FpRow, Modality, RocPoint, ScoreRecord

logger = logging.getLogger(__name__)

ScoreSet = List[ScoreRecord]
LabelsLike = Union[Sequence[int], Sequence[bool], Sequence[str], np.ndarray]

HIGH_ERROR_POSITIVE = "high_error_positive"
LOW_ERROR_POSITIVE = "low_error_positive"


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray  # thresholds[0] = +inf, the (0, 0) start point
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float

    def area(self) -> float:
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))

    def points(self) -> List[RocPoint]:
        return [
            RocPoint(fpr=float(f), tpr=float(t), threshold=float(th) if np.isfinite(th) else None)
            for f, t, th in zip(self.fpr, self.tpr, self.thresholds)
        ]


def _binary_labels(labels: LabelsLike) -> np.ndarray:
    values = np.asarray(labels)
    if values.dtype.kind in ("U", "S", "O"):
        unknown = set(values.tolist()) - {"damage", "background"}
        if unknown:
            raise InvalidArgumentError(f"Unknown labels {sorted(unknown)}")
        return (values == "damage").astype(np.int64)
    binary = values.astype(np.int64)
    if not np.all((binary == 0) | (binary == 1)):
        raise InvalidArgumentError("Labels must be binary")
    return binary


def _scores_and_labels(scores: Sequence[float], labels: LabelsLike) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = _binary_labels(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise InvalidArgumentError(f"scores {s.shape} and labels {y.shape} must be equal-length vectors")
    if not np.all(np.isfinite(s)):
        raise InvalidArgumentError("scores must be finite")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise UndefinedMetricError("AUC is undefined unless both classes are present")
    return s, y


# =============================================================================
# METRICS
# =============================================================================

def auc(scores: Sequence[float], labels: LabelsLike) -> float:
    """Mann-Whitney AUC with midranks for ties (a tied pair counts 1/2)."""
    s, y = _scores_and_labels(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores: Sequence[float], labels: LabelsLike) -> RocCurve:
    """One operating point per distinct score, starting at (0, 0)."""
    s, y = _scores_and_labels(scores, labels)
    fpr, tpr, thresholds = metrics.roc_curve(y, s, drop_intermediate=False)
    return RocCurve(thresholds=np.asarray(thresholds, dtype=np.float64), tpr=tpr, fpr=fpr, auc=auc(s, y))


def calibrate_threshold(scores: Sequence[float], percentile: float = 95.0) -> float:
    """Linear-interpolation percentile of calibration (background) scores."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise InvalidArgumentError("Calibration set is empty")
    if not 0 < percentile <= 100:
        raise InvalidArgumentError(f"percentile must lie in (0, 100], got {percentile}")
    return float(np.percentile(s, percentile, method="linear"))


def max_strategy(auc_acc: float, auc_aud: float) -> float:
    for value in (auc_acc, auc_aud):
        if not 0.0 <= value <= 1.0:
            raise InvalidArgumentError(f"AUC {value} outside [0, 1]")
    return max(auc_acc, auc_aud)


def fp_report(scoreset: Iterable[ScoreRecord], threshold: float, modality: Modality = "acc") -> List[FpRow]:
    """Background samples per category whose score exceeds the threshold, most FPs first."""
    totals: Dict[str, int] = defaultdict(int)
    false_positives: Dict[str, int] = defaultdict(int)
    for record in scoreset:
        if record.label != "background":
            continue
        score = record.score_acc if modality == "acc" else record.score_aud
        if score is None:
            raise InvalidArgumentError(f"Record '{record.id}' has no {modality} score")
        totals[record.category] += 1
        if score > threshold:
            false_positives[record.category] += 1
    rows = [FpRow(category=c, false_positives=false_positives[c], backgrounds=n) for c, n in totals.items()]
    return sorted(rows, key=lambda r: (-r.false_positives, r.category))


# =============================================================================
# SCORING
# =============================================================================

def score(graph: ModelGraph, samples: Sequence[SampleTensor], loss_id: str, batch_size: int = 64) -> ScoreSet:
    """Raw per-modality reconstruction errors; only the modalities the model reconstructs are filled."""
    if not samples:
        raise InvalidArgumentError("Cannot score an empty sample list")
    losses = reconstruct_batch(graph, stack_samples(samples), loss_id, batch_size)
    records = []
    for i, sample in enumerate(samples):
        records.append(ScoreRecord(
            id=sample.id,
            score_acc=float(losses["acc"][i]) if "acc" in losses else None,
            score_aud=float(losses["aud"][i]) if "aud" in losses else None,
            label=sample.label,
            category=sample.category,
        ))
    return records


def measure_inference(graph: ModelGraph, samples: Sequence[SampleTensor], n_runs: int = 100) -> np.ndarray:
    """Wall-clock milliseconds of single-sample forward passes, cycling through the samples."""
    if not samples:
        raise InvalidArgumentError("Cannot time inference without samples")
    modalities = graph_modalities(graph)
    graph.eval()
    timings = np.empty(n_runs)
    with torch.no_grad():
        for i in range(n_runs):
            arrays = stack_samples([samples[i % len(samples)]])
            inputs = {m: torch.as_tensor(arrays[m], dtype=graph.dtype) for m in modalities}
            start = time.perf_counter()
            graph(inputs)
            timings[i] = (time.perf_counter() - start) * 1000.0
    return timings


def _modality_scores(records: Sequence[ScoreRecord], modality: Modality) -> Optional[np.ndarray]:
    values = [r.score_acc if modality == "acc" else r.score_aud for r in records]
    if any(v is None for v in values):
        return None
    return np.asarray(values, dtype=np.float64)


def apply_orientation(records: Iterable[ScoreRecord], orientation: Mapping[str, str]) -> ScoreSet:
    """Negate a modality's scores when its orientation is low_error_positive."""
    oriented = []
    for r in records:
        update = {}
        for modality, field_name in (("acc", "score_acc"), ("aud", "score_aud")):
            value = getattr(r, field_name)
            if value is not None and orientation.get(modality) == LOW_ERROR_POSITIVE:
                update[field_name] = -value
        oriented.append(r.model_copy(update=update))
    return oriented


def orient_scores(records: Sequence[ScoreRecord], mode: str = "auto") -> Tuple[ScoreSet, Dict[str, str]]:
    """
    Orient every modality so a higher score means "more likely damage". In auto
    mode a modality is negated when its raw-error AUC is below 0.5; the other
    modes force one orientation.
    """
    if mode not in ("auto", HIGH_ERROR_POSITIVE, LOW_ERROR_POSITIVE):
        raise InvalidArgumentError(f"Unknown orientation mode '{mode}'")
    labels = [r.label for r in records]
    orientation: Dict[str, str] = {}
    for modality in ("acc", "aud"):
        raw = _modality_scores(records, modality)
        if raw is None:
            continue
        if mode == "auto":
            orientation[modality] = HIGH_ERROR_POSITIVE if auc(raw, labels) >= 0.5 else LOW_ERROR_POSITIVE
        else:
            orientation[modality] = mode
    return apply_orientation(records, orientation), orientation


def decision_modality(aucs: Mapping[str, float]) -> Modality:
    """The modality with the larger AUC (acceleration on ties)."""
    return "aud" if aucs.get("aud", -1.0) > aucs.get("acc", -1.0) else "acc"


def evaluate_scores(
    records: Sequence[ScoreRecord],
    calibration: Sequence[ScoreRecord],
    model_id: str,
    loss_id: str,
    stats: Mapping[str, int],
    timings_ms: Sequence[float],
    orientation_mode: str = "auto",
    percentile: float = 95.0,
) -> EvalReport:
    """Assemble the eval report: per-modality AUC and ROC, max strategy, thresholds and FP table."""
    oriented, orientation = orient_scores(records, orientation_mode)
    labels = [r.label for r in oriented]

    aucs: Dict[str, float] = {}
    roc: Dict[str, List[RocPoint]] = {}
    for modality in orientation:
        curve = roc_curve(_modality_scores(oriented, modality), labels)
        aucs[modality] = curve.auc
        roc[modality] = curve.points()
    auc_best = max_strategy(aucs["acc"], aucs["aud"]) if len(aucs) == 2 else next(iter(aucs.values()))

    backgrounds = [r for r in apply_orientation(calibration, orientation) if r.label == "background"]
    if not backgrounds:
        logger.warning("No calibration backgrounds given; calibrating thresholds on the evaluated backgrounds")
        backgrounds = [r for r in oriented if r.label == "background"]
    thresholds = {m: calibrate_threshold(_modality_scores(backgrounds, m), percentile) for m in orientation}
    chosen = decision_modality(aucs)

    timings = np.asarray(timings_ms, dtype=np.float64)
    report = EvalReport(
        model_id=model_id,
        loss_id=loss_id,
        auc_acc=aucs.get("acc"),
        auc_aud=aucs.get("aud"),
        auc_best=auc_best,
        orientation=orientation,
        thresholds=thresholds,
        decision_modality=chosen,
        roc=roc,
        fp_table=fp_report(oriented, thresholds[chosen], chosen),
        n_samples=len(oriented),
        n_positive=sum(1 for r in oriented if r.label == "damage"),
        param_count=stats["param_count"],
        layer_count=stats["layer_count"],
        model_bytes=stats["model_bytes"],
        mean_inference_ms=float(timings.mean()) if timings.size else 0.0,
        std_inference_ms=float(timings.std()) if timings.size else 0.0,
    )
    logger.info(
        f"{model_id}/{loss_id}: auc_acc={report.auc_acc} auc_aud={report.auc_aud} "
        f"auc_best={report.auc_best:.4f} decision={chosen}"
    )
    return report


# =============================================================================
# RENDERING
# =============================================================================

def write_roc_csv(report: EvalReport, path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["modality", "fpr", "tpr", "threshold"])
        for modality in sorted(report.roc):
            for point in report.roc[modality]:
                writer.writerow([modality, repr(point.fpr), repr(point.tpr),
                                 "" if point.threshold is None else repr(point.threshold)])


def render_fp_table(rows: Sequence[FpRow]) -> str:
    lines = ["| Category | FP | Backgrounds |", "|---|---:|---:|"]
    lines += [f"| {r.category} | {r.false_positives} | {r.backgrounds} |" for r in rows]
    lines.append(f"| **Total** | {sum(r.false_positives for r in rows)} | {sum(r.backgrounds for r in rows)} |")
    return "\n".join(lines) + "\n"


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.3f}"


def render_summary(reports: Sequence[EvalReport]) -> str:
    """Markdown comparison of several eval reports: AUCs, then model size and latency."""
    lines = [
        "| Model | Loss | R-A (Acc.) | R-A (Au.) | R-A (best) | Params | Layers | Size (MB) | Inference (ms) |",
        "|---|---|---:|---:|---:|---:|---:|---:|---:|",
    ]
    for r in reports:
        lines.append(
            f"| {r.model_id} | {r.loss_id} | {_fmt(r.auc_acc)} | {_fmt(r.auc_aud)} | {_fmt(r.auc_best)} "
            f"| {r.param_count} | {r.layer_count} | {r.model_bytes / 1e6:.2f} "
            f"| {r.mean_inference_ms:.2f} ± {r.std_inference_ms:.2f} |"
        )
    return "\n".join(lines) + "\n"
