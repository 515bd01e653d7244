"""
Experiment orchestration: training, evaluation, the loss and optimizer screens,
stream calibration and the multi-model summary.
"""
import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from pydantic import ValidationError

from sdd.config import LOSS_IDS, OPTIMIZERS, Settings, get_settings
from sdd.container import read_dataset_manifest
from sdd.cwt import SampleTensor, expand_training_set, stack_samples
from sdd.engine import ModelGraph, TrainHistory, load_checkpoint, save_checkpoint, train
from sdd.evaluation import (
    HIGH_ERROR_POSITIVE,
    auc,
    calibrate_threshold,
    decision_modality,
    evaluate_scores,
    measure_inference,
    orient_scores,
    render_summary,
    score,
)
from sdd.exceptions import CheckpointError, ConfigError, InvalidArgumentError
from sdd.models import build_model, graph_modalities, model_config_for, model_stats, reconstruction_objective
from sdd.schemas import EvalReport, Modality, TrainConfig
from sdd.services.pipeline import DatasetSplit, load_samples, split_dataset

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass
class ExperimentData:
    """Spectrogram samples of one dataset directory, grouped by split role."""
    split: DatasetSplit
    train: List[SampleTensor]  # augmented
    val: List[SampleTensor]
    calibration: List[SampleTensor]
    test: List[SampleTensor]


@dataclass
class TrainedModel:
    graph: ModelGraph
    history: TrainHistory
    metadata: Dict[str, Any]


@dataclass(frozen=True)
class StreamCalibration:
    threshold: float
    orientation: str
    decision_modality: Modality


class ExperimentService:
    def __init__(self, settings: Optional[Settings] = None):
        self.settings = settings or get_settings()
        self._cache: Dict[Tuple[str, str], ExperimentData] = {}

    # -------------------------------------------------------------------------
    # data
    # -------------------------------------------------------------------------

    def prepare(self, data_dir: PathLike, split: Optional[DatasetSplit] = None) -> ExperimentData:
        """
        Load and split a dataset directory; cached per (directory, split). A given
        split that does not belong to this directory (a checkpoint evaluated on
        another dataset) turns every recording into a test recording.
        """
        manifest = read_dataset_manifest(data_dir)
        if split is None:
            split = split_dataset(manifest, self.settings)
        elif not split.covers(manifest):
            logger.info(f"Checkpoint split does not belong to {data_dir}; evaluating on all recordings")
            split = DatasetSplit(test=[e.id for e in manifest.entries])
        key = (str(Path(data_dir).resolve()), json.dumps(split.to_dict(), sort_keys=True))
        if key in self._cache:
            return self._cache[key]

        def samples(ids: List[str], label: Optional[str] = None) -> List[SampleTensor]:
            return load_samples(data_dir, ids, self.settings, manifest, label=label) if ids else []

        data = ExperimentData(
            split=split,
            train=expand_training_set(samples(split.train, label="damage")),
            val=samples(split.val, label="damage"),
            calibration=samples(split.calibration, label="background"),
            test=samples(split.test),
        )
        logger.info(
            f"Prepared {data_dir}: {len(data.train)} augmented train, {len(data.val)} val, "
            f"{len(data.calibration)} calibration, {len(data.test)} test samples"
        )
        self._cache[key] = data
        return data

    def _fusion_overrides(self, seed: int) -> Dict[str, Any]:
        return {
            "input_size": self.settings.SPECTROGRAM_SIZE,
            "filters": tuple(self.settings.MODEL_FILTERS),
            "latent_channels": self.settings.LATENT_CHANNELS,
            "sparsity": self.settings.SPARSE_LATENT,
            "seed": seed,
        }

    # -------------------------------------------------------------------------
    # training
    # -------------------------------------------------------------------------

    def train(
        self,
        model_id: str,
        data_dir: PathLike,
        config: TrainConfig,
        out: Optional[PathLike] = None,
        data: Optional[ExperimentData] = None,
    ) -> TrainedModel:
        """Train one model on the augmented trained-category damages; optionally save checkpoint + history CSV."""
        data = data or self.prepare(data_dir)
        if not data.train:
            raise InvalidArgumentError(f"No damage windows among the {len(data.split.train)} training recordings")
        fusion = model_config_for(model_id, **self._fusion_overrides(config.seed))
        graph = build_model(fusion)
        modalities = graph_modalities(graph)
        sparsity = config.sparsity_weight if fusion.sparsity else 0.0
        objective = reconstruction_objective(config.loss, sparsity, config.kl_weight)

        train_set = {m: v for m, v in stack_samples(data.train).items() if m in modalities}
        val_set = {m: v for m, v in stack_samples(data.val).items() if m in modalities} if data.val else None
        logger.info(f"Training {model_id} ({config.optimizer}, lr={config.learning_rate}, "
                    f"{config.epochs} epochs, loss={config.loss}) on {len(data.train)} samples")
        result = train(graph, train_set, val_set, config, objective)

        metadata = {
            "model_id": model_id,
            "loss_id": config.loss,
            "fusion_config": fusion.model_dump(mode="json"),
            "train_config": config.model_dump(mode="json"),
            "split": data.split.to_dict(),
            "best_epoch": result.history.best_epoch,
            "diverged": result.history.diverged,
        }
        if out is not None:
            save_checkpoint(graph, out, metadata)
            history_path = history_path_for(out)
            result.history.to_csv(history_path)
            logger.info(f"History written to {history_path}")
        return TrainedModel(graph=graph, history=result.history, metadata=metadata)

    # -------------------------------------------------------------------------
    # evaluation
    # -------------------------------------------------------------------------

    def evaluate(
        self,
        graph: ModelGraph,
        metadata: Mapping[str, Any],
        data_dir: PathLike,
        n_timing_runs: int = 100,
    ) -> EvalReport:
        """Score the test split, calibrate on the calibration backgrounds and assemble the report."""
        loss_id, model_id = _require(metadata, "loss_id"), _require(metadata, "model_id")
        split = DatasetSplit.from_dict(metadata["split"]) if "split" in metadata else None
        data = self.prepare(data_dir, split)
        if not data.test:
            raise InvalidArgumentError("Test split holds no trigger windows")

        records = score(graph, data.test, loss_id)
        calibration = score(graph, data.calibration, loss_id) if data.calibration else []
        timings = measure_inference(graph, data.test, n_timing_runs)
        return evaluate_scores(
            records, calibration, model_id, loss_id, model_stats(graph), timings,
            orientation_mode=self.settings.SCORE_ORIENTATION,
            percentile=self.settings.CALIBRATION_PERCENTILE,
        )

    def evaluate_checkpoint(self, ckpt: PathLike, data_dir: PathLike) -> EvalReport:
        graph, metadata = load_checkpoint(ckpt)
        return self.evaluate(graph, metadata, data_dir)

    def calibrate_stream(
        self,
        graph: ModelGraph,
        metadata: Mapping[str, Any],
        data_dir: PathLike,
        percentile: Optional[float] = None,
    ) -> StreamCalibration:
        """
        Threshold for the live stream, taken only from labeled data the stream will
        not see: orientation and decision modality from validation damages against
        calibration backgrounds, threshold at `percentile` of the oriented
        calibration-background scores.
        """
        percentile = self.settings.CALIBRATION_PERCENTILE if percentile is None else percentile
        loss_id = _require(metadata, "loss_id")
        split = DatasetSplit.from_dict(metadata["split"]) if "split" in metadata else None
        data = self.prepare(data_dir, split)
        if not data.calibration:
            raise InvalidArgumentError("No calibration backgrounds to set a threshold from")

        records = score(graph, data.val + data.calibration, loss_id)
        modalities = graph_modalities(graph)
        if data.val and self.settings.SCORE_ORIENTATION == "auto":
            oriented, orientation = orient_scores(records, "auto")
            labels = [r.label for r in oriented]
            aucs = {m: auc([getattr(r, f"score_{m}") for r in oriented], labels) for m in modalities}
            chosen = decision_modality(aucs)
        else:
            mode = HIGH_ERROR_POSITIVE if self.settings.SCORE_ORIENTATION == "auto" else self.settings.SCORE_ORIENTATION
            oriented, orientation = orient_scores(records, mode)
            chosen = modalities[0]
        backgrounds = [getattr(r, f"score_{chosen}") for r in oriented if r.label == "background"]
        threshold = calibrate_threshold(backgrounds, percentile)
        logger.info(f"Stream threshold {threshold:.6g} on {chosen} ({orientation[chosen]}, p{percentile:g})")
        return StreamCalibration(threshold=threshold, orientation=orientation[chosen], decision_modality=chosen)

    # -------------------------------------------------------------------------
    # screens
    # -------------------------------------------------------------------------

    def loss_screen(
        self,
        data_dir: PathLike,
        out: PathLike,
        model_id: str = "maud",
        losses: Sequence[str] = LOSS_IDS,
        epochs: Optional[int] = None,
    ) -> List[Dict[str, Any]]:
        """Train and evaluate one mono model per loss; writes loss,auc_acc,auc_aud,auc_best CSV rows."""
        data = self.prepare(data_dir)
        rows = []
        for loss_id in losses:
            config = self.train_config(loss=loss_id, epochs=epochs)
            trained = self.train(model_id, data_dir, config, data=data)
            report = self.evaluate(trained.graph, trained.metadata, data_dir, n_timing_runs=10)
            rows.append({
                "loss": loss_id,
                "model_id": model_id,
                "auc_acc": report.auc_acc,
                "auc_aud": report.auc_aud,
                "auc_best": report.auc_best,
                "orientation": report.orientation.get(report.decision_modality),
            })
        _write_rows(out, ["loss", "model_id", "auc_acc", "auc_aud", "auc_best", "orientation"], rows)
        logger.info(f"Loss screen written to {out}")
        return rows

    def optimizer_screen(
        self,
        data_dir: PathLike,
        out: PathLike,
        model_id: str = "macc",
        optimizers: Sequence[str] = OPTIMIZERS,
        epochs: Optional[int] = None,
        subset: int = 64,
    ) -> List[Dict[str, Any]]:
        """Per-epoch train/val loss of each optimizer on a small training subset."""
        full = self.prepare(data_dir)
        data = ExperimentData(split=full.split, train=full.train[:subset], val=full.val,
                              calibration=full.calibration, test=full.test)
        rows = []
        for name in optimizers:
            trained = self.train(model_id, data_dir, self.train_config(optimizer=name, epochs=epochs), data=data)
            for epoch, (tl, vl) in enumerate(zip(trained.history.train_loss, trained.history.val_loss)):
                rows.append({"optimizer": name, "epoch": epoch, "train_loss": tl, "val_loss": vl})
        _write_rows(out, ["optimizer", "epoch", "train_loss", "val_loss"], rows)
        logger.info(f"Optimizer screen written to {out}")
        return rows

    def train_config(self, **overrides: Any) -> TrainConfig:
        """TrainConfig from settings; None overrides fall back to the settings value."""
        values = {
            "optimizer": self.settings.OPTIMIZER,
            "learning_rate": self.settings.LEARNING_RATE,
            "epochs": self.settings.EPOCHS,
            "batch_size": self.settings.BATCH_SIZE,
            "loss": self.settings.LOSS,
            "seed": self.settings.SEED,
            "sparsity_weight": self.settings.SPARSITY_WEIGHT,
            "kl_weight": self.settings.KL_WEIGHT,
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return TrainConfig(**values)
        except ValidationError as e:
            raise ConfigError(f"Invalid training configuration: {e.errors()[0]['msg']}") from e


# =============================================================================
# REPORTS
# =============================================================================

def history_path_for(ckpt: PathLike) -> Path:
    p = Path(ckpt)
    return p.with_name(p.stem + "_history.csv")


def _require(metadata: Mapping[str, Any], key: str) -> Any:
    if key not in metadata:
        raise CheckpointError(f"Checkpoint metadata lacks '{key}'")
    return metadata[key]


def _write_rows(path: PathLike, columns: List[str], rows: List[Dict[str, Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if row.get(k) is None else row[k] for k in columns})


def write_report(report: EvalReport, path: PathLike, include_timing: bool = True) -> None:
    Path(path).write_text(report.to_json(include_timing), encoding="utf-8")


def read_report(path: PathLike) -> EvalReport:
    p = Path(path)
    if not p.exists():
        raise InvalidArgumentError(f"Report not found: {p}")
    try:
        return EvalReport.model_validate_json(p.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise InvalidArgumentError(f"{p} is not an eval report: {e.errors()[0]['msg']}") from e


def summarize_reports(paths: Sequence[PathLike]) -> str:
    if not paths:
        raise InvalidArgumentError("No reports to summarize")
    return render_summary([read_report(p) for p in paths])
