"""
Subcommand handlers. Each takes the parsed arguments and the resolved settings,
does the work and returns the one-line summary the CLI prints.
"""
import json
import logging
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

from pydantic import ValidationError

from sdd.config import Settings
from sdd.container import read_dataset_manifest, write_dataset
from sdd.dsp import SensorRecording
from sdd.engine import load_checkpoint
from sdd.evaluation import HIGH_ERROR_POSITIVE, render_fp_table, write_roc_csv
from sdd.exceptions import CheckpointError, UsageError
from sdd.models import graph_modalities
from sdd.schemas import DatasetManifest, DatasetSpec, ManifestEntry
from sdd.services.experiments import ExperimentService, StreamCalibration, summarize_reports, write_report
from sdd.services.pipeline import DatasetSplit, DetectionPipeline, count_decisions, ordered_map, stream_source
from sdd.sinks import parse_sink
from sdd.synthgen import build_manifest, gen_ride

logger = logging.getLogger(__name__)


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


# =================
# Data generation
# =================

def read_spec(path: Optional[str], seed: Optional[int] = None) -> DatasetSpec:
    values = {}
    if path is not None:
        try:
            values = json.loads(_existing(path, "Spec file").read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise UsageError(f"Spec file {path} is not valid JSON: {e}") from e
    if seed is not None:
        values["seed"] = seed
    try:
        return DatasetSpec.model_validate(values)
    except ValidationError as e:
        raise UsageError(f"Spec file {path} is invalid: {e.errors()[0]['msg']}") from e


def _generate(spec: DatasetSpec, manifest: DatasetManifest, workers: int) -> Iterator[Tuple[ManifestEntry, SensorRecording]]:
    def make(entry: ManifestEntry) -> Tuple[ManifestEntry, SensorRecording]:
        return entry, gen_ride(spec, entry.category, entry.seed, entry.id)

    yield from ordered_map(make, manifest.entries, workers)


def handle_generate(args, settings: Settings) -> str:
    spec = read_spec(args.spec, args.seed)
    manifest = build_manifest(spec)
    write_dataset(args.out, manifest, _generate(spec, manifest, settings.MAX_WORKERS))
    n_damage = sum(1 for e in manifest.entries if e.label == "damage")
    return f"Generated {len(manifest.entries)} recordings ({n_damage} damage) in {args.out}"


# =================
# Training & evaluation
# =================

def handle_train(args, settings: Settings) -> str:
    _existing(args.data, "Data directory")
    service = ExperimentService(settings)
    trained = service.train(args.model, args.data, service.train_config(), out=args.out)
    history = trained.history
    best = "n/a" if history.best_epoch < 0 else f"{history.best_loss:.6g} at epoch {history.best_epoch}"
    suffix = f"; diverged ({history.diverged})" if history.diverged else ""
    return f"Saved {args.model} checkpoint to {args.out} after {history.epochs} epoch(s), best loss {best}{suffix}"


def handle_eval(args, settings: Settings) -> str:
    _existing(args.ckpt, "Checkpoint")
    _existing(args.data, "Data directory")
    report = ExperimentService(settings).evaluate_checkpoint(args.ckpt, args.data)
    write_report(report, args.report, include_timing=not args.no_timing)
    if args.roc_csv:
        write_roc_csv(report, args.roc_csv)
    logger.info("False positives by category:\n" + render_fp_table(report.fp_table))
    return (f"{report.model_id}: auc_acc={_fmt(report.auc_acc)} auc_aud={_fmt(report.auc_aud)} "
            f"auc_best={report.auc_best:.4f} -> {args.report}")


def handle_loss_screen(args, settings: Settings) -> str:
    _existing(args.data, "Data directory")
    rows = ExperimentService(settings).loss_screen(args.data, args.out, model_id=args.model, epochs=args.epochs)
    best = max(rows, key=lambda r: r["auc_best"])
    return f"Screened {len(rows)} losses on {args.model}; best {best['loss']} (auc {best['auc_best']:.4f}) -> {args.out}"


def handle_optimizer_screen(args, settings: Settings) -> str:
    _existing(args.data, "Data directory")
    rows = ExperimentService(settings).optimizer_screen(
        args.data, args.out, model_id=args.model, epochs=args.epochs, subset=args.subset
    )
    return f"Wrote {len(rows)} loss-curve rows -> {args.out}"


def handle_report(args, settings: Settings) -> str:
    paths = [_existing(p, "Report") for p in args.inputs]
    Path(args.out).write_text(summarize_reports(paths), encoding="utf-8")
    return f"Summarized {len(paths)} report(s) -> {args.out}"


# =================
# Detection stream
# =================

def _stream_ids(metadata: dict, data_dir: str, use_all: bool) -> Optional[List[str]]:
    """The checkpoint's test split when it belongs to this dataset, else every recording."""
    if use_all or "split" not in metadata:
        return None
    split = DatasetSplit.from_dict(metadata["split"])
    if not split.covers(read_dataset_manifest(data_dir)):
        return None
    return split.test


def handle_run(args, settings: Settings) -> str:
    _existing(args.ckpt, "Checkpoint")
    _existing(args.data, "Data directory")
    graph, metadata = load_checkpoint(args.ckpt)
    if "loss_id" not in metadata:
        raise CheckpointError(f"{args.ckpt} carries no loss id")
    if args.threshold is None:
        calibration = ExperimentService(settings).calibrate_stream(graph, metadata, args.data, args.threshold_percentile)
    else:
        orientation = HIGH_ERROR_POSITIVE if settings.SCORE_ORIENTATION == "auto" else settings.SCORE_ORIENTATION
        calibration = StreamCalibration(args.threshold, orientation, graph_modalities(graph)[0])

    sink = parse_sink(args.sink, settings.SINK_TIMEOUT_SECONDS)
    pipeline = DetectionPipeline(
        graph,
        metadata["loss_id"],
        calibration.threshold,
        sink,
        model_id=metadata.get("model_id", "model"),
        orientation=calibration.orientation,
        decision_modality=calibration.decision_modality,
        settings=settings,
    )
    try:
        records = list(pipeline.run(stream_source(args.data, _stream_ids(metadata, args.data, args.all))))
    finally:
        sink.close()
    damage, background = count_decisions(records)
    failed = sum(1 for r in records if r.delivery_failed)
    suffix = f", {failed} delivery failure(s) logged to {settings.FAILED_DELIVERY_LOG}" if failed else ""
    return f"{len(records)} trigger(s): {damage} damage, {background} background{suffix}"


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.4f}"
