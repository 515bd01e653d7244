"""
Event-driven detection loop: trigger -> preprocess -> spectrogram -> reconstruct
-> score -> decision, with damage decisions delivered to a sink.
"""
import logging
import time
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Deque, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
from tenacity import Retrying, before_sleep_log, retry_if_exception_type, stop_after_attempt

from sdd.config import Settings, get_settings
from sdd.container import iter_containers, read_dataset_manifest
from sdd.cwt import SampleTensor, window_to_sample
from sdd.dsp import EventWindow, SensorRecording, detect_with_settings, preprocess_window
from sdd.engine import ModelGraph
from sdd.evaluation import LOW_ERROR_POSITIVE
from sdd.exceptions import InvalidArgumentError, SinkError
from sdd.models import graph_modalities, reconstruct
from sdd.schemas import DatasetManifest, DetectionRecord, Modality
from sdd.sinks import FileSink, Sink

logger = logging.getLogger(__name__)


# =============================================================================
# WORKERS
# =============================================================================

T = TypeVar("T")
R = TypeVar("R")


def ordered_map(fn: Callable[[T], R], items: Iterable[T], workers: int) -> Iterator[R]:
    """
    `map(fn, items)` on `workers` threads, in input order. At most 2 * workers
    items are pulled ahead of the consumer, so a lazy source stays lazy.
    """
    if workers <= 1:
        yield from map(fn, items)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending: Deque[Future] = deque()
        for item in items:
            pending.append(pool.submit(fn, item))
            if len(pending) >= 2 * workers:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


# =============================================================================
# DATASET SPLIT
# =============================================================================

@dataclass(frozen=True)
class DatasetSplit:
    """Recording ids per role. Only the trained damage category is ever trained on."""
    train: List[str] = field(default_factory=list)
    val: List[str] = field(default_factory=list)
    calibration: List[str] = field(default_factory=list)
    test: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, List[str]]:
        return {"train": self.train, "val": self.val, "calibration": self.calibration, "test": self.test}

    @classmethod
    def from_dict(cls, payload: Dict[str, List[str]]) -> "DatasetSplit":
        return cls(**{k: list(payload.get(k, [])) for k in ("train", "val", "calibration", "test")})

    def covers(self, manifest: DatasetManifest) -> bool:
        """True when every id of this split belongs to the manifest."""
        known = {e.id for e in manifest.entries}
        return all(i in known for part in self.to_dict().values() for i in part)


def split_dataset(manifest: DatasetManifest, settings: Optional[Settings] = None, seed: Optional[int] = None) -> DatasetSplit:
    """
    Trained-category damages go to train/val/test by TRAIN_FRACTION and
    VALIDATION_FRACTION; other damage types go to test; backgrounds are split into
    calibration (CALIBRATION_FRACTION) and test. Shuffles are seeded.
    """
    settings = settings or get_settings()
    rng = np.random.default_rng(settings.SEED if seed is None else seed)

    trained = [e.id for e in manifest.entries if e.label == "damage" and e.category == settings.TRAIN_CATEGORY]
    other_damage = [e.id for e in manifest.entries if e.label == "damage" and e.category != settings.TRAIN_CATEGORY]
    backgrounds = [e.id for e in manifest.entries if e.label == "background"]
    if not trained:
        raise InvalidArgumentError(f"Dataset has no '{settings.TRAIN_CATEGORY}' recordings to train on")

    trained = [trained[i] for i in rng.permutation(len(trained))]
    n_train = max(1, int(round(len(trained) * settings.TRAIN_FRACTION)))
    n_val = int(round(len(trained) * settings.VALIDATION_FRACTION))
    backgrounds = [backgrounds[i] for i in rng.permutation(len(backgrounds))]
    n_cal = int(round(len(backgrounds) * settings.CALIBRATION_FRACTION))

    order = {e.id: i for i, e in enumerate(manifest.entries)}
    split = DatasetSplit(
        train=sorted(trained[:n_train], key=order.get),
        val=sorted(trained[n_train:n_train + n_val], key=order.get),
        calibration=sorted(backgrounds[:n_cal], key=order.get),
        test=sorted(trained[n_train + n_val:] + other_damage + backgrounds[n_cal:], key=order.get),
    )
    logger.info(
        f"Split: {len(split.train)} train, {len(split.val)} val, "
        f"{len(split.calibration)} calibration, {len(split.test)} test"
    )
    return split


# =============================================================================
# SAMPLES
# =============================================================================

def recording_windows(recording: SensorRecording, settings: Optional[Settings] = None) -> List[EventWindow]:
    """Trigger windows of one recording, preprocessed to model rates."""
    settings = settings or get_settings()
    return [preprocess_window(w, settings) for w in detect_with_settings(recording, settings)]


def recording_samples(recording: SensorRecording, settings: Optional[Settings] = None) -> List[SampleTensor]:
    settings = settings or get_settings()
    return [window_to_sample(w, settings) for w in recording_windows(recording, settings)]


def load_samples(
    data_dir: Union[str, Path],
    ids: Optional[Iterable[str]] = None,
    settings: Optional[Settings] = None,
    manifest: Optional[DatasetManifest] = None,
    label: Optional[str] = None,
) -> List[SampleTensor]:
    """
    Spectrogram samples of the given recordings, in manifest order. Recordings are
    processed on MAX_WORKERS threads; `label` keeps only windows with that label.
    """
    settings = settings or get_settings()
    source = iter_containers(data_dir, manifest or read_dataset_manifest(data_dir), ids)

    def work(item) -> List[SampleTensor]:
        _, recording = item
        return recording_samples(recording, settings)

    samples: List[SampleTensor] = []
    for part in ordered_map(work, source, settings.MAX_WORKERS):
        samples.extend(part)
    if label is not None:
        samples = [s for s in samples if s.label == label]
    logger.debug(f"Loaded {len(samples)} samples from {data_dir}")
    return samples


# =============================================================================
# STREAM
# =============================================================================

class DetectionPipeline:
    """Scores every trigger window of incoming recordings and forwards damage decisions."""

    def __init__(
        self,
        graph: ModelGraph,
        loss_id: str,
        threshold: float,
        sink: Optional[Sink] = None,
        model_id: str = "model",
        orientation: str = "high_error_positive",
        decision_modality: Modality = "acc",
        settings: Optional[Settings] = None,
    ):
        self.settings = settings or get_settings()
        if decision_modality not in graph_modalities(graph):
            raise InvalidArgumentError(f"Model does not reconstruct the '{decision_modality}' modality")
        self.graph = graph
        self.loss_id = loss_id
        self.threshold = float(threshold)
        self.sink = sink
        self.model_id = model_id
        self.orientation = orientation
        self.decision_modality = decision_modality
        self.failed_log = FileSink(self.settings.FAILED_DELIVERY_LOG)
        self.graph.eval()

    def oriented(self, raw: float) -> float:
        return -raw if self.orientation == LOW_ERROR_POSITIVE else raw

    def process_recording(self, recording: SensorRecording) -> List[DetectionRecord]:
        """Decisions for every trigger window of one recording, in trigger order."""
        records = []
        for window in recording_windows(recording, self.settings):
            sample = window_to_sample(window, self.settings)
            start = time.perf_counter()
            _, losses = reconstruct(self.graph, sample, self.loss_id)
            elapsed_ms = (time.perf_counter() - start) * 1000.0
            raw = losses[self.decision_modality]
            decision = "damage" if self.oriented(raw) > self.threshold else "background"
            records.append(DetectionRecord(
                timestamp=window.timestamp,
                source_id=window.source_id,
                trigger_index=window.trigger_index,
                score_acc=losses.get("acc"),
                score_aud=losses.get("aud"),
                decision=decision,
                model_id=self.model_id,
                threshold=self.threshold,
                decision_modality=self.decision_modality,
                orientation=self.orientation,
                inference_ms=elapsed_ms,
            ))
        return records

    def deliver(self, record: DetectionRecord) -> DetectionRecord:
        """Send to the sink with one retry; on a second failure log locally with delivery_failed set."""
        if self.sink is None:
            return record
        try:
            for attempt in Retrying(
                stop=stop_after_attempt(2),
                retry=retry_if_exception_type(SinkError),
                before_sleep=before_sleep_log(logger, logging.WARNING),
                reraise=True,
            ):
                with attempt:
                    self.sink.send(record)
            return record
        except SinkError as e:
            logger.error(f"Delivery of {record.source_id}@{record.trigger_index} failed twice: {e}")
            failed = record.model_copy(update={"delivery_failed": True})
            self.failed_log.send(failed)
            return failed

    def run(self, source: Iterable[SensorRecording]) -> Iterator[DetectionRecord]:
        """
        Yield a DetectionRecord per trigger window. Recordings are scored on
        MAX_WORKERS threads; records come out in source order and sink writes
        happen on the caller's thread.
        """
        n_damage = 0
        for batch in ordered_map(self.process_recording, source, self.settings.MAX_WORKERS):
            for record in batch:
                if record.decision == "damage":
                    n_damage += 1
                    logger.info(f"Damage at {record.source_id}@{record.trigger_index} (t={record.timestamp:.3f}s)")
                    record = self.deliver(record)
                yield record
        logger.info(f"Stream finished: {n_damage} damage decision(s)")


def run_stream(
    source: Iterable[SensorRecording],
    graph: ModelGraph,
    loss_id: str,
    threshold: float,
    sink: Optional[Sink] = None,
    **options,
) -> Iterator[DetectionRecord]:
    """Functional entry point around DetectionPipeline; `options` are its keyword arguments."""
    return DetectionPipeline(graph, loss_id, threshold, sink, **options).run(source)


def stream_source(
    data_dir: Union[str, Path],
    ids: Optional[Sequence[str]] = None,
) -> Iterator[SensorRecording]:
    """Recordings of a dataset directory as a plain stream."""
    for _, recording in iter_containers(data_dir, ids=ids):
        yield recording


def count_decisions(records: Iterable[DetectionRecord]) -> Tuple[int, int]:
    """(damage, background) decision counts."""
    damage = background = 0
    for r in records:
        if r.decision == "damage":
            damage += 1
        else:
            background += 1
    return damage, background
