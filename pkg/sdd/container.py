"""
Event container storage: one directory per recording holding manifest.json and
one little-endian float32 blob per sensor (row-major, channels x samples), plus
a dataset.json index next to the recording directories.
"""
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, Iterator, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from sdd.dsp import SensorRecording
from sdd.exceptions import (
    ContainerError,
    ContainerVersionError,
    LengthMismatchError,
    MissingBlobError,
    TruncatedBlobError,
)
from sdd.schemas import (
    CONTAINER_FORMAT_VERSION,
    ChannelInfo,
    ContainerManifest,
    DatasetManifest,
    ManifestEntry,
    canonical_json,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
DATASET_INDEX = "dataset.json"
BLOB_DTYPE = np.dtype("<f4")

_SENSORS = {
    "accel": ("accelerometer", ["x", "y", "z"], "m/s^2"),
    "audio": ("microphone", ["mono"], "full-scale"),
    "gyro": ("gyroscope", ["x", "y", "z"], "rad/s"),
}

PathLike = Union[str, Path]


def _write_blob(directory: Path, name: str, values: np.ndarray, rate: float) -> ChannelInfo:
    data = np.atleast_2d(np.asarray(values, dtype=BLOB_DTYPE))
    blob = f"{name}.bin"
    (directory / blob).write_bytes(np.ascontiguousarray(data).tobytes(order="C"))
    sensor, axes, unit = _SENSORS[name]
    return ChannelInfo(sensor=sensor, rate=rate, axes=axes, unit=unit, blob=blob, shape=data.shape)


def write_container(recording: SensorRecording, path: PathLike) -> Path:
    """Write one recording; existing blobs in the directory are overwritten."""
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    channels = {
        "accel": _write_blob(directory, "accel", recording.accel, recording.accel_rate),
        "audio": _write_blob(directory, "audio", recording.audio, recording.audio_rate),
    }
    if recording.gyro is not None:
        channels["gyro"] = _write_blob(directory, "gyro", recording.gyro, recording.accel_rate)
    manifest = ContainerManifest(
        format_version=CONTAINER_FORMAT_VERSION,
        source_id=recording.source_id,
        start_time=recording.start_time,
        channels=channels,
        metadata=recording.metadata,
        events=recording.events,
    )
    (directory / MANIFEST_NAME).write_text(canonical_json(manifest.model_dump(), indent=2) + "\n", encoding="utf-8")
    return directory


def _read_manifest(directory: Path) -> ContainerManifest:
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise MissingBlobError(f"No {MANIFEST_NAME} in {directory}")
    try:
        raw = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ContainerError(f"{manifest_path} is not valid JSON: {e}") from e
    # checked before anything else is parsed or read
    version = raw.get("format_version") if isinstance(raw, dict) else None
    if version != CONTAINER_FORMAT_VERSION:
        raise ContainerVersionError(
            f"{manifest_path}: format_version {version!r} is not supported (expected {CONTAINER_FORMAT_VERSION})"
        )
    try:
        return ContainerManifest.model_validate(raw)
    except ValidationError as e:
        raise ContainerError(f"{manifest_path} violates the container schema: {e.errors()[0]['msg']}") from e


def _read_blob(directory: Path, name: str, info: ChannelInfo) -> np.ndarray:
    blob_path = directory / info.blob
    if not blob_path.exists():
        raise MissingBlobError(f"Channel '{name}' blob {blob_path} does not exist")
    channels, samples = info.shape
    size = blob_path.stat().st_size
    frame = BLOB_DTYPE.itemsize * channels
    if size % frame:
        raise TruncatedBlobError(
            f"Channel '{name}' blob {blob_path} holds {size} bytes, not a whole number of {frame}-byte samples"
        )
    if size // frame != samples:
        raise LengthMismatchError(
            f"Channel '{name}': manifest declares {samples} samples but {blob_path} holds {size // frame}"
        )
    return np.fromfile(blob_path, dtype=BLOB_DTYPE).reshape(channels, samples)


def read_container(path: PathLike) -> SensorRecording:
    """Read one recording. Every blob is validated before any is loaded."""
    directory = Path(path)
    manifest = _read_manifest(directory)
    for required in ("accel", "audio"):
        if required not in manifest.channels:
            raise MissingBlobError(f"{directory}: manifest has no '{required}' channel")
    data = {name: _read_blob(directory, name, info) for name, info in sorted(manifest.channels.items())}
    return SensorRecording(
        accel=data["accel"],
        audio=data["audio"].reshape(-1),
        accel_rate=manifest.channels["accel"].rate,
        audio_rate=manifest.channels["audio"].rate,
        start_time=manifest.start_time,
        metadata=manifest.metadata,
        events=manifest.events,
        source_id=manifest.source_id,
        gyro=data.get("gyro"),
    )


# =============================================================================
# DATASET DIRECTORIES
# =============================================================================

def write_dataset(
    out_dir: PathLike,
    manifest: DatasetManifest,
    recordings: Iterable[Tuple[ManifestEntry, SensorRecording]],
) -> Path:
    """Write every recording under out_dir/<entry.path> and the dataset.json index."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    written = 0
    for entry, recording in recordings:
        write_container(recording, root / entry.path)
        written += 1
        if written % 100 == 0:
            logger.info(f"Wrote {written}/{len(manifest.entries)} recordings")
    (root / DATASET_INDEX).write_text(canonical_json(manifest.model_dump(), indent=2) + "\n", encoding="utf-8")
    logger.info(f"Dataset with {written} recordings written to {root}")
    return root


def read_dataset_manifest(data_dir: PathLike) -> DatasetManifest:
    index = Path(data_dir) / DATASET_INDEX
    if not index.exists():
        raise MissingBlobError(f"No {DATASET_INDEX} in {data_dir}")
    try:
        raw = json.loads(index.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ContainerError(f"{index} is not valid JSON: {e}") from e
    if not isinstance(raw, dict) or raw.get("format_version") != CONTAINER_FORMAT_VERSION:
        raise ContainerVersionError(f"{index}: unsupported format_version")
    try:
        return DatasetManifest.model_validate(raw)
    except ValidationError as e:
        raise ContainerError(f"{index} violates the dataset schema: {e.errors()[0]['msg']}") from e


def iter_containers(
    data_dir: PathLike,
    manifest: Optional[DatasetManifest] = None,
    ids: Optional[Iterable[str]] = None,
) -> Iterator[Tuple[ManifestEntry, SensorRecording]]:
    """Lazily read the recordings of a dataset directory, optionally restricted to `ids`."""
    root = Path(data_dir)
    manifest = manifest or read_dataset_manifest(root)
    wanted = set(ids) if ids is not None else None
    for entry in manifest.entries:
        if wanted is None or entry.id in wanted:
            yield entry, read_container(root / entry.path)


def entries_by_id(manifest: DatasetManifest) -> Dict[str, ManifestEntry]:
    return {e.id: e for e in manifest.entries}
