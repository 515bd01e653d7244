"""
Tests for event container and dataset directory storage.
"""
import json

import numpy as np
import pytest

from sdd.container import (
    DATASET_INDEX,
    MANIFEST_NAME,
    entries_by_id,
    iter_containers,
    read_container,
    read_dataset_manifest,
    write_container,
)
from sdd.dsp import SensorRecording
from sdd.exceptions import (
    ContainerError,
    ContainerVersionError,
    LengthMismatchError,
    MissingBlobError,
    TruncatedBlobError,
)
from sdd.schemas import EventLabel


@pytest.fixture
def recording():
    rng = np.random.default_rng(0)
    return SensorRecording(
        accel=rng.standard_normal((3, 100)),
        audio=rng.uniform(-1, 1, 500),
        accel_rate=3200.0,
        audio_rate=16000.0,
        start_time=12.5,
        metadata={"road": "gravel", "vehicle": "Mini"},
        events=[EventLabel(label="damage", category="Dent", start_index=10, stop_index=40)],
        source_id="ride-1",
        gyro=rng.standard_normal((3, 100)),
    )


def _edit_manifest(directory, **changes):
    path = directory / MANIFEST_NAME
    manifest = json.loads(path.read_text())
    manifest.update(changes)
    path.write_text(json.dumps(manifest))


# =================
# Containers
# =================

def test_round_trip_is_bit_exact(tmp_path, recording):
    restored = read_container(write_container(recording, tmp_path / "ride"))

    assert np.array_equal(restored.accel, recording.accel)
    assert np.array_equal(restored.audio, recording.audio)
    assert np.array_equal(restored.gyro, recording.gyro)
    assert restored.accel.dtype == np.float32
    assert (restored.accel_rate, restored.audio_rate, restored.start_time) == (3200.0, 16000.0, 12.5)
    assert restored.metadata == recording.metadata
    assert restored.events == recording.events
    assert restored.source_id == "ride-1"


def test_manifest_layout(tmp_path, recording):
    directory = write_container(recording, tmp_path / "ride")
    manifest = json.loads((directory / MANIFEST_NAME).read_text())

    assert manifest["format_version"] == 1
    assert manifest["channels"]["accel"]["shape"] == [3, 100]
    assert manifest["channels"]["audio"]["shape"] == [1, 500]
    assert manifest["channels"]["accel"]["dtype"] == "<f4"
    assert (directory / "accel.bin").stat().st_size == 3 * 100 * 4


def test_recording_without_gyro(tmp_path):
    plain = SensorRecording(accel=np.zeros((3, 8)), audio=np.zeros(40), accel_rate=3200.0, audio_rate=16000.0)
    restored = read_container(write_container(plain, tmp_path / "plain"))

    assert restored.gyro is None
    assert restored.events == []


def test_short_blob_is_a_length_mismatch(tmp_path, recording):
    directory = write_container(recording, tmp_path / "ride")
    (directory / "accel.bin").write_bytes(np.zeros((3, 50), dtype="<f4").tobytes())

    with pytest.raises(LengthMismatchError):
        read_container(directory)


def test_partial_sample_is_truncation(tmp_path, recording):
    directory = write_container(recording, tmp_path / "ride")
    blob = directory / "accel.bin"
    blob.write_bytes(blob.read_bytes()[:-2])

    with pytest.raises(TruncatedBlobError):
        read_container(directory)


def test_unsupported_version(tmp_path, recording):
    directory = write_container(recording, tmp_path / "ride")
    _edit_manifest(directory, format_version=2)

    with pytest.raises(ContainerVersionError):
        read_container(directory)


def test_missing_blob(tmp_path, recording):
    directory = write_container(recording, tmp_path / "ride")
    (directory / "audio.bin").unlink()

    with pytest.raises(MissingBlobError):
        read_container(directory)


def test_missing_manifest(tmp_path):
    (tmp_path / "empty").mkdir()

    with pytest.raises(MissingBlobError):
        read_container(tmp_path / "empty")


def test_invalid_manifest_json(tmp_path, recording):
    directory = write_container(recording, tmp_path / "ride")
    (directory / MANIFEST_NAME).write_text("{not json")

    with pytest.raises(ContainerError):
        read_container(directory)


# =================
# Dataset directories
# =================

def test_dataset_index(dataset_dir, small_spec):
    manifest = read_dataset_manifest(dataset_dir)

    assert manifest.spec == small_spec
    assert len(manifest.entries) == 12
    assert (dataset_dir / DATASET_INDEX).exists()


def test_iter_containers_filters_ids(dataset_dir):
    manifest = read_dataset_manifest(dataset_dir)
    wanted = [manifest.entries[0].id, manifest.entries[-1].id]

    pairs = list(iter_containers(dataset_dir, manifest, ids=wanted))
    assert [entry.id for entry, _ in pairs] == wanted
    assert all(recording.source_id == entry.id for entry, recording in pairs)
    assert set(entries_by_id(manifest)) == {e.id for e in manifest.entries}


def test_missing_dataset_index(tmp_path):
    with pytest.raises(MissingBlobError):
        read_dataset_manifest(tmp_path)
