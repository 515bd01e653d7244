"""
Tests for the synthetic event and ride generator.
"""
import types

import numpy as np
import pytest

from sdd.dsp import FilterSpec, apply_filter, design_filter, detect_with_settings, trigger_statistic
from sdd.evaluation import auc
from sdd.exceptions import ImpossibleSpecError, InvalidArgumentError
from sdd.schemas import BACKGROUND_TAXONOMY, DAMAGE_CATEGORIES, DatasetSpec
from sdd.synthgen import (
    TEMPLATES,
    AccelModel,
    AudioModel,
    EventTemplate,
    build_manifest,
    gen_dataset,
    gen_event,
    gen_ride,
    iter_dataset,
    recording_seed,
    template_for,
)


def _frame_rms(x, frame):
    n = x.size // frame
    return np.sqrt(np.mean(x[: n * frame].reshape(n, frame) ** 2, axis=1))


def _band_rms(audio, rate, band=(2000.0, 3000.0)):
    cascade = design_filter(FilterSpec("bandpass", band[1], rate, 4, cutoff_lo=band[0]))
    return float(np.sqrt(np.mean(apply_filter(cascade, audio) ** 2)))


# =================
# Templates & events
# =================

def test_catalogue_covers_the_taxonomy():
    assert set(BACKGROUND_TAXONOMY) <= set(TEMPLATES)
    assert set(DAMAGE_CATEGORIES.values()) <= set(TEMPLATES)
    assert template_for("dent") is TEMPLATES["Dent"]
    assert template_for("Pothole").label == "background"
    with pytest.raises(InvalidArgumentError):
        template_for("meteor")


def test_template_longer_than_window_is_rejected():
    with pytest.raises(InvalidArgumentError):
        EventTemplate("Long", "background", "road", AccelModel("damped_sine", (5.0, 10.0)),
                      AudioModel("click", (0.1, 0.2)), amplitude_range=(1.0, 2.0), duration_range=(0.5, 1.5))


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_dent_is_a_sharp_transient(seed):
    recording = gen_event(template_for("dent"), seed)
    z = recording.accel[2].astype(np.float64)
    onset = int(0.5 * recording.accel_rate)
    tail = onset + int(0.1 * recording.accel_rate)

    assert np.max(np.abs(z)) / np.sqrt(np.mean(z ** 2)) >= 10.0
    assert np.sum(z[onset:tail] ** 2) >= 0.9 * np.sum(z ** 2)


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_scratch_sound_is_sustained(seed):
    recording = gen_event(template_for("scratch"), seed)
    frame = int(0.01 * recording.audio_rate)
    rms = _frame_rms(recording.audio.astype(np.float64), frame)
    loud = np.flatnonzero(rms >= 0.1 * rms.max())

    assert (loud[-1] - loud[0] + 1) * 0.01 >= 0.1


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_scratch_accel_keeps_a_low_ripple_after_the_knock(seed):
    recording = gen_event(template_for("scratch"), seed)
    z = recording.accel[2] - np.median(recording.accel[2])
    rate = recording.accel_rate
    onset = int(0.5 * rate)
    # knock has decayed by 100 ms; the shortest contact still has full ripple until 112 ms
    tail = z[onset + int(0.1 * rate): onset + int(0.11 * rate)]

    ratio = np.sqrt(np.mean(tail ** 2)) / np.max(z)
    assert 0.05 < ratio < 0.5


@pytest.mark.parametrize("kind", ["Door Close Trunk", "Roof Slap Front Left Outside", "Pothole", "Speed Bump"])
def test_confounders_are_quiet_in_the_click_band(kind):
    def mean_band_rms(template):
        rms = []
        for seed in range(8):
            recording = gen_event(template, seed)
            onset = int(0.5 * recording.audio_rate)
            rms.append(_band_rms(recording.audio[onset:onset + int(recording.audio_rate)], recording.audio_rate))
        return np.mean(rms)

    assert mean_band_rms(TEMPLATES[kind]) < 0.5 * mean_band_rms(template_for("dent"))


def test_event_peak_matches_amplitude_range():
    template = template_for("dent")
    for seed in range(5):
        recording = gen_event(template, seed, noise_floor=0.0)
        magnitude = np.sqrt(np.sum(recording.accel.astype(np.float64) ** 2, axis=0))
        assert template.amplitude_range[0] - 1e-3 <= magnitude.max() <= template.amplitude_range[1] + 1e-3


def test_gen_event_is_deterministic():
    a = gen_event(template_for("Door Close Trunk"), 5)
    b = gen_event(template_for("Door Close Trunk"), 5)
    c = gen_event(template_for("Door Close Trunk"), 6)

    assert np.array_equal(a.accel, b.accel) and np.array_equal(a.audio, b.audio)
    assert not np.array_equal(a.accel, c.accel)
    assert a.events == b.events


def test_event_label_follows_template():
    recording = gen_event(template_for("Speed Bump"), 0)

    assert len(recording.events) == 1
    event = recording.events[0]
    assert (event.label, event.category) == ("background", "Speed Bump")
    assert event.start_index == 1600
    assert event.stop_index > event.start_index


# =================
# Rides & datasets
# =================

def test_imbalance_sets_background_count():
    manifest = build_manifest(DatasetSpec(n_damage=10, imbalance=40))

    labels = [e.label for e in manifest.entries]
    assert labels.count("damage") == 10
    assert labels.count("background") == 400


def test_ratio_string_is_parsed():
    assert DatasetSpec(n_damage=2, imbalance="3:1").background_count() == 6


def test_conflicting_counts_are_impossible():
    with pytest.raises(ImpossibleSpecError):
        build_manifest(DatasetSpec(n_damage=10, n_background=100, imbalance=40))


def test_zero_weights_are_impossible():
    with pytest.raises(ImpossibleSpecError):
        build_manifest(DatasetSpec(n_damage=1, imbalance=2, background_types=["None"],
                                   category_weights={"None": 0.0}))


def test_category_weights_apportion_backgrounds():
    spec = DatasetSpec(n_damage=2, n_background=10, background_types=["Pothole", "Speed Bump"],
                       category_weights={"Pothole": 4.0, "Speed Bump": 1.0})
    categories = [e.category for e in build_manifest(spec).entries if e.label == "background"]

    assert categories.count("Pothole") == 8
    assert categories.count("Speed Bump") == 2


def test_manifest_structure_does_not_depend_on_seed():
    a = build_manifest(DatasetSpec(n_damage=3, imbalance=3, seed=1))
    b = build_manifest(DatasetSpec(n_damage=3, imbalance=3, seed=2))

    assert [(e.id, e.label, e.category) for e in a.entries] == [(e.id, e.label, e.category) for e in b.entries]
    assert [e.seed for e in a.entries] != [e.seed for e in b.entries]
    assert a.entries[4].seed == recording_seed(1, 4)


def test_iter_dataset_is_lazy(small_spec):
    stream = iter_dataset(small_spec)

    assert isinstance(stream, types.GeneratorType)
    entry, recording = next(stream)
    assert recording.source_id == entry.id
    assert recording.n_accel == int(small_spec.recording_seconds * small_spec.accel_rate)


def test_every_recording_triggers_once_with_matching_label(small_spec, settings):
    recordings, manifest = gen_dataset(small_spec)

    assert len(recordings) == 12
    for entry, recording in zip(manifest.entries, recordings):
        windows = detect_with_settings(recording, settings)
        assert len(windows) == 1, entry.id
        assert (windows[0].label, windows[0].category) == (entry.label, entry.category)


def test_ride_metadata_and_gyro():
    spec = DatasetSpec(n_damage=1, imbalance=1, include_gyro=True)
    recording = gen_ride(spec, "Dent", seed=3, source_id="ride")

    assert recording.gyro.shape == recording.accel.shape
    assert {"weather", "road", "vehicle", "state", "event", "label"} <= set(recording.metadata)
    assert recording.metadata["label"] == "damage"
    assert 1.5 * spec.accel_rate <= recording.events[0].start_index <= 2.0 * spec.accel_rate


@pytest.mark.slow
def test_peak_amplitude_alone_does_not_separate_classes():
    recordings, _ = gen_dataset(DatasetSpec(n_damage=20, imbalance=5, seed=3))
    peaks = [float(trigger_statistic(r.accel, r.accel_rate).max()) for r in recordings]
    labels = [r.events[0].label for r in recordings]

    assert 0.0 < auc(peaks, labels) < 1.0


@pytest.mark.slow
def test_click_band_energy_separates_dents_only_partly(settings):
    scores, labels = [], []
    for _, recording in iter_dataset(DatasetSpec(n_damage=50, imbalance=40, seed=7)):
        for window in detect_with_settings(recording, settings):
            scores.append(_band_rms(window.audio, window.audio_rate))
            labels.append(window.label)

    assert labels.count("damage") >= 45
    assert 0.7 <= auc(scores, labels) <= 0.95
