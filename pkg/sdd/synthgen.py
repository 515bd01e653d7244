"""
Deterministic synthetic rides with damage events and confounders.

All waveform parameters below are generator contracts chosen so the data is
learnable but not trivially separable; they make no claim about real vehicles.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Literal, Optional, Tuple

import numpy as np
from scipy.signal import windows

from sdd.dsp import FilterSpec, SensorRecording, apply_filter, design_filter
from sdd.exceptions import ImpossibleSpecError, InvalidArgumentError
from sdd.schemas import (
    BACKGROUND_TAXONOMY,
    DAMAGE_CATEGORIES,
    DatasetManifest,
    DatasetSpec,
    EventLabel,
    Label,
    ManifestEntry,
)

logger = logging.getLogger(__name__)

GRAVITY = 9.81
MAX_EVENT_SECONDS = 1.0
# Upper RMS of broadband tyre and wind noise in the cabin audio; per-ride power is uniform below it.
TYRE_NOISE_RMS = 0.024

# Metadata vocabularies of the recording campaign; sampled only to exercise the container.
WEATHER = ("sunny", "cloudy", "rainy")
ROAD_TYPES = ("asphalt", "stone road", "gravel", "mud", "dirt", "snow")
VEHICLES = (
    "Audi A5", "BMW i3", "BMW X1", "BMW 5 series", "Mercedes A45", "Mercedes GLA",
    "Mini", "Smart", "Volkswagen Polo", "Volkswagen Tiguan",
)
VEHICLE_STATES = ("stationary", "moving")

Range = Tuple[float, float]


@dataclass(frozen=True)
class AccelModel:
    shape: Literal["damped_sine", "double_bump", "knock_ripple"]
    freq_hz: Range
    tau_s: Range = (0.02, 0.05)
    gap_s: Range = (0.3, 0.6)  # double_bump: axle spacing in time
    ripple_hz: Range = (150.0, 200.0)  # knock_ripple
    ripple_fraction: Range = (0.15, 0.3)  # knock_ripple: ripple amplitude / knock amplitude


@dataclass(frozen=True)
class AudioModel:
    shape: Literal["click", "am_noise", "thump", "bang"]
    amplitude: Range
    tau_s: Range = (0.005, 0.015)
    band_hz: Range = (1500.0, 4500.0)  # am_noise band, or thump frequency range
    broadband: float = 0.0  # thump: level of the broadband contact click relative to the thump


@dataclass(frozen=True)
class EventTemplate:
    kind: str
    label: Label
    family: str
    accel_model: AccelModel
    audio_model: AudioModel
    amplitude_range: Range  # peak acceleration (m/s^2)
    duration_range: Range = (0.0, 0.0)  # sustained contact (s); knock_ripple / am_noise

    def __post_init__(self):
        for name, (lo, hi) in (("amplitude_range", self.amplitude_range), ("duration_range", self.duration_range)):
            if lo < 0 or hi < lo:
                raise InvalidArgumentError(f"{self.kind}: invalid {name} ({lo}, {hi})")
        longest = max(
            self.duration_range[1],
            5 * self.accel_model.tau_s[1],
            5 * self.audio_model.tau_s[1],
            self.accel_model.gap_s[1] if self.accel_model.shape == "double_bump" else 0.0,
        )
        if longest > MAX_EVENT_SECONDS:
            raise InvalidArgumentError(f"{self.kind}: event lasts up to {longest:.2f}s, beyond the 1 s window")


def _thump(amplitude: Range, freq: Range, broadband: float = 0.03) -> AudioModel:
    return AudioModel("thump", amplitude, tau_s=(0.02, 0.06), band_hz=freq, broadband=broadband)


def _bang(amplitude: Range, tau: Range = (0.005, 0.02)) -> AudioModel:
    return AudioModel("bang", amplitude, tau_s=tau)


def _catalogue() -> Dict[str, EventTemplate]:
    templates = [
        # damage: sharp transient peak with rapid decay / prolonged irregular contact / heavy underbody strike
        EventTemplate("Dent", "damage", "damage",
                      AccelModel("damped_sine", (90.0, 140.0), tau_s=(0.01, 0.04)),
                      AudioModel("click", (0.15, 0.6), tau_s=(0.004, 0.015)),
                      amplitude_range=(4.0, 10.0)),
        EventTemplate("Scratch", "damage", "damage",
                      AccelModel("knock_ripple", (60.0, 90.0), tau_s=(0.008, 0.02)),
                      AudioModel("am_noise", (0.1, 0.4), band_hz=(1500.0, 4500.0)),
                      amplitude_range=(3.5, 6.0), duration_range=(0.15, 0.4)),
        EventTemplate("Underbody", "damage", "damage",
                      AccelModel("damped_sine", (25.0, 45.0), tau_s=(0.04, 0.08)),
                      AudioModel("am_noise", (0.1, 0.4), band_hz=(300.0, 1500.0)),
                      amplitude_range=(5.0, 10.0), duration_range=(0.3, 0.6)),
        # road
        EventTemplate("None", "background", "road",
                      AccelModel("damped_sine", (5.0, 12.0), tau_s=(0.05, 0.1)),
                      _thump((0.02, 0.08), (60.0, 200.0)), amplitude_range=(3.5, 5.5)),
        EventTemplate("Pothole", "background", "road",
                      AccelModel("damped_sine", (12.0, 25.0), tau_s=(0.06, 0.12)),
                      _thump((0.1, 0.4), (60.0, 150.0)), amplitude_range=(4.0, 9.0)),
        EventTemplate("Speed Bump", "background", "road",
                      AccelModel("double_bump", (4.0, 7.0), gap_s=(0.3, 0.6)),
                      _thump((0.05, 0.2), (50.0, 120.0)), amplitude_range=(3.5, 7.0)),
        EventTemplate("General Bump", "background", "road",
                      AccelModel("damped_sine", (8.0, 15.0), tau_s=(0.05, 0.1)),
                      _thump((0.05, 0.2), (60.0, 200.0)), amplitude_range=(3.5, 7.0)),
        EventTemplate("Curb Climb", "background", "road",
                      AccelModel("damped_sine", (15.0, 30.0), tau_s=(0.04, 0.08)),
                      _thump((0.1, 0.3), (80.0, 250.0)), amplitude_range=(4.0, 8.0)),
        EventTemplate("ABT-Bottom-Out", "background", "road",
                      AccelModel("damped_sine", (30.0, 50.0), tau_s=(0.03, 0.06)),
                      _thump((0.2, 0.5), (100.0, 300.0), broadband=0.1), amplitude_range=(6.0, 12.0)),
        # body: loud but low-frequency, little energy in the 2-3 kHz band
        EventTemplate("Roof Slap Front Left Outside", "background", "body",
                      AccelModel("damped_sine", (20.0, 40.0), tau_s=(0.02, 0.05)),
                      _thump((0.15, 0.6), (120.0, 300.0), broadband=0.1), amplitude_range=(3.5, 7.0)),
        EventTemplate("Door Close Trunk", "background", "body",
                      AccelModel("damped_sine", (15.0, 35.0), tau_s=(0.03, 0.06)),
                      _thump((0.15, 0.6), (60.0, 180.0), broadband=0.1), amplitude_range=(4.0, 8.0)),
    ]
    for name in BACKGROUND_TAXONOMY:
        if name.startswith("Vehicle hits"):
            templates.append(EventTemplate(name, "background", "vehicle",
                                           AccelModel("damped_sine", (40.0, 70.0), tau_s=(0.02, 0.05)),
                                           _bang((0.05, 0.3), tau=(0.01, 0.03)), amplitude_range=(4.0, 9.0)))
        elif name.startswith("Object Impact"):
            templates.append(EventTemplate(name, "background", "object",
                                           AccelModel("damped_sine", (50.0, 80.0), tau_s=(0.015, 0.04)),
                                           _bang((0.05, 0.4)), amplitude_range=(3.5, 7.0)))
    return {t.kind: t for t in templates}


TEMPLATES: Dict[str, EventTemplate] = _catalogue()


def template_for(name: str) -> EventTemplate:
    """Template by event category, or by damage type ("dent", "scratch", "underbody")."""
    kind = DAMAGE_CATEGORIES.get(name, name)
    if kind not in TEMPLATES:
        raise InvalidArgumentError(f"No event template for '{name}'")
    return TEMPLATES[kind]


# =============================================================================
# WAVEFORMS
# =============================================================================

def _uniform(rng: np.random.Generator, r: Range) -> float:
    return float(rng.uniform(r[0], r[1])) if r[1] > r[0] else float(r[0])


def _damped_sine(t: np.ndarray, amp: float, freq: float, tau: float) -> np.ndarray:
    active = t >= 0
    tt = np.where(active, t, 0.0)
    return np.where(active, amp * np.exp(-tt / tau) * np.sin(2 * np.pi * freq * tt), 0.0)


def _half_sine(t: np.ndarray, amp: float, width: float) -> np.ndarray:
    inside = (t >= 0) & (t <= width)
    return np.where(inside, amp * np.sin(np.pi * np.clip(t, 0, width) / width), 0.0)


def _tukey_envelope(t: np.ndarray, duration: float, rate: float) -> np.ndarray:
    env = np.zeros_like(t)
    start = int(np.argmax(t >= 0)) if np.any(t >= 0) else t.size
    n = max(2, int(round(duration * rate)))
    stop = min(t.size, start + n)
    env[start:stop] = windows.tukey(n, alpha=0.5)[:stop - start]
    return env


def _band_noise(rng: np.random.Generator, n: int, rate: float, band: Range) -> np.ndarray:
    noise = rng.standard_normal(n)
    hi = min(band[1], 0.45 * rate)
    shaped = apply_filter(design_filter(FilterSpec("bandpass", hi, rate, 4, cutoff_lo=band[0])), noise)
    return shaped / max(float(np.sqrt(np.mean(shaped ** 2))), 1e-12)


def _direction(rng: np.random.Generator) -> np.ndarray:
    # z-heavy so an impact raises |a| above gravity
    d = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 1.0])
    return d / np.linalg.norm(d)


def _render_accel(model: AccelModel, amp: float, duration: float, rng: np.random.Generator,
                  t: np.ndarray) -> Tuple[np.ndarray, float]:
    """1-D acceleration waveform over relative time t (0 = onset) and its length in seconds."""
    freq = _uniform(rng, model.freq_hz)
    if model.shape == "damped_sine":
        tau = _uniform(rng, model.tau_s)
        return _damped_sine(t, amp, freq, tau), min(5 * tau, MAX_EVENT_SECONDS)
    if model.shape == "double_bump":
        width = 1.0 / (2.0 * freq)
        gap = _uniform(rng, model.gap_s)
        rear = _uniform(rng, (0.7, 0.95))
        wave = _half_sine(t, amp, width) + _half_sine(t - gap, rear * amp, width)
        return wave, min(gap + width, MAX_EVENT_SECONDS)
    if model.shape == "knock_ripple":
        tau = _uniform(rng, model.tau_s)
        ripple_amp = amp * _uniform(rng, model.ripple_fraction)
        ripple_freq = _uniform(rng, model.ripple_hz)
        rate = 1.0 / (t[1] - t[0])
        ripple = ripple_amp * _tukey_envelope(t, duration, rate) * np.sin(2 * np.pi * ripple_freq * t)
        return _damped_sine(t, amp, freq, tau) + ripple, min(max(5 * tau, duration), MAX_EVENT_SECONDS)
    raise InvalidArgumentError(f"Unknown accel shape '{model.shape}'")


def _render_audio(model: AudioModel, duration: float, rng: np.random.Generator, t: np.ndarray,
                  rate: float) -> Tuple[np.ndarray, float]:
    amp = _uniform(rng, model.amplitude)
    tau = _uniform(rng, model.tau_s)
    active = t >= 0
    decay = np.where(active, np.exp(-np.where(active, t, 0.0) / tau), 0.0)
    if model.shape == "click":
        return amp * decay * rng.standard_normal(t.size), 5 * tau
    if model.shape == "bang":
        low = _damped_sine(t, 0.5 * amp, _uniform(rng, (80.0, 200.0)), 3 * tau)
        return amp * decay * rng.standard_normal(t.size) + low, 15 * tau
    if model.shape == "thump":
        freq = _uniform(rng, model.band_hz)
        wave = _damped_sine(t, amp, freq, tau)
        if model.broadband > 0:
            click_decay = np.where(active, np.exp(-np.where(active, t, 0.0) / 0.005), 0.0)
            wave = wave + model.broadband * amp * click_decay * rng.standard_normal(t.size)
        return wave, 5 * tau
    if model.shape == "am_noise":
        mod_freq = _uniform(rng, (20.0, 60.0))
        envelope = _tukey_envelope(t, duration, rate) * (1.0 + 0.5 * np.sin(2 * np.pi * mod_freq * t))
        return amp * envelope * _band_noise(rng, t.size, rate, model.band_hz), duration
    raise InvalidArgumentError(f"Unknown audio shape '{model.shape}'")


def _render_event(template: EventTemplate, rng: np.random.Generator, accel: np.ndarray, audio: np.ndarray,
                  accel_rate: float, audio_rate: float, onset: float) -> EventLabel:
    """Add one event to the given streams in place and return its label."""
    amp = _uniform(rng, template.amplitude_range)
    duration = _uniform(rng, template.duration_range)
    direction = _direction(rng)
    t_acc = np.arange(accel.shape[1]) / accel_rate - onset
    t_aud = np.arange(audio.size) / audio_rate - onset

    wave, accel_len = _render_accel(template.accel_model, amp, duration, rng, t_acc)
    peak = float(wave.max())
    if peak > 0:
        wave = wave * (amp / peak)  # amplitude_range is the exact positive peak
    accel += direction[:, None] * wave[None, :]
    sound, audio_len = _render_audio(template.audio_model, duration, rng, t_aud, audio_rate)
    audio += sound

    start = int(round(onset * accel_rate))
    length = max(1, int(round(min(max(accel_len, audio_len), MAX_EVENT_SECONDS) * accel_rate)))
    return EventLabel(label=template.label, category=template.kind, start_index=start,
                      stop_index=min(start + length, accel.shape[1]))


def gen_event(
    template: EventTemplate,
    seed: int,
    accel_rate: float = 3200.0,
    audio_rate: float = 16000.0,
    noise_floor: float = 0.005,
    segment_seconds: float = 2.0,
    onset_seconds: float = 0.5,
) -> SensorRecording:
    """One event on a silent segment plus Gaussian sensor noise at `noise_floor` on every channel."""
    rng = np.random.default_rng(seed)
    accel = np.zeros((3, int(round(segment_seconds * accel_rate))))
    audio = np.zeros(int(round(segment_seconds * audio_rate)))
    label = _render_event(template, rng, accel, audio, accel_rate, audio_rate, onset_seconds)
    accel += noise_floor * rng.standard_normal(accel.shape)
    audio += noise_floor * rng.standard_normal(audio.shape)
    return SensorRecording(
        accel=accel, audio=np.clip(audio, -1.0, 1.0), accel_rate=accel_rate, audio_rate=audio_rate,
        metadata={"event": template.kind, "label": template.label}, events=[label],
        source_id=f"{template.kind}-{seed}",
    )


# =============================================================================
# RIDES & DATASETS
# =============================================================================

def _ambient(rng: np.random.Generator, spec: DatasetSpec, n_accel: int, n_audio: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gravity on Z, low-frequency road rumble, cabin hum and broadband tyre noise."""
    rumble_rms = _uniform(rng, (0.05, 0.25))
    rumble = np.stack([_band_noise(rng, n_accel, spec.accel_rate, (2.0, 40.0)) for _ in range(3)]) * rumble_rms
    accel = rumble
    accel[2] += GRAVITY

    t = np.arange(n_audio) / spec.audio_rate
    engine_hz = _uniform(rng, (30.0, 120.0))
    hum_amp = _uniform(rng, (0.01, 0.05))
    audio = sum(hum_amp / k * np.sin(2 * np.pi * k * engine_hz * t + rng.uniform(0, 2 * np.pi)) for k in (1, 2, 3))
    tyre_rms = TYRE_NOISE_RMS * np.sqrt(rng.uniform())
    audio = audio + tyre_rms * _band_noise(rng, n_audio, spec.audio_rate, (500.0, 6000.0))
    return accel, np.asarray(audio)


def _apportion(total: int, names: List[str], weights: Dict[str, float]) -> List[str]:
    """Largest-remainder split of `total` over names, interleaved evenly."""
    if total == 0:
        return []
    if not names:
        raise ImpossibleSpecError("No event types to draw from")
    w = np.array([weights.get(n, 1.0) for n in names], dtype=np.float64)
    if w.sum() <= 0:
        raise ImpossibleSpecError("Category weights sum to zero")
    exact = total * w / w.sum()
    counts = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - counts), kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    slots = [((j + 0.5) / c, i, n) for i, (n, c) in enumerate(zip(names, counts)) for j in range(c)]
    return [n for _, _, n in sorted(slots)]


def _plan(spec: DatasetSpec) -> List[Tuple[str, Label, str]]:
    """(id, label, category) for every recording, independent of the seed."""
    weights = {DAMAGE_CATEGORIES.get(k, k): v for k, v in spec.category_weights.items()}
    damage = _apportion(spec.n_damage, [DAMAGE_CATEGORIES[t] for t in spec.damage_types], weights)
    background = _apportion(spec.background_count(), list(spec.background_types), weights)
    plan: List[Tuple[Label, str]] = [("damage", c) for c in damage] + [("background", c) for c in background]
    return [(f"rec_{i:05d}", label, category) for i, (label, category) in enumerate(plan)]


def recording_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1)[0])


def gen_ride(spec: DatasetSpec, category: str, seed: int, source_id: str) -> SensorRecording:
    """One ride: ambient background with a single labeled event between 1.5 s and 2.0 s."""
    rng = np.random.default_rng(seed)
    n_accel = int(round(spec.recording_seconds * spec.accel_rate))
    n_audio = int(round(spec.recording_seconds * spec.audio_rate))
    accel, audio = _ambient(rng, spec, n_accel, n_audio)

    onset = _uniform(rng, (1.5, 2.0)) if spec.recording_seconds >= 3.0 else spec.recording_seconds / 3.0
    event = _render_event(TEMPLATES[category], rng, accel, audio, spec.accel_rate, spec.audio_rate, onset)
    accel += spec.noise_floor * rng.standard_normal(accel.shape)
    audio += spec.noise_floor * rng.standard_normal(audio.shape)

    metadata = {
        "weather": str(rng.choice(WEATHER)),
        "road": str(rng.choice(ROAD_TYPES)),
        "vehicle": str(rng.choice(VEHICLES)),
        "state": str(rng.choice(VEHICLE_STATES)),
        "event": category,
        "label": event.label,
    }
    gyro = None
    if spec.include_gyro:
        gyro = 0.02 * rng.standard_normal((3, n_accel)) + 0.05 * accel / GRAVITY
    return SensorRecording(
        accel=accel, audio=np.clip(audio, -1.0, 1.0), accel_rate=spec.accel_rate, audio_rate=spec.audio_rate,
        metadata=metadata, events=[event], source_id=source_id, gyro=gyro,
    )


def build_manifest(spec: DatasetSpec) -> DatasetManifest:
    entries = [
        ManifestEntry(id=rid, label=label, category=category, seed=recording_seed(spec.seed, i), path=rid)
        for i, (rid, label, category) in enumerate(_plan(spec))
    ]
    return DatasetManifest(spec=spec, entries=entries)


def iter_dataset(spec: DatasetSpec, manifest: Optional[DatasetManifest] = None) -> Iterator[Tuple[ManifestEntry, SensorRecording]]:
    """Lazily yield (manifest entry, recording) pairs."""
    manifest = manifest or build_manifest(spec)
    for entry in manifest.entries:
        yield entry, gen_ride(spec, entry.category, entry.seed, entry.id)


def gen_dataset(spec: DatasetSpec) -> Tuple[List[SensorRecording], DatasetManifest]:
    """Every recording holds one labeled event over `recording_seconds` of ambient background."""
    manifest = build_manifest(spec)
    recordings = [recording for _, recording in iter_dataset(spec, manifest)]
    n_damage = sum(1 for e in manifest.entries if e.label == "damage")
    logger.info(f"Generated {len(recordings)} recordings ({n_damage} damage, "
                f"{len(recordings) - n_damage} background), seed {spec.seed}")
    return recordings, manifest
