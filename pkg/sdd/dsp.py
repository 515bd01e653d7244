"""
Resampling, IIR filtering and threshold-triggered event windowing of raw sensor streams.

Filters are causal (zero initial state, direct-form-II-transposed biquads); no
zero-phase filtering is applied so the same code runs on a live stream.
"""
import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage, signal

from sdd.config import Settings, get_settings
from sdd.exceptions import InvalidArgumentError
from sdd.schemas import EventLabel, Label

logger = logging.getLogger(__name__)

KAISER_BETA = 8.6
TAPS_PER_PHASE = 64


@dataclass(frozen=True)
class SensorRecording:
    """Synchronized 3-axis acceleration (m/s^2) and mono audio ([-1, 1]) streams."""
    accel: np.ndarray  # (3, N)
    audio: np.ndarray  # (M,)
    accel_rate: float
    audio_rate: float
    start_time: float = 0.0
    metadata: Dict[str, str] = field(default_factory=dict)
    events: List[EventLabel] = field(default_factory=list)
    source_id: str = "recording"
    gyro: Optional[np.ndarray] = None  # (3, N) rad/s at accel_rate

    def __post_init__(self):
        accel = np.ascontiguousarray(self.accel, dtype=np.float32)
        audio = np.ascontiguousarray(self.audio, dtype=np.float32).reshape(-1)
        if accel.ndim != 2 or accel.shape[0] != 3:
            raise InvalidArgumentError(f"accel must have shape (3, N), got {accel.shape}")
        if self.accel_rate <= 0 or self.audio_rate <= 0:
            raise InvalidArgumentError("accel_rate and audio_rate must be positive")
        n = accel.shape[1]
        for event in self.events:
            if event.stop_index > n:
                raise InvalidArgumentError(
                    f"Event '{event.category}' [{event.start_index}, {event.stop_index}) "
                    f"exceeds the {n}-sample stream"
                )
        object.__setattr__(self, "accel", accel)
        object.__setattr__(self, "audio", audio)
        object.__setattr__(self, "metadata", {str(k): str(v) for k, v in self.metadata.items()})
        if self.gyro is not None:
            gyro = np.ascontiguousarray(self.gyro, dtype=np.float32)
            if gyro.shape != accel.shape:
                raise InvalidArgumentError(f"gyro must match accel shape {accel.shape}, got {gyro.shape}")
            object.__setattr__(self, "gyro", gyro)

    @property
    def n_accel(self) -> int:
        return self.accel.shape[1]

    @property
    def duration(self) -> float:
        return self.n_accel / self.accel_rate


@dataclass(frozen=True)
class FilterSpec:
    kind: Literal["lowpass", "bandpass"]
    cutoff_hi: float
    sample_rate: float
    order: int = 4
    cutoff_lo: Optional[float] = None  # bandpass only


@dataclass(frozen=True)
class BiquadCascade:
    """Second-order sections, one row [b0, b1, b2, a0, a1, a2] per biquad."""
    sos: np.ndarray
    sample_rate: float

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots(section[3:]) for section in self.sos])

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))

    def frequency_response(self, freqs: Sequence[float]) -> np.ndarray:
        """Complex response H(f) at the given frequencies (Hz)."""
        _, h = signal.sosfreqz(self.sos, worN=np.asarray(freqs, dtype=np.float64), fs=self.sample_rate)
        return h

    def magnitude_db(self, freqs: Sequence[float]) -> np.ndarray:
        return 20.0 * np.log10(np.maximum(np.abs(self.frequency_response(freqs)), 1e-300))


@dataclass(frozen=True)
class EventWindow:
    """A trigger-aligned slice of both modalities."""
    accel: np.ndarray  # (3, W)
    audio: np.ndarray  # (V,)
    trigger_index: int
    label: Label
    category: str
    source_id: str
    accel_rate: float
    audio_rate: float
    start_time: float = 0.0
    full_recording: bool = False  # window was longer than the recording

    @property
    def timestamp(self) -> float:
        return self.start_time + self.trigger_index / self.accel_rate


# =============================================================================
# RESAMPLING
# =============================================================================

def _rate_ratio(from_rate: float, to_rate: float) -> Tuple[int, int]:
    ratio = Fraction(to_rate).limit_denominator(1_000_000) / Fraction(from_rate).limit_denominator(1_000_000)
    ratio = ratio.limit_denominator(10_000)
    return ratio.numerator, ratio.denominator


def resample(x: np.ndarray, from_rate: float, to_rate: float) -> np.ndarray:
    """
    Band-limited polyphase resampling (Kaiser-windowed sinc, beta 8.6, 64 taps per phase).
    Output length is floor(len * to_rate / from_rate).
    """
    if from_rate <= 0 or to_rate <= 0:
        raise InvalidArgumentError(f"Sample rates must be positive (got {from_rate} -> {to_rate})")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise InvalidArgumentError("resample needs a 1-D signal with at least 2 samples")

    up, down = _rate_ratio(from_rate, to_rate)
    if up == down:
        return x.copy()
    n_out = (x.size * up) // down
    max_rate = max(up, down)
    half_len = TAPS_PER_PHASE * max_rate // 2
    taps = signal.firwin(2 * half_len + 1, 1.0 / max_rate, window=("kaiser", KAISER_BETA))
    y = signal.resample_poly(x, up, down, window=taps)
    return y[:n_out]


# =============================================================================
# IIR FILTERS
# =============================================================================

def design_filter(spec: FilterSpec) -> BiquadCascade:
    """
    Butterworth design as a biquad cascade. For band-pass filters `order` is the
    prototype order, so the cascade has `order` sections.
    """
    if spec.sample_rate <= 0:
        raise InvalidArgumentError("sample_rate must be positive")
    if spec.order <= 0 or spec.order % 2:
        raise InvalidArgumentError(f"Filter order must be a positive even integer, got {spec.order}")
    nyquist = spec.sample_rate / 2.0
    if not 0 < spec.cutoff_hi < nyquist:
        raise InvalidArgumentError(
            f"cutoff_hi={spec.cutoff_hi} Hz must lie in (0, {nyquist}) for rate {spec.sample_rate} Hz"
        )
    if spec.kind == "lowpass":
        sos = signal.butter(spec.order, spec.cutoff_hi, btype="lowpass", fs=spec.sample_rate, output="sos")
    elif spec.kind == "bandpass":
        if spec.cutoff_lo is None or not 0 < spec.cutoff_lo < spec.cutoff_hi:
            raise InvalidArgumentError("bandpass needs 0 < cutoff_lo < cutoff_hi")
        sos = signal.butter(spec.order, [spec.cutoff_lo, spec.cutoff_hi], btype="bandpass",
                            fs=spec.sample_rate, output="sos")
    else:
        raise InvalidArgumentError(f"Unknown filter kind '{spec.kind}'")

    cascade = BiquadCascade(sos=np.asarray(sos, dtype=np.float64), sample_rate=spec.sample_rate)
    if not cascade.is_stable():
        raise InvalidArgumentError(f"Designed filter {spec} is unstable")
    return cascade


def apply_filter(cascade: BiquadCascade, x: np.ndarray) -> np.ndarray:
    """Direct-form-II-transposed evaluation with zero initial state."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise InvalidArgumentError("Cannot filter an empty signal")
    return signal.sosfilt(cascade.sos, x, axis=-1)


def audio_bands(audio: np.ndarray, sample_rate: float, bands: Sequence[Tuple[float, float]],
                order: int = 4) -> List[np.ndarray]:
    """Split audio into the configured band-pass ranges."""
    return [
        apply_filter(design_filter(FilterSpec("bandpass", hi, sample_rate, order, cutoff_lo=lo)), audio)
        for lo, hi in bands
    ]


# =============================================================================
# TRIGGERING
# =============================================================================

def acceleration_magnitude(accel: np.ndarray) -> np.ndarray:
    accel = np.asarray(accel, dtype=np.float64)
    return np.sqrt(np.sum(accel * accel, axis=0))


def median_kernel(sample_rate: float, median_seconds: float = 1.0) -> int:
    """Odd running-median length covering `median_seconds`."""
    k = max(1, int(round(sample_rate * median_seconds)))
    return k if k % 2 else k + 1


def trigger_statistic(accel: np.ndarray, sample_rate: float, median_seconds: float = 1.0) -> np.ndarray:
    """Acceleration magnitude minus its running median (edge samples repeated)."""
    magnitude = acceleration_magnitude(accel)
    baseline = ndimage.median_filter(magnitude, size=median_kernel(sample_rate, median_seconds), mode="nearest")
    return magnitude - baseline


def _slice_padded(x: np.ndarray, start: int, length: int) -> np.ndarray:
    """x[..., start:start+length] with zeros where the range leaves the stream."""
    out = np.zeros(x.shape[:-1] + (length,), dtype=x.dtype)
    n = x.shape[-1]
    lo, hi = max(start, 0), min(start + length, n)
    if hi > lo:
        out[..., lo - start:hi - start] = x[..., lo:hi]
    return out


def _window_label(recording: SensorRecording, start: int, stop: int) -> Tuple[Label, str]:
    best: Optional[EventLabel] = None
    best_overlap = 0
    for event in recording.events:
        overlap = min(stop, event.stop_index) - max(start, event.start_index)
        if overlap > best_overlap:
            best, best_overlap = event, overlap
    if best is None:
        return "background", "None"
    return best.label, best.category


def _make_window(recording: SensorRecording, trigger: int, n_accel: int, n_audio: int,
                 full_recording: bool = False) -> EventWindow:
    accel_start = trigger - n_accel // 2
    audio_center = int(np.floor(trigger * recording.audio_rate / recording.accel_rate))
    audio_start = audio_center - n_audio // 2
    label, category = _window_label(recording, accel_start, accel_start + n_accel)
    return EventWindow(
        accel=_slice_padded(recording.accel, accel_start, n_accel),
        audio=_slice_padded(recording.audio, audio_start, n_audio),
        trigger_index=int(trigger),
        label=label,
        category=category,
        source_id=recording.source_id,
        accel_rate=recording.accel_rate,
        audio_rate=recording.audio_rate,
        start_time=recording.start_time,
        full_recording=full_recording,
    )


def detect_triggers(
    recording: SensorRecording,
    threshold: float,
    window_seconds: float,
    refractory_seconds: float,
    median_seconds: float = 1.0,
) -> List[EventWindow]:
    """
    Fire on samples where |a| minus its running median exceeds `threshold`, keep
    the first crossing and suppress further ones for `refractory_seconds`. Each
    window is centered on its trigger and zero-padded at the stream edges.
    """
    if threshold <= 0:
        raise InvalidArgumentError("threshold must be positive")
    if window_seconds <= 0:
        raise InvalidArgumentError("window_seconds must be positive")
    if refractory_seconds < 0:
        raise InvalidArgumentError("refractory_seconds must be non-negative")

    n_accel = int(np.floor(recording.accel_rate * window_seconds))
    n_audio = int(np.floor(recording.audio_rate * window_seconds))
    stat = trigger_statistic(recording.accel, recording.accel_rate, median_seconds)

    if n_accel > recording.n_accel:
        logger.warning(
            f"Window of {window_seconds}s is longer than recording '{recording.source_id}' "
            f"({recording.duration:.3f}s); returning one full-recording window"
        )
        window = _make_window(recording, recording.n_accel // 2, n_accel, n_audio, full_recording=True)
        return [replace(window, trigger_index=int(np.argmax(stat)))]

    refractory = int(round(refractory_seconds * recording.accel_rate))
    windows: List[EventWindow] = []
    next_allowed = 0
    for i in np.flatnonzero(stat > threshold):
        if i < next_allowed:
            continue
        windows.append(_make_window(recording, int(i), n_accel, n_audio))
        next_allowed = i + max(refractory, 1)
    logger.debug(f"{recording.source_id}: {len(windows)} trigger(s) at threshold {threshold}")
    return windows


def detect_with_settings(recording: SensorRecording, settings: Optional[Settings] = None) -> List[EventWindow]:
    settings = settings or get_settings()
    return detect_triggers(recording, settings.TRIGGER_THRESHOLD, settings.WINDOW_SECONDS,
                           settings.REFRACTORY_SECONDS, settings.MEDIAN_SECONDS)


# =============================================================================
# PREPROCESSING
# =============================================================================

def preprocess_window(window: EventWindow, settings: Optional[Settings] = None) -> EventWindow:
    """
    Resample both modalities to the model rates, low-pass the acceleration and keep
    the model's audio band. The window keeps W = floor(rate * window_seconds) samples.
    """
    settings = settings or get_settings()
    seconds = window.accel.shape[1] / window.accel_rate
    n_accel = int(np.floor(settings.ACCEL_RATE * seconds + 1e-9))
    n_audio = int(np.floor(settings.AUDIO_RATE * seconds + 1e-9))

    lowpass = design_filter(FilterSpec("lowpass", settings.ACCEL_CUTOFF_HZ, settings.ACCEL_RATE, settings.FILTER_ORDER))
    accel = np.stack([
        _fit_length(resample(axis, window.accel_rate, settings.ACCEL_RATE), n_accel)
        for axis in window.accel
    ])
    accel = apply_filter(lowpass, accel)

    audio = _fit_length(resample(window.audio, window.audio_rate, settings.AUDIO_RATE), n_audio)
    audio = audio_bands(audio, settings.AUDIO_RATE, [settings.audio_model_band], settings.FILTER_ORDER)[0]

    return replace(
        window,
        accel=accel,
        audio=audio,
        trigger_index=int(np.floor(window.trigger_index * settings.ACCEL_RATE / window.accel_rate)),
        accel_rate=settings.ACCEL_RATE,
        audio_rate=settings.AUDIO_RATE,
    )


def _fit_length(x: np.ndarray, n: int) -> np.ndarray:
    if x.size >= n:
        return x[:n]
    return np.concatenate([x, np.zeros(n - x.size)])
