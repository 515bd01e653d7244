"""
Continuous Wavelet Transform spectrograms, 32x32 resizing, normalization and
spectrogram-level augmentation.
"""
import logging
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Literal, Optional, Sequence

import numpy as np

from sdd.config import Settings, get_settings
from sdd.dsp import EventWindow
from sdd.exceptions import InvalidArgumentError
from sdd.schemas import Label

logger = logging.getLogger(__name__)

ChannelRole = Literal["accel_x", "accel_y", "accel_z", "audio"]
AugmentOp = Literal["identity", "rot90", "rot180", "rot270", "flip_h", "flip_v", "transpose"]

ACCEL_ROLES = ("accel_x", "accel_y", "accel_z")
AUGMENT_OPS = ("rot90", "rot180", "rot270", "flip_h", "flip_v")
# identity + the five named ops + transpose; seven views per damage sample
EXPANSION_OPS = ("identity",) + AUGMENT_OPS + ("transpose",)


@dataclass(frozen=True)
class Spectrogram:
    values: np.ndarray  # (size, size) in [0, 1]
    channel_role: ChannelRole
    scale_axis: np.ndarray  # center frequencies (Hz), descending
    time_axis: np.ndarray  # bin centers (s)

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgumentError("Spectrogram values must be finite")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise InvalidArgumentError("Spectrogram values must lie in [0, 1]")
        if self.scale_axis.size > 1 and not np.all(np.diff(self.scale_axis) < 0):
            raise InvalidArgumentError("scale_axis must be strictly descending")


@dataclass(frozen=True)
class SampleTensor:
    """Model input for one event window: accel (3, S, S) and audio (1, S, S)."""
    accel: np.ndarray
    audio: np.ndarray
    label: Label
    category: str
    id: str = ""

    def __post_init__(self):
        accel = np.asarray(self.accel, dtype=np.float32)
        audio = np.asarray(self.audio, dtype=np.float32)
        if accel.ndim != 3 or accel.shape[0] != 3:
            raise InvalidArgumentError(f"accel must be (3, S, S), got {accel.shape}")
        if audio.ndim != 3 or audio.shape[0] != 1 or audio.shape[1:] != accel.shape[1:]:
            raise InvalidArgumentError(f"audio must be (1, S, S) matching accel, got {audio.shape}")
        for name, values in (("accel", accel), ("audio", audio)):
            if not np.all(np.isfinite(values)) or values.min() < 0 or values.max() > 1:
                raise InvalidArgumentError(f"{name} values must be finite and within [0, 1]")
        object.__setattr__(self, "accel", accel)
        object.__setattr__(self, "audio", audio)


# =============================================================================
# TRANSFORM
# =============================================================================

def morlet_frequency_response(omegas: np.ndarray, omega0: float = 6.0) -> np.ndarray:
    """Analytic Morlet in the frequency domain (L2-normalized, zero for negative frequencies)."""
    omegas = np.asarray(omegas, dtype=np.float64)
    response = np.pi ** -0.25 * np.exp(-0.5 * (omegas - omega0) ** 2)
    return np.where(omegas > 0, response, 0.0)


def center_frequency(scale: np.ndarray, sample_rate: float, omega0: float = 6.0) -> np.ndarray:
    return omega0 * sample_rate / (2.0 * np.pi * np.asarray(scale, dtype=np.float64))


def morlet_cwt(signal: np.ndarray, sample_rate: float, scales: Sequence[float],
               omega0: float = 6.0) -> np.ndarray:
    """
    FFT-based CWT. Scales are in samples; row k is
    IDFT(DFT(x) * conj(psi_hat(s_k * omega)) * sqrt(2 pi s_k)).
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1 or x.size < 8:
        raise InvalidArgumentError("morlet_cwt needs a 1-D signal with at least 8 samples")
    if sample_rate <= 0:
        raise InvalidArgumentError("sample_rate must be positive")
    scales = np.asarray(scales, dtype=np.float64)
    if scales.ndim != 1 or scales.size == 0 or np.any(scales <= 0):
        raise InvalidArgumentError("scales must be a non-empty vector of positive values")

    n = x.size
    omegas = 2.0 * np.pi * np.fft.fftfreq(n)  # rad/sample
    spectrum = np.fft.fft(x)
    kernels = np.conj(morlet_frequency_response(np.outer(scales, omegas), omega0))
    kernels *= np.sqrt(2.0 * np.pi * scales)[:, None]
    return np.fft.ifft(spectrum[None, :] * kernels, axis=1)


def scales_for_band(f_min: float, f_max: float, n: int, sample_rate: float,
                    omega0: float = 6.0) -> np.ndarray:
    """n scales (increasing) whose center frequencies are log-spaced from f_max down to f_min."""
    if n < 2:
        raise InvalidArgumentError("n must be at least 2")
    if sample_rate <= 0 or not 0 < f_min < f_max <= sample_rate / 2:
        raise InvalidArgumentError(
            f"Band must satisfy 0 < f_min < f_max <= {sample_rate / 2} (got {f_min}, {f_max})"
        )
    freqs = np.geomspace(f_max, f_min, n)
    return omega0 * sample_rate / (2.0 * np.pi * freqs)


def _pool_axis(values: np.ndarray, out_size: int, axis: int) -> np.ndarray:
    """Mean over equal bins; element j lands in bin floor(out_size * j / length)."""
    length = values.shape[axis]
    bins = (out_size * np.arange(length)) // length
    moved = np.moveaxis(values, axis, 0)
    sums = np.zeros((out_size,) + moved.shape[1:], dtype=np.float64)
    np.add.at(sums, bins, moved)
    counts = np.bincount(bins, minlength=out_size).astype(np.float64)
    pooled = sums / counts.reshape((-1,) + (1,) * (moved.ndim - 1))
    return np.moveaxis(pooled, 0, axis)


def _min_max(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi - lo <= 0 or not np.isfinite(hi - lo):
        return np.zeros_like(values)
    return np.clip((values - lo) / (hi - lo), 0.0, 1.0)


def to_spectrogram(
    coefficients: np.ndarray,
    out_size: int = 32,
    channel_role: ChannelRole = "audio",
    center_frequencies: Optional[np.ndarray] = None,
    sample_rate: float = 1.0,
) -> Spectrogram:
    """
    |CWT| pooled to out_size x out_size (mean over equal time bins, and over equal
    scale bins when there are more scales than rows) and min-max normalized.
    A constant image maps to all zeros.
    """
    coefficients = np.asarray(coefficients)
    if coefficients.ndim != 2 or coefficients.size == 0:
        raise InvalidArgumentError("to_spectrogram needs a non-empty 2-D coefficient matrix")
    n_scales, width = coefficients.shape
    if n_scales < out_size or width < out_size:
        raise InvalidArgumentError(
            f"Coefficient matrix {coefficients.shape} is smaller than the {out_size}x{out_size} output"
        )

    magnitude = np.abs(coefficients).astype(np.float64)
    pooled = _pool_axis(magnitude, out_size, axis=1)
    if n_scales > out_size:
        pooled = _pool_axis(pooled, out_size, axis=0)

    if center_frequencies is None:
        scale_axis = np.arange(out_size, 0, -1, dtype=np.float64)
    else:
        freqs = np.asarray(center_frequencies, dtype=np.float64)
        scale_axis = freqs if n_scales == out_size else _pool_axis(freqs, out_size, axis=0)
    time_axis = (_pool_axis(np.arange(width, dtype=np.float64), out_size, axis=0)) / sample_rate

    return Spectrogram(values=_min_max(pooled), channel_role=channel_role,
                       scale_axis=scale_axis, time_axis=time_axis)


def channel_spectrogram(signal: np.ndarray, sample_rate: float, band: Sequence[float], size: int,
                        channel_role: ChannelRole, omega0: float = 6.0) -> Spectrogram:
    scales = scales_for_band(band[0], band[1], size, sample_rate, omega0)
    coefficients = morlet_cwt(signal, sample_rate, scales, omega0)
    return to_spectrogram(coefficients, size, channel_role,
                          center_frequency(scales, sample_rate, omega0), sample_rate)


def window_to_sample(window: EventWindow, settings: Optional[Settings] = None) -> SampleTensor:
    """Turn a preprocessed event window into the model's 4-channel spectrogram tensor."""
    settings = settings or get_settings()
    size = settings.SPECTROGRAM_SIZE
    accel = np.stack([
        channel_spectrogram(axis, window.accel_rate, settings.ACCEL_BAND_HZ, size, role,
                            settings.MORLET_OMEGA0).values
        for axis, role in zip(window.accel, ACCEL_ROLES)
    ])
    audio = channel_spectrogram(window.audio, window.audio_rate, settings.AUDIO_BAND_HZ, size,
                                "audio", settings.MORLET_OMEGA0).values[None]
    sample_id = f"{window.source_id}@{window.trigger_index}"
    return SampleTensor(accel=accel, audio=audio, label=window.label, category=window.category, id=sample_id)


# =============================================================================
# AUGMENTATION
# =============================================================================

def _apply_op(values: np.ndarray, op: str) -> np.ndarray:
    if op == "identity":
        return values.copy()
    if op == "rot90":
        return np.rot90(values, 1, axes=(-2, -1)).copy()
    if op == "rot180":
        return np.rot90(values, 2, axes=(-2, -1)).copy()
    if op == "rot270":
        return np.rot90(values, 3, axes=(-2, -1)).copy()
    if op == "flip_h":
        return values[..., ::-1].copy()
    if op == "flip_v":
        return values[..., ::-1, :].copy()
    if op == "transpose":
        return np.swapaxes(values, -2, -1).copy()
    raise InvalidArgumentError(f"Unknown augmentation op '{op}'")


def augment(t: SampleTensor, op: AugmentOp) -> SampleTensor:
    """Apply one spatial transform to all four channels; label and category are kept."""
    return replace(t, accel=_apply_op(t.accel, op), audio=_apply_op(t.audio, op))


def expand_training_set(samples: Iterable[SampleTensor]) -> List[SampleTensor]:
    """Seven views of every sample (identity, rotations, flips and the transpose)."""
    expanded = [
        replace(augment(sample, op), id=f"{sample.id}:{op}")
        for sample in samples
        for op in EXPANSION_OPS
    ]
    logger.debug(f"Augmented training set to {len(expanded)} samples")
    return expanded


def stack_samples(samples: Sequence[SampleTensor]) -> Dict[str, np.ndarray]:
    """Batch arrays keyed by model entry name."""
    if not samples:
        raise InvalidArgumentError("Cannot stack an empty sample list")
    return {
        "acc": np.stack([s.accel for s in samples]).astype(np.float32),
        "aud": np.stack([s.audio for s in samples]).astype(np.float32),
    }
