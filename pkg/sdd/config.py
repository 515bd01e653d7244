"""
Configuration management with validation for the SDD toolkit.

Precedence (highest first): CLI flag > config file (canonical JSON) >
environment / .env > built-in default.
"""
import json
import logging
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings

from sdd.exceptions import ConfigError

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd", "adadelta")
LOSS_IDS = ("mse", "msle", "ssim", "logcosh")
ORIENTATIONS = ("auto", "low_error_positive", "high_error_positive")


class Settings(BaseSettings):
    """Toolkit settings with validation."""

    # =============================================================================
    # ENVIRONMENT & LOGGING
    # =============================================================================
    ENVIRONMENT: str = "development"
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "text"  # "text" or "json"
    LOG_FILE_PATH: Optional[str] = None

    # =============================================================================
    # PREPROCESSING
    # =============================================================================
    ACCEL_RATE: float = 1600.0
    AUDIO_RATE: float = 8000.0
    ACCEL_CUTOFF_HZ: float = 218.0
    FILTER_ORDER: int = 4
    AUDIO_BANDS: List[Tuple[float, float]] = [(200.0, 800.0), (800.0, 2000.0), (2000.0, 3000.0)]
    MODEL_AUDIO_BAND: int = 2  # index into AUDIO_BANDS feeding the model
    TRIGGER_THRESHOLD: float = 2.0  # m/s^2 above the running median
    WINDOW_SECONDS: float = 1.0
    REFRACTORY_SECONDS: float = 1.0
    MEDIAN_SECONDS: float = 1.0

    # =============================================================================
    # SPECTROGRAMS
    # =============================================================================
    SPECTROGRAM_SIZE: int = 32
    ACCEL_BAND_HZ: Tuple[float, float] = (1.0, 218.0)
    AUDIO_BAND_HZ: Tuple[float, float] = (2000.0, 3000.0)
    MORLET_OMEGA0: float = 6.0

    # =============================================================================
    # TRAINING
    # =============================================================================
    EPOCHS: int = 200
    BATCH_SIZE: int = 32
    LEARNING_RATE: float = 1e-3
    OPTIMIZER: str = "adam"
    LOSS: str = "logcosh"
    SEED: int = 7
    SPARSITY_WEIGHT: float = 1e-4  # used only when SPARSE_LATENT is set
    SPARSE_LATENT: bool = False
    KL_WEIGHT: float = 1.0
    MODEL_FILTERS: Tuple[int, int, int] = (256, 128, 64)  # encoder widths, stage 1..3
    LATENT_CHANNELS: int = 64
    TRAIN_CATEGORY: str = "Dent"
    TRAIN_FRACTION: float = 0.4  # of the trained damage category
    VALIDATION_FRACTION: float = 0.1  # of the trained damage category
    CALIBRATION_FRACTION: float = 0.2  # of the backgrounds

    # =============================================================================
    # EVALUATION
    # =============================================================================
    CALIBRATION_PERCENTILE: float = 95.0
    SCORE_ORIENTATION: str = "auto"

    # =============================================================================
    # PIPELINE
    # =============================================================================
    MAX_WORKERS: int = 4
    SINK_TIMEOUT_SECONDS: float = 5.0
    FAILED_DELIVERY_LOG: str = "failed_deliveries.jsonl"

    @field_validator("LOG_LEVEL")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        level = v.upper()
        if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"Unknown log level '{v}'")
        return level

    @field_validator("LOG_FORMAT")
    @classmethod
    def validate_log_format(cls, v: str) -> str:
        if v not in ("text", "json"):
            raise ValueError("LOG_FORMAT must be 'text' or 'json'")
        return v

    @field_validator("ACCEL_RATE", "AUDIO_RATE", "WINDOW_SECONDS", "MEDIAN_SECONDS", "TRIGGER_THRESHOLD")
    @classmethod
    def validate_positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("must be positive")
        return v

    @field_validator("MAX_WORKERS", "SPECTROGRAM_SIZE", "LATENT_CHANNELS", "EPOCHS", "BATCH_SIZE")
    @classmethod
    def validate_positive_int(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    @field_validator("FILTER_ORDER")
    @classmethod
    def validate_filter_order(cls, v: int) -> int:
        if v <= 0 or v % 2:
            raise ValueError("FILTER_ORDER must be a positive even integer (biquad cascade)")
        return v

    @field_validator("OPTIMIZER")
    @classmethod
    def validate_optimizer(cls, v: str) -> str:
        if v not in OPTIMIZERS:
            raise ValueError(f"OPTIMIZER must be one of {OPTIMIZERS}")
        return v

    @field_validator("LOSS")
    @classmethod
    def validate_loss(cls, v: str) -> str:
        if v not in LOSS_IDS:
            raise ValueError(f"LOSS must be one of {LOSS_IDS}")
        return v

    @field_validator("SCORE_ORIENTATION")
    @classmethod
    def validate_orientation(cls, v: str) -> str:
        if v not in ORIENTATIONS:
            raise ValueError(f"SCORE_ORIENTATION must be one of {ORIENTATIONS}")
        return v

    @field_validator("CALIBRATION_PERCENTILE")
    @classmethod
    def validate_percentile(cls, v: float) -> float:
        if not 0 < v <= 100:
            raise ValueError("CALIBRATION_PERCENTILE must lie in (0, 100]")
        return v

    @model_validator(mode="after")
    def validate_bands(self) -> "Settings":
        """Every cutoff and CWT band must sit below the Nyquist rate it is applied at."""
        accel_nyquist = self.ACCEL_RATE / 2
        audio_nyquist = self.AUDIO_RATE / 2
        if not 0 < self.ACCEL_CUTOFF_HZ < accel_nyquist:
            raise ValueError(f"ACCEL_CUTOFF_HZ must lie in (0, {accel_nyquist})")
        for lo, hi in self.AUDIO_BANDS:
            if not 0 < lo < hi < audio_nyquist:
                raise ValueError(f"Audio band ({lo}, {hi}) must satisfy 0 < lo < hi < {audio_nyquist}")
        if not 0 <= self.MODEL_AUDIO_BAND < len(self.AUDIO_BANDS):
            raise ValueError("MODEL_AUDIO_BAND must index AUDIO_BANDS")
        lo, hi = self.ACCEL_BAND_HZ
        if not 0 < lo < hi <= accel_nyquist:
            raise ValueError("ACCEL_BAND_HZ must lie within (0, ACCEL_RATE/2]")
        lo, hi = self.AUDIO_BAND_HZ
        if not 0 < lo < hi <= audio_nyquist:
            raise ValueError("AUDIO_BAND_HZ must lie within (0, AUDIO_RATE/2]")
        fractions = self.TRAIN_FRACTION + self.VALIDATION_FRACTION
        if not (0 < self.TRAIN_FRACTION and 0 <= self.VALIDATION_FRACTION and fractions <= 1):
            raise ValueError("TRAIN_FRACTION + VALIDATION_FRACTION must lie in (0, 1]")
        if not 0 < self.CALIBRATION_FRACTION < 1:
            raise ValueError("CALIBRATION_FRACTION must lie in (0, 1)")
        return self

    @property
    def audio_model_band(self) -> Tuple[float, float]:
        """The band-pass range whose output feeds the model."""
        return self.AUDIO_BANDS[self.MODEL_AUDIO_BAND]

    @property
    def is_production(self) -> bool:
        return self.ENVIRONMENT.lower() in ["production", "prod"]

    class Config:
        env_file = ".env"
        env_file_encoding = "utf-8"
        case_sensitive = True


def _report_validation_error(e: ValidationError) -> ConfigError:
    logger.error("Configuration is invalid:")
    for error in e.errors():
        field = " -> ".join(str(loc) for loc in error["loc"]) or "settings"
        logger.error(f"  - {field}: {error['msg']}")
    return ConfigError(f"Invalid configuration: {e.error_count()} error(s); first: {e.errors()[0]['msg']}")


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a canonical-JSON config file into a settings mapping."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"Config file not found: {p}")
    try:
        values = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {p} is not valid JSON: {e}") from e
    if not isinstance(values, dict):
        raise ConfigError(f"Config file {p} must hold a JSON object")
    return values


def load_settings(
    config_path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> Settings:
    """
    Build settings honouring CLI > config file > environment > default.
    `overrides` holds CLI values; None entries are ignored.
    """
    values: Dict[str, Any] = {}
    if config_path is not None:
        values.update(read_config_file(config_path))
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return Settings(**values)
    except ValidationError as e:
        raise _report_validation_error(e) from e


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """
    Get the validated default settings instance (environment + defaults only).
    Raises ConfigError if the environment holds invalid values.
    """
    try:
        return Settings()
    except ValidationError as e:
        raise _report_validation_error(e) from e
