import json
import re
from typing import Any, ClassVar, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

from sdd.exceptions import ImpossibleSpecError

Label = Literal["damage", "background"]
Modality = Literal["acc", "aud"]

# Damage types the generator can synthesize and the event category each maps to.
DAMAGE_CATEGORIES: Dict[str, str] = {
    "dent": "Dent",
    "scratch": "Scratch",
    "underbody": "Underbody",
}

# Background/confounder event names as they appear in the field campaign's
# misclassification summary. "None" is a trigger without any labelled event.
BACKGROUND_TAXONOMY: Tuple[str, ...] = (
    "None",
    "Pothole",
    "Speed Bump",
    "General Bump",
    "Curb Climb",
    "Vehicle hits Front Right Bumper",
    "Vehicle hits Front Left Bumper",
    "Vehicle hits Back Right Bumper",
    "Vehicle hits Back Left Bumper",
    "Vehicle hits Back Bumper",
    "Vehicle hits Front Bumper",
    "ABT-Bottom-Out",
    "Object Impact Front Left Bumper",
    "Object Impact Front Bumper",
    "Object Impact Back Bumper",
    "Roof Slap Front Left Outside",
    "Door Close Trunk",
)

EVENT_TAXONOMY: Tuple[str, ...] = tuple(DAMAGE_CATEGORIES.values()) + BACKGROUND_TAXONOMY

DEFAULT_BACKGROUND_TYPES: List[str] = [
    "None",
    "Pothole",
    "Speed Bump",
    "General Bump",
    "Curb Climb",
    "Door Close Trunk",
    "Roof Slap Front Left Outside",
]

DEFAULT_IMBALANCE = 40.0
CONTAINER_FORMAT_VERSION = 1


def canonical_json(payload: Any, indent: Optional[int] = None) -> str:
    """Deterministic JSON: sorted keys, no NaN/inf, ASCII only."""
    separators = (",", ":") if indent is None else (",", ": ")
    return json.dumps(payload, sort_keys=True, indent=indent, separators=separators,
                      ensure_ascii=True, allow_nan=False)


# =============================================================================
# DATA
# =============================================================================

class EventLabel(BaseModel):
    label: Label
    category: str
    start_index: int = Field(ge=0)  # accel sample index, inclusive
    stop_index: int = Field(ge=0)  # accel sample index, exclusive

    @model_validator(mode="after")
    def validate_range(self) -> "EventLabel":
        if self.stop_index <= self.start_index:
            raise ValueError("stop_index must exceed start_index")
        if self.category not in EVENT_TAXONOMY:
            raise ValueError(f"Unknown event category '{self.category}'")
        return self


class DatasetSpec(BaseModel):
    """What the synthetic generator should produce."""
    n_damage: int = Field(default=50, ge=0)
    n_background: Optional[int] = Field(default=None, ge=0)
    imbalance: Optional[float] = None  # backgrounds per damage event
    damage_types: List[str] = Field(default_factory=lambda: ["dent"])
    background_types: List[str] = Field(default_factory=lambda: list(DEFAULT_BACKGROUND_TYPES))
    category_weights: Dict[str, float] = Field(default_factory=dict)
    noise_floor: float = Field(default=0.005, ge=0)
    seed: int = 7
    recording_seconds: float = Field(default=4.0, gt=0)
    accel_rate: float = Field(default=3200.0, gt=0)
    audio_rate: float = Field(default=16000.0, gt=0)
    include_gyro: bool = False

    @field_validator("imbalance", mode="before")
    @classmethod
    def parse_ratio(cls, v: Any) -> Any:
        # Accept "40:1" as well as 40
        if isinstance(v, str):
            m = re.fullmatch(r"\s*([0-9.]+)\s*:\s*([0-9.]+)\s*", v)
            if not m or float(m.group(2)) == 0:
                raise ValueError(f"Cannot parse ratio '{v}'")
            return float(m.group(1)) / float(m.group(2))
        return v

    @field_validator("imbalance")
    @classmethod
    def validate_imbalance(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and v <= 0:
            raise ValueError("imbalance must be positive")
        return v

    @field_validator("damage_types")
    @classmethod
    def validate_damage_types(cls, v: List[str]) -> List[str]:
        unknown = [t for t in v if t not in DAMAGE_CATEGORIES]
        if unknown:
            raise ValueError(f"Unknown damage types {unknown}; allowed {sorted(DAMAGE_CATEGORIES)}")
        return v

    @field_validator("background_types")
    @classmethod
    def validate_background_types(cls, v: List[str]) -> List[str]:
        unknown = [t for t in v if t not in BACKGROUND_TAXONOMY]
        if unknown:
            raise ValueError(f"Unknown background types {unknown}")
        return v

    @field_validator("category_weights")
    @classmethod
    def validate_weights(cls, v: Dict[str, float]) -> Dict[str, float]:
        for name, w in v.items():
            if name not in EVENT_TAXONOMY and name not in DAMAGE_CATEGORIES:
                raise ValueError(f"Weight given for unknown category '{name}'")
            if w < 0:
                raise ValueError(f"Weight for '{name}' must be non-negative")
        return v

    def background_count(self) -> int:
        """Resolve the number of background events, checking count/ratio consistency."""
        if self.n_background is None:
            ratio = self.imbalance if self.imbalance is not None else DEFAULT_IMBALANCE
            return int(round(self.n_damage * ratio))
        if self.imbalance is not None and self.n_background != int(round(self.n_damage * self.imbalance)):
            raise ImpossibleSpecError(
                f"n_background={self.n_background} conflicts with imbalance {self.imbalance}:1 "
                f"for n_damage={self.n_damage}"
            )
        return self.n_background


class ManifestEntry(BaseModel):
    id: str
    label: Label
    category: str
    seed: int
    path: str


class DatasetManifest(BaseModel):
    format_version: int = CONTAINER_FORMAT_VERSION
    spec: DatasetSpec
    entries: List[ManifestEntry]


class ChannelInfo(BaseModel):
    sensor: Literal["accelerometer", "microphone", "gyroscope"]
    rate: float = Field(gt=0)
    axes: List[str]
    unit: str
    blob: str
    shape: Tuple[int, int]  # (channels, samples)
    dtype: Literal["<f4"] = "<f4"


class ContainerManifest(BaseModel):
    format_version: int
    source_id: str
    start_time: float
    channels: Dict[str, ChannelInfo]
    metadata: Dict[str, str] = Field(default_factory=dict)
    events: List[EventLabel] = Field(default_factory=list)


# =============================================================================
# MODELS & TRAINING
# =============================================================================

Variant = Literal["mono_acc", "mono_aud", "maa1_joint", "maa2_conv", "maa3_pool",
                  "matten", "mbotf", "cvae", "residual"]


class LayerSpec(BaseModel):
    """One node of a model graph: a layer kind, its hyperparameters and its inputs."""
    name: str
    kind: Literal["conv2d", "maxpool2d", "batchnorm", "relu", "sigmoid", "dense", "upsample2d",
                  "concat", "add", "attention", "residual_block", "sampling", "flatten",
                  "reshape", "bottleneck_exchange"]
    inputs: List[str]
    params: Dict[str, Any] = Field(default_factory=dict)


class FusionConfig(BaseModel):
    variant: Variant
    latent_channels: int = Field(default=64, gt=0)
    fusion_kernel: int = Field(default=3, gt=0)
    pool: Literal["max", "mean"] = "max"
    attention_heads: int = Field(default=4, gt=0)
    bottleneck_tokens: int = Field(default=4, gt=0)
    vae_latent: int = Field(default=2, gt=0)
    fusion_op: Literal["concat", "sum"] = "concat"
    filters: Tuple[int, int, int] = (256, 128, 64)
    input_size: int = Field(default=32, gt=0)
    accel_channels: int = Field(default=3, gt=0)
    audio_channels: int = Field(default=1, gt=0)
    sparsity: bool = False
    seed: int = 0

    @model_validator(mode="after")
    def validate_variant_fields(self) -> "FusionConfig":
        if any(f <= 0 for f in self.filters):
            raise ValueError("filters must be positive")
        if self.input_size % 8:
            raise ValueError("input_size must be divisible by 8 (three stride-2 stages)")
        if self.variant in ("maa2_conv", "maa3_pool", "residual") and self.fusion_kernel % 2 == 0:
            raise ValueError("fusion_kernel must be odd")
        if self.variant == "matten" and self.filters[-1] % self.attention_heads:
            raise ValueError("last encoder width must be divisible by attention_heads")
        if self.variant == "mbotf" and any(f % self.attention_heads for f in self.filters[:2]):
            raise ValueError("encoder widths must be divisible by attention_heads")
        if self.variant in ("maa3_pool", "residual") and (self.input_size // 8) % 2:
            raise ValueError("latent grid must be even for 2x2 pooling")
        return self


class TrainConfig(BaseModel):
    optimizer: Literal["adam", "sgd", "adadelta"] = "adam"
    learning_rate: float = Field(default=1e-3, ge=0)  # 0 = frozen-weights run
    epochs: int = Field(default=200, ge=1)
    batch_size: int = Field(default=32, ge=1)
    loss: Literal["mse", "msle", "ssim", "logcosh"] = "logcosh"
    seed: int = 7
    checkpoint_policy: Literal["min-validation-loss"] = "min-validation-loss"
    sparsity_weight: float = Field(default=0.0, ge=0)
    kl_weight: float = Field(default=1.0, ge=0)


# =============================================================================
# EVALUATION & PIPELINE
# =============================================================================

class ScoreRecord(BaseModel):
    id: str
    score_acc: Optional[float] = None
    score_aud: Optional[float] = None
    label: Label
    category: str

    @model_validator(mode="after")
    def validate_scores(self) -> "ScoreRecord":
        if self.score_acc is None and self.score_aud is None:
            raise ValueError("at least one modality score is required")
        return self


class RocPoint(BaseModel):
    fpr: float
    tpr: float
    threshold: Optional[float]  # None for the (0, 0) start point


class FpRow(BaseModel):
    category: str
    false_positives: int
    backgrounds: int


class EvalReport(BaseModel):
    model_id: str
    loss_id: str
    auc_acc: Optional[float] = None
    auc_aud: Optional[float] = None
    auc_best: float
    orientation: Dict[str, str]
    thresholds: Dict[str, float]
    decision_modality: Modality
    roc: Dict[str, List[RocPoint]]
    fp_table: List[FpRow]
    n_samples: int
    n_positive: int
    param_count: int
    layer_count: int
    model_bytes: int
    mean_inference_ms: float
    std_inference_ms: float

    TIMING_FIELDS: ClassVar[Tuple[str, ...]] = ("mean_inference_ms", "std_inference_ms")

    def to_json(self, include_timing: bool = True) -> str:
        payload = self.model_dump()
        if not include_timing:
            for name in self.TIMING_FIELDS:
                payload.pop(name, None)
        return canonical_json(payload, indent=2) + "\n"


class DetectionRecord(BaseModel):
    timestamp: float
    source_id: str
    trigger_index: int
    score_acc: Optional[float] = None
    score_aud: Optional[float] = None
    decision: Label
    model_id: str
    threshold: float
    decision_modality: Modality
    orientation: str
    inference_ms: float = 0.0
    delivery_failed: bool = False


