"""Core data models for VL-Reader."""

from enum import Enum
from typing import Dict, List, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

DEFAULT_CHARSET = "abcdefghijklmnopqrstuvwxyz0123456789"


class Phase(str, Enum):
    """Training phases."""
    MVLR = "mvlr"
    FINETUNE = "finetune"


class CorruptionKind(str, Enum):
    """Built-in image corruptions."""
    OCCLUDE = "occlude"
    BLUR = "blur"
    NOISE = "noise"


class CorruptionTag(str, Enum):
    """Tags recorded on a text image."""
    CLEAN = "clean"
    OCCLUDED = "occluded"
    BLURRED = "blurred"
    NOISY = "noisy"


CORRUPTION_TAG_FOR_KIND: Dict[CorruptionKind, CorruptionTag] = {
    CorruptionKind.OCCLUDE: CorruptionTag.OCCLUDED,
    CorruptionKind.BLUR: CorruptionTag.BLURRED,
    CorruptionKind.NOISE: CorruptionTag.NOISY,
}


class ModelConfig(BaseModel):
    """Architecture and objective hyperparameters."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    charset: str = Field(
        DEFAULT_CHARSET, description="Recognizable characters, in id order"
    )
    max_label_len: int = Field(25, ge=1, description="Maximum label length")
    image_height: int = Field(32, gt=0, description="Image height H in pixels")
    image_width: int = Field(128, gt=0, description="Image width W in pixels")
    channels: int = Field(1, gt=0, description="Image channels C")
    patch_h: int = Field(4, gt=0, description="Patch height p_h")
    patch_w: int = Field(8, gt=0, description="Patch width p_w")
    d_model: int = Field(64, gt=0, description="Embedding width")
    n_heads: int = Field(4, gt=0, description="Attention heads")
    enc_depth: int = Field(4, ge=1, description="Visual encoder blocks")
    dec_depth: int = Field(4, ge=1, description="Decoder layers N_d")
    mlp_ratio: float = Field(4.0, gt=0, description="Feed-forward width / d_model")
    dropout: float = Field(0.0, ge=0.0, lt=1.0, description="Dropout probability")
    r_v: float = Field(0.75, ge=0.0, le=1.0, description="Visual masking ratio")
    r_l: float = Field(0.2, ge=0.0, le=1.0, description="Linguistic masking ratio")
    lambda_v: float = Field(1.0, ge=0.0, description="Visual loss weight")
    lambda_l: float = Field(1.0, ge=0.0, description="Linguistic loss weight")
    permutations: int = Field(6, ge=1, description="Permutations K in fine-tuning")
    share_heads: bool = Field(True, description="Share reconstruction heads across layers")
    norm_pix_loss: bool = Field(False, description="Standardize pixel targets per patch")
    linguistic_context: bool = Field(
        True, description="Let queries attend character context (false = visual only)"
    )

    @field_validator("charset")
    @classmethod
    def validate_charset(cls, v: str) -> str:
        """Charset must be non-empty, distinct, and drawn from a-z0-9."""
        if not v:
            raise ValueError("charset must not be empty")
        if len(set(v)) != len(v):
            raise ValueError("charset characters must be distinct")
        stray = [c for c in v if c not in DEFAULT_CHARSET]
        if stray:
            raise ValueError(f"charset contains unsupported characters: {stray}")
        return v

    @model_validator(mode="after")
    def validate_geometry(self) -> "ModelConfig":
        """Check divisibility constraints."""
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.image_height % self.patch_h or self.image_width % self.patch_w:
            raise ValueError("image size must be divisible by patch size")
        return self

    @property
    def vocab_size(self) -> int:
        """EOS + characters + BOS, PAD, MASK_L."""
        return len(self.charset) + 4

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return self.image_height // self.patch_h, self.image_width // self.patch_w

    @property
    def n_patches(self) -> int:
        rows, cols = self.grid_shape
        return rows * cols

    @property
    def patch_dim(self) -> int:
        return self.patch_h * self.patch_w * self.channels

    @property
    def query_len(self) -> int:
        """Characters plus the EOS prediction slot."""
        return self.max_label_len + 1


class PhaseConfig(BaseModel):
    """Effective settings of one training phase."""

    model_config = ConfigDict(frozen=True)

    phase: Phase
    epochs: int = Field(..., ge=0)
    lr_init: float = Field(..., gt=0)
    r_v_eff: float = Field(..., ge=0.0, le=1.0)
    r_l_eff: float = Field(..., ge=0.0, le=1.0)
    lambda_v_eff: float = Field(..., ge=0.0)
    lambda_l: float = Field(1.0, ge=0.0)
    permutations_per_batch: int = Field(..., ge=1)

    @model_validator(mode="after")
    def validate_finetune(self) -> "PhaseConfig":
        """Fine-tuning disables both masks and visual reconstruction."""
        if self.phase == Phase.FINETUNE and (self.r_v_eff or self.r_l_eff or self.lambda_v_eff):
            raise ValueError("fine-tuning requires r_v = r_l = lambda_v = 0")
        return self

    @classmethod
    def for_phase(cls, phase: Phase, config: "RunConfig") -> "PhaseConfig":
        """Derive a phase's settings from the run configuration."""
        if phase == Phase.MVLR:
            return cls(
                phase=phase,
                epochs=config.mvlr_epochs,
                lr_init=config.mvlr_lr,
                r_v_eff=config.r_v,
                r_l_eff=config.r_l,
                lambda_v_eff=config.lambda_v,
                lambda_l=config.lambda_l,
                permutations_per_batch=1,
            )
        return cls(
            phase=phase,
            epochs=config.finetune_epochs,
            lr_init=config.finetune_lr,
            r_v_eff=0.0,
            r_l_eff=0.0,
            lambda_v_eff=0.0,
            lambda_l=config.lambda_l,
            permutations_per_batch=config.permutations,
        )


class RunConfig(ModelConfig):
    """Flat run configuration: architecture, training schedule and dataset."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    batch_size: int = Field(64, gt=0, description="Samples per batch")
    mvlr_epochs: int = Field(20, ge=0, description="Epochs of MVLR pretraining")
    finetune_epochs: int = Field(10, ge=0, description="Epochs of fine-tuning")
    mvlr_lr: float = Field(7e-4, gt=0, description="Peak learning rate, MVLR phase")
    finetune_lr: float = Field(1e-4, gt=0, description="Peak learning rate, fine-tuning")
    weight_decay: float = Field(0.01, ge=0.0, description="Decoupled weight decay")
    refine_iters: int = Field(1, ge=0, description="Cloze refinement iterations")
    seed: int = Field(0, ge=0, description="Global random seed")
    device: str = Field("cpu", description="Torch device")
    prefetch: int = Field(2, ge=0, description="Batches assembled ahead of the training step")
    data_min_len: int = Field(1, ge=1, description="Shortest generated label")
    data_max_len: int = Field(8, ge=1, description="Longest generated label")
    corruption_mix: str = Field(
        "clean=0.7,occluded=0.1,blurred=0.1,noisy=0.1",
        description="Corruption tag fractions for generated data",
    )

    def to_model_config(self) -> ModelConfig:
        """Architecture part of the run configuration."""
        return ModelConfig(**{name: getattr(self, name) for name in ModelConfig.model_fields})


class LossReport(BaseModel):
    """Scalar view of one MVLR loss evaluation."""

    l_v: float = Field(..., ge=0.0)
    l_l: float = Field(..., ge=0.0)
    total: float
    per_layer_v: List[float]
    per_layer_l: List[float]
    masked_pixels: int = Field(..., ge=0)
    target_tokens: int = Field(..., ge=0)
    visual_defined: bool = True


class Prediction(BaseModel):
    """Decoded output for one image."""

    text: str
    token_ids: List[int]
    confidences: List[float]
    refined: bool = False

    @property
    def mean_confidence(self) -> float:
        if not self.confidences:
            return 0.0
        return sum(self.confidences) / len(self.confidences)


class VisualizationConfig(BaseModel):
    """Configuration for training and evaluation charts."""

    title: str = "VL-Reader"
    theme: str = "plotly_white"
    color_scheme: List[str] = Field(default=[
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
        "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    ])
    width: int = Field(1200, gt=0)
    height: int = Field(700, gt=0)
    font_family: str = "Arial, sans-serif"
    export_formats: List[str] = Field(default=["html"])
