"""Configuration management using Pydantic Settings."""

import logging
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Union

from pydantic import Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.errors import ConfigError

logger = logging.getLogger(__name__)


class GeometryConfig(BaseSettings):
    """Keypoint geometry configuration."""

    model_config = SettingsConfigDict(env_prefix="FACEANIM_GEOMETRY_", extra="forbid")

    layout: Literal["face68-vr31"] = Field(
        default="face68-vr31",
        description="Keypoint layout name (68 landmarks + 2 pupil anchors, 31 VR keypoints)"
    )
    eye_radius: float = Field(
        default=0.04,
        gt=0.0,
        description="Pupil displacement for a full-deflection gaze, in normalized units"
    )
    mask_dilation: int = Field(
        default=3,
        ge=0,
        description="Lower-face mask dilation in pixels at the reference feature resolution"
    )
    mask_reference_resolution: int = Field(
        default=64,
        ge=1,
        description="Feature resolution at which mask_dilation is expressed"
    )


class MotionConfig(BaseSettings):
    """Deformation grid configuration."""

    model_config = SettingsConfigDict(env_prefix="FACEANIM_MOTION_", extra="forbid")

    kernel: Literal["thin-plate-spline", "per-triangle-affine"] = Field(
        default="thin-plate-spline",
        description="Interpolation kernel for the dense deformation grid"
    )
    regularization: float = Field(
        default=1e-3,
        ge=0.0,
        description="TPS smoothing (lambda) for the full-face grids"
    )
    metric_regularization: float = Field(
        default=0.0,
        ge=0.0,
        description="TPS smoothing used by the temporal metric and the TCF filter"
    )


class AttentionConfig(BaseSettings):
    """Source attention configuration."""

    model_config = SettingsConfigDict(env_prefix="FACEANIM_ATTENTION_", extra="forbid")

    dim: int = Field(
        default=256,
        ge=1,
        description="Similarity vector length"
    )
    a_max: float = Field(
        default=0.25,
        gt=0.0,
        le=1.0,
        description="Maximum attention weight of the retrieved source"
    )


class NoiseConfig(BaseSettings):
    """Mouth-camera emulation noise."""

    model_config = SettingsConfigDict(env_prefix="FACEANIM_NOISE_", extra="forbid")

    sigma_scale: float = Field(default=0.05, ge=0.0, description="Std of the keypoint scale factor (mean 1)")
    sigma_trans: float = Field(default=0.02, ge=0.0, description="Std of the global keypoint translation")
    sigma_kp: float = Field(default=0.01, ge=0.0, description="Std of the per-keypoint offsets")
    read_noise_sigma: float = Field(default=0.02, ge=0.0, description="Gaussian read noise std")
    shot_noise_gain: float = Field(default=0.05, ge=0.0, description="Signal-proportional noise gain")


class NetworkConfig(BaseSettings):
    """Generator architecture."""

    model_config = SettingsConfigDict(env_prefix="FACEANIM_NETWORK_", extra="forbid")

    feature_channels: int = Field(
        default=32,
        ge=1,
        description="Channel width of the source encoder, decoder and mouth encoder"
    )
    gate_hidden: int = Field(
        default=16,
        ge=1,
        description="Hidden width of the two-layer residual gating network"
    )
    image_channels: int = Field(
        default=3,
        ge=1,
        description="Image channels (RGB)"
    )


class AugmentConfig(BaseSettings):
    """Geometric augmentation ranges used while training."""

    model_config = SettingsConfigDict(env_prefix="FACEANIM_AUGMENT_", extra="forbid")

    enabled: bool = Field(default=False, description="Apply augmentation to training samples")
    scale_range: float = Field(default=0.1, ge=0.0, lt=1.0, description="Scale sampled in [1-r, 1+r]")
    rotation_deg: float = Field(default=10.0, ge=0.0, le=180.0, description="Rotation sampled in [-r, r] degrees")
    crop_min: float = Field(
        default=0.8,
        gt=0.0,
        le=1.0,
        description="Minimum crop side as a fraction of the frame; sides are drawn independently"
    )
    max_tries: int = Field(default=10, ge=1, description="Resampling bound before falling back to identity")


class TrainingConfig(BaseSettings):
    """Training loop configuration."""

    model_config = SettingsConfigDict(env_prefix="FACEANIM_TRAINING_", extra="forbid")

    n_sources: int = Field(default=5, ge=1, description="Source frames per sample (first is appearance)")
    steps: int = Field(default=500, ge=0, description="Optimizer steps")
    batch_size: int = Field(default=1, ge=1, description="Samples per step")
    learning_rate: float = Field(default=1e-3, ge=0.0, description="SGD learning rate")
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0, description="SGD momentum (0 = plain SGD)")
    vr_mix: float = Field(default=0.06, ge=0.0, le=1.0, description="Fraction of annotated VR-pair samples")
    phase1_steps: int = Field(
        default=100,
        ge=0,
        description="Steps of keypoint-only reconstruction before attention and gating unfreeze"
    )
    checkpoint_every: int = Field(default=100, ge=1, description="Checkpoint cadence in steps")
    loader_queue: int = Field(default=4, ge=1, description="Prefetch queue capacity of the sample loader")


class RetrievalConfig(BaseSettings):
    """Expression retrieval configuration."""

    model_config = SettingsConfigDict(env_prefix="FACEANIM_RETRIEVAL_", extra="forbid")

    enabled: bool = Field(default=False, description="Append the retrieved expression image as a source")
    skip: int = Field(default=1, ge=1, description="Store only every k-th enrolment frame")
    tcf: bool = Field(default=False, description="Low-pass the retrieved image with the temporal consistency filter")


class EvalConfig(BaseSettings):
    """Evaluation metrics configuration."""

    model_config = SettingsConfigDict(env_prefix="FACEANIM_EVAL_", extra="forbid")

    tcf_alpha: float = Field(default=0.5, gt=0.0, le=1.0, description="TCF blend weight of the current frame")
    perceptual_seed: int = Field(default=1234, description="Seed of the frozen random-conv perceptual features")
    perceptual_channels: int = Field(default=8, ge=1, description="Width of the perceptual feature layers")
    psnr_cap: float = Field(default=99.0, gt=0.0, description="PSNR reported for identical regions")


class CorpusConfig(BaseSettings):
    """Synthetic corpus generation."""

    model_config = SettingsConfigDict(env_prefix="FACEANIM_CORPUS_", extra="forbid")

    identities: int = Field(default=5, ge=1, description="Synthetic identities (one video each)")
    frames: int = Field(default=200, ge=1, description="Frames per synthetic video")
    vr_pairs: int = Field(default=40, ge=0, description="Annotated VR pairs per identity")
    velocity_cap: float = Field(default=0.02, gt=0.0, description="Max per-frame keypoint displacement")
    event_rate: float = Field(default=0.02, ge=0.0, le=1.0, description="Per-frame probability of an expression event")
    softness: float = Field(default=1.0, gt=0.0, description="Edge softness of rendered polygons in pixels")
    hmd_scale: float = Field(default=1.1, gt=0.0, description="Scale of the synthetic HMD similarity")
    hmd_rotation_deg: float = Field(default=4.0, description="Rotation of the synthetic HMD similarity")
    hmd_shift_x: float = Field(default=0.02, description="Horizontal shift of the synthetic HMD similarity")
    hmd_shift_y: float = Field(default=-0.15, description="Vertical shift of the synthetic HMD similarity")
    hmd_sag: float = Field(default=0.01, ge=0.0, description="Magnitude of the per-keypoint HMD sag offsets")
    hmd_squash: float = Field(default=0.0, ge=0.0, description="Radial squash strength (outside the projection model)")
    mouth_noise: bool = Field(default=True, description="Apply camera noise to synthetic mouth images")


class PipelineConfig(BaseSettings):
    """Staged inference pipeline."""

    model_config = SettingsConfigDict(env_prefix="FACEANIM_PIPELINE_", extra="forbid")

    stages: int = Field(default=4, ge=1, le=4, description="Worker threads the four stages are grouped into")
    queue_capacity: int = Field(default=4, ge=1, description="Capacity of each inter-stage queue")
    pipelined: bool = Field(default=True, description="Run stages concurrently (False = sequential loop)")
    determinism: bool = Field(default=True, description="Keep outputs bit-identical to sequential execution")


class LoggingConfig(BaseSettings):
    """Logging configuration."""

    model_config = SettingsConfigDict(env_prefix="FACEANIM_LOGGING_", extra="forbid")

    level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = Field(
        default="INFO",
        description="Logging level"
    )
    format: str = Field(
        default="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        description="Log format"
    )
    file: Optional[str] = Field(
        default=None,
        description="Optional log file path (logs always go to stderr)"
    )

    @field_validator("file", mode="before")
    @classmethod
    def parse_optional_path(cls, v):
        """Parse empty string as None."""
        if isinstance(v, str) and v.strip() == "":
            return None
        return v


class Config(BaseSettings):
    """Main application configuration."""

    model_config = SettingsConfigDict(
        env_prefix="FACEANIM_",
        env_nested_delimiter="__",
        case_sensitive=False,
        extra="forbid",
    )

    geometry: GeometryConfig = Field(default_factory=GeometryConfig)
    motion: MotionConfig = Field(default_factory=MotionConfig)
    attention: AttentionConfig = Field(default_factory=AttentionConfig)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    retrieval: RetrievalConfig = Field(default_factory=RetrievalConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    pipeline: PipelineConfig = Field(default_factory=PipelineConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)

    seed: int = Field(default=0, description="Seed for every random stream")
    resolution: int = Field(
        default=64,
        ge=4,
        description="Square working resolution of face images (divisible by 4)"
    )

    @field_validator("resolution")
    @classmethod
    def check_resolution(cls, v: int) -> int:
        """Encoders downsample by 4."""
        if v % 4 != 0:
            raise ValueError(f"resolution must be divisible by 4, got {v}")
        return v

    @model_validator(mode="after")
    def check_sources(self):
        """Retrieval needs one fixed source besides the retrieved slot."""
        if self.retrieval.enabled and self.training.n_sources < 2:
            raise ValueError("retrieval mode requires n_sources >= 2")
        return self

    @property
    def fixed_sources(self) -> int:
        """Number of fixed enrolment sources (the retrieved image takes the last slot)."""
        n = self.training.n_sources
        return n - 1 if self.retrieval.enabled else n


SECTIONS = tuple(
    name for name, field in Config.model_fields.items()
    if isinstance(field.default_factory, type) and issubclass(field.default_factory, BaseSettings)
)


def parse_config_text(text: str) -> Dict[str, Any]:
    """Parse ``section.key = value`` lines into a nested dict of raw strings.

    Top-level keys (``seed``, ``resolution``) have no section prefix.

    Raises:
        ConfigError: On malformed lines, unknown sections or duplicate keys
    """
    data: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if "." in key:
            section, name = key.split(".", 1)
            if section not in SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section '{section}'")
            target = data.setdefault(section, {})
        else:
            name, target = key, data
            if name in SECTIONS:
                raise ConfigError(f"line {lineno}: '{name}' is a section, use '{name}.<key>'")
        if name in target:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        target[name] = value
    return data


def _validate(data: Dict[str, Any]) -> Config:
    try:
        return Config(**data)
    except ValidationError as e:
        errors = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"invalid configuration: {errors}") from e


def load_config(path: Optional[Union[str, Path]] = None) -> Config:
    """Load configuration from a ``key = value`` file (if given) and the environment.

    Args:
        path: Optional config file path

    Returns:
        Validated Config

    Raises:
        ConfigError: If the file is unreadable or holds invalid/unknown keys
    """
    if path is None:
        return _validate({})

    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e

    config = _validate(parse_config_text(text))
    logger.info(f"CONFIG_LOADED: path={path}")
    return config


def apply_overrides(config: Config, overrides: Dict[str, Any]) -> Config:
    """Return a re-validated copy of ``config`` with dotted-key overrides applied.

    ``None`` values are ignored so argparse defaults can be passed straight through.
    """
    data = config.model_dump()
    for key, value in overrides.items():
        if value is None:
            continue
        if "." in key:
            section, name = key.split(".", 1)
            if section not in data or not isinstance(data[section], dict) or name not in data[section]:
                raise ConfigError(f"unknown override key '{key}'")
            data[section][name] = value
        else:
            if key not in data:
                raise ConfigError(f"unknown override key '{key}'")
            data[key] = value
    return _validate(data)


def to_config_text(config: Config) -> str:
    """Serialize a config back to the ``key = value`` file format."""
    lines = []
    data = config.model_dump()
    for key, value in data.items():
        if isinstance(value, dict):
            for name, inner in value.items():
                if inner is not None:
                    lines.append(f"{key}.{name} = {inner}")
        else:
            lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
