import hashlib
import math
from enum import Enum
from functools import lru_cache
from pathlib import Path

from pydantic import BaseModel, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

SHAPE_KINDS = (
    "disc",
    "square",
    "triangle",
    "annulus",
    "cross",
    "star",
    "diamond",
    "hexagon",
)


class Settings(BaseSettings):
    """Runtime environment: where artifacts go and how logs look."""

    # Storage
    storage_backend: str = "local"
    local_data_path: str = "./runs"

    # S3 (optional)
    s3_bucket_name: str = ""
    s3_prefix: str = ""
    aws_access_key_id: str = ""
    aws_secret_access_key: str = ""
    aws_region: str = "us-east-1"

    # Logging
    log_level: str = "INFO"
    log_json: bool = False
    log_to_file: bool = False

    model_config = {"env_file": ".env", "env_file_encoding": "utf-8", "extra": "ignore"}


@lru_cache
def get_settings() -> Settings:
    return Settings()


# =============================================================================
# EXPERIMENT SECTIONS
# =============================================================================


class SimilarityNormalization(str, Enum):
    MAX_NORMALIZE = "max_normalize"
    SOFTMAX_SPATIAL = "softmax_spatial"


class AggregationMode(str, Enum):
    # Query tokens gather from the pseudo support (query features under the seed).
    QUERY_CENTRIC = "query_centric"
    # Baseline: query tokens gather from masked support features.
    SUPPORT_CENTRIC = "support_centric"


class SyntheticSceneConfig(BaseModel):
    image_size: int = Field(64, ge=32)
    shape_classes: list[str] = Field(default_factory=lambda: list(SHAPE_KINDS))
    shapes_per_image: tuple[int, int] = (1, 3)  # inclusive; the first shape is the target
    texture_noise: float = Field(0.04, ge=0.0)
    color_jitter: float = Field(0.06, ge=0.0, le=0.5)  # hue jitter around the class hue

    @field_validator("shape_classes")
    @classmethod
    def _known_shapes(cls, value: list[str]) -> list[str]:
        if len(value) < 4:
            raise ValueError("at least 4 shape classes are needed to build folds")
        unknown = sorted(set(value) - set(SHAPE_KINDS))
        if unknown:
            raise ValueError(f"unknown shape classes: {unknown}")
        if len(set(value)) != len(value):
            raise ValueError("shape classes must be unique")
        return value

    @field_validator("shapes_per_image")
    @classmethod
    def _shape_range(cls, value: tuple[int, int]) -> tuple[int, int]:
        low, high = value
        if low < 1 or high < low:
            raise ValueError(f"invalid shapes_per_image range: {value}")
        return value


class EncoderConfig(BaseModel):
    stage_channels: list[int] = Field(default_factory=lambda: [16, 32, 64, 64])
    strides: list[int] = Field(default_factory=lambda: [2, 2, 2, 1])
    out_channels: int = Field(64, ge=8)
    gn_groups: int = Field(4, ge=1)
    frozen: bool = False

    @property
    def downsample_factor(self) -> int:
        return math.prod(self.strides)

    @model_validator(mode="after")
    def _check_stages(self) -> "EncoderConfig":
        if len(self.stage_channels) != len(self.strides) or len(self.strides) < 2:
            raise ValueError("stage_channels and strides must have the same length (>= 2)")
        if self.downsample_factor < 4:
            raise ValueError(f"total downsample factor must be >= 4, got {self.downsample_factor}")
        for channels in [*self.stage_channels, self.out_channels]:
            if channels % self.gn_groups:
                raise ValueError(f"channels {channels} not divisible by gn_groups")
        return self


class LocalizerConfig(BaseModel):
    tau: float = Field(0.7, gt=0.0, lt=1.0)
    normalization: SimilarityNormalization = SimilarityNormalization.MAX_NORMALIZE
    fallback_topk: int = Field(4, ge=1)


class MinerConfig(BaseModel):
    num_scales: int = Field(3, ge=1)
    aggregation: AggregationMode = AggregationMode.QUERY_CENTRIC
    attn_layers_per_scale: int = Field(1, ge=1)
    heads: int = Field(4, ge=1)
    ffn_ratio: int = Field(2, ge=1)


class DetailConfig(BaseModel):
    num_proxies: int = Field(10, ge=2)
    attn_layers: int = Field(2, ge=1)
    heads: int = Field(4, ge=1)
    ffn_ratio: int = Field(2, ge=1)


class TrainConfig(BaseModel):
    lr: float = Field(1e-4, gt=0.0)
    weight_decay: float = Field(1e-2, ge=0.0)
    betas: tuple[float, float] = (0.9, 0.999)
    poly_power: float = Field(0.9, gt=0.0)
    epochs: int = Field(20, ge=1)
    iters_per_epoch: int = Field(50, ge=1)
    batch_size: int = Field(8, ge=1)
    k_shot: int = Field(1, ge=1)
    lambda_div: float = Field(0.1, ge=0.0)
    lambda_kl: float = Field(1.0, ge=0.0)
    alternation: int = Field(1, ge=1)  # D steps per G step
    use_detail_miner: bool = True
    hflip: bool = True
    scale_range: tuple[float, float] = (0.8, 1.25)  # random rescale of training scenes
    val_episodes: int = Field(50, ge=1)
    seed: int = 0

    @field_validator("scale_range")
    @classmethod
    def _scale_range(cls, value: tuple[float, float]) -> tuple[float, float]:
        low, high = value
        if low <= 0.0 or high < low:
            raise ValueError(f"invalid scale_range: {value}")
        return value


class ExperimentConfig(BaseSettings):
    """Everything a run needs, loadable from a flat key-value document.

    Keys are ``AMF_<FIELD>`` for top-level fields and ``AMF_<SECTION>__<FIELD>``
    for nested ones, e.g. ``AMF_TRAIN__LR=0.0001``. Keyword arguments (CLI
    flags) win over the file; the process environment is never read.
    """

    dataset: str = "synthetic"
    fold: int = Field(0, ge=0, le=3)
    data_root: str | None = None
    scene: SyntheticSceneConfig = Field(default_factory=SyntheticSceneConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    localizer: LocalizerConfig = Field(default_factory=LocalizerConfig)
    miner: MinerConfig = Field(default_factory=MinerConfig)
    detail: DetailConfig = Field(default_factory=DetailConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)

    model_config = SettingsConfigDict(
        env_prefix="AMF_",
        env_nested_delimiter="__",
        env_file_encoding="utf-8",
        extra="forbid",
    )

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        return init_settings, dotenv_settings

    @model_validator(mode="after")
    def _check_dimensions(self) -> "ExperimentConfig":
        dim = self.encoder.out_channels
        for section, heads in (("miner", self.miner.heads), ("detail", self.detail.heads)):
            if dim % heads:
                raise ValueError(f"{section}.heads={heads} does not divide out_channels={dim}")
        grid = self.scene.image_size // self.encoder.downsample_factor
        if self.scene.image_size % self.encoder.downsample_factor:
            raise ValueError("image_size must be divisible by the encoder downsample factor")
        if grid % (2 ** (self.miner.num_scales - 1)):
            raise ValueError(
                f"feature extent {grid} not divisible by 2^(num_scales-1) for "
                f"num_scales={self.miner.num_scales}"
            )
        return self

    @property
    def feature_extent(self) -> int:
        return self.scene.image_size // self.encoder.downsample_factor


def load_experiment_config(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    """Build an ExperimentConfig from an optional config file plus overrides."""
    if path is None:
        return ExperimentConfig(**overrides)
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Config file not found: {path}")
    return ExperimentConfig(_env_file=path, **overrides)


def config_hash(config: BaseModel) -> str:
    """Stable SHA-256 of a config's canonical JSON dump."""
    return hashlib.sha256(config.model_dump_json().encode("utf-8")).hexdigest()
