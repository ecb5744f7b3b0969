"""Configuration tree loaded with pydantic-settings.

Configuration priority (highest to lowest):
1. CLI flags (passed as keyword overrides)
2. Environment variables (GARMENT_DYNAMICS_TRAIN__LEARNING_RATE, etc.)
3. .env file
4. TOML config file given with --config
5. Defaults
"""

import sys

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib
from contextvars import ContextVar
from pathlib import Path
from typing import Any, Optional, Tuple, Type, Union

from pydantic import BaseModel, Field
from pydantic_settings import (
    BaseSettings,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
    TomlConfigSettingsSource,
)

from .errors import ConfigError
from .evaluation import EvalConfig
from .model import ModelConfig
from .refine import RefineConfig
from .simdata import SimConfig
from .trainer import TrainConfig

_CONFIG_FILE: ContextVar[Optional[Path]] = ContextVar("garment_dynamics_config_file", default=None)


class GeometrySettings(BaseModel):
    """Mesh validation and geodesic precompute settings."""

    degenerate_area: float = Field(
        default=1e-12, gt=0.0, description="Faces with area at or below this (m²) are rejected"
    )
    geodesic_scale: float = Field(
        default=1.0, gt=0.0, description="Divisor applied to geodesic distances before p_geo"
    )
    geodesic_cache_dir: str = Field(
        default=".geodesic_cache", description="Directory for cached geodesic fields"
    )


class Settings(BaseSettings):
    """Application configuration loaded from flags, environment, .env and TOML."""

    geometry: GeometrySettings = Field(default_factory=GeometrySettings)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    refine: RefineConfig = Field(default_factory=RefineConfig)
    sim: SimConfig = Field(default_factory=SimConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    use_svd_replace: bool = Field(
        default=True, description="Replace singular values of composed gradients at inference"
    )
    threads: int = Field(default=1, ge=1, le=64, description="Worker threads (1 = deterministic)")

    # Logging
    log_level: str = Field(default="INFO", description="Logging level (DEBUG, INFO, WARNING, ERROR)")

    model_config = SettingsConfigDict(
        env_prefix="GARMENT_DYNAMICS_",  # Reads GARMENT_DYNAMICS_LOG_LEVEL, etc.
        env_nested_delimiter="__",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: Type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        return (
            init_settings,
            env_settings,
            dotenv_settings,
            TomlConfigSettingsSource(settings_cls, toml_file=_CONFIG_FILE.get()),
        )


def load_settings(config_file: Optional[Union[str, Path]] = None, **overrides: Any) -> Settings:
    """Build a Settings object, reading ``config_file`` (TOML) when given.

    Keyword overrides follow the configuration tree, e.g.
    ``load_settings(train={"steps": 10}, log_level="DEBUG")``.
    """
    path = None
    if config_file is not None:
        path = Path(config_file)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        try:
            tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Malformed config file {path}: {e}") from e

    token = _CONFIG_FILE.set(path)
    try:
        return Settings(**overrides)
    finally:
        _CONFIG_FILE.reset(token)
