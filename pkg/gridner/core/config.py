"""
Configuration Management
Process-level settings using Pydantic BaseSettings for environment-based configuration.

Run-level hyperparameters (model, training, paths) live in `gridner.schemas.config`;
this module only holds what is shared by every command in the process.
"""

from functools import lru_cache
from pathlib import Path

from pydantic_settings import BaseSettings


PACKAGE_ROOT = Path(__file__).resolve().parent.parent


class Settings(BaseSettings):
    """
    Application settings loaded from `GRIDNER_`-prefixed environment variables.

    Values may also be placed in a `.env` file in the working directory.
    """

    # Application
    APP_NAME: str = "GridNER"
    APP_VERSION: str = "1.0.0"
    DEBUG: bool = False  # NaN/Inf checks after every forward op

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    # Numerics
    DEFAULT_PRECISION: str = "float64"

    # Checkpoints
    CHECKPOINT_MAGIC: str = "GRIDNER1"
    CHECKPOINT_VERSION: int = 1

    # Data
    FIXTURE_PATH: Path = PACKAGE_ROOT / "data" / "fixture_corpus.json"

    class Config:
        env_file = ".env"
        env_prefix = "GRIDNER_"
        case_sensitive = True
        extra = "ignore"


@lru_cache()
def get_settings() -> Settings:
    """
    Get cached settings instance.

    Returns:
        Settings: Process settings
    """
    return Settings()


settings = get_settings()
