from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict
import os
from functools import lru_cache
import logging


def _strip_wrapping_quotes(value: str | None) -> str | None:
    """Remove surrounding single or double quotes if present."""
    if value is None:
        return None
    value = value.strip()
    if len(value) >= 2 and value[0] == value[-1] and value[0] in {'"', "'"}:
        return value[1:-1]
    return value


logger = logging.getLogger(__name__)

_DEFAULT_PRESETS = os.path.join(os.path.dirname(os.path.abspath(__file__)), "experiments.yml")


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=".env",
        case_sensitive=True,
        extra="allow"
    )
    """Runtime settings for the CLI and the experiment runner."""
    # Environment
    ENV: str = os.getenv("ENV", "development")
    DEBUG: bool = os.getenv("DEBUG", "False") == "True"

    # Logging
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")

    # Default directory for every artifact the CLI writes
    RSS_OUTPUT_DIR: str = os.getenv("RSS_OUTPUT_DIR", "./rss_output")

    # Work pool size for scenario cells (1 runs inline)
    RSS_MAX_WORKERS: int = int(os.getenv("RSS_MAX_WORKERS", "1"))

    # Experiment presets (calibration, search space, logged hyperparameters)
    RSS_PRESETS_FILE: str = os.getenv("RSS_PRESETS_FILE", _DEFAULT_PRESETS)

    @field_validator("RSS_OUTPUT_DIR", "RSS_PRESETS_FILE", mode="before")
    @classmethod
    def _clean_path(cls, value: str | None):
        cleaned = _strip_wrapping_quotes(value)
        if not cleaned:
            raise ValueError("path settings cannot be empty")
        return cleaned

    @field_validator("RSS_MAX_WORKERS")
    @classmethod
    def _positive_workers(cls, value: int):
        if value < 1:
            raise ValueError("RSS_MAX_WORKERS must be at least 1")
        return value


@lru_cache()
def get_settings():
    """Get settings based on environment."""
    return Settings()

# Create settings instance
settings = get_settings()
