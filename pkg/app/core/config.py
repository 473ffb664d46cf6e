# app/core/config.py
from typing import Optional
from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict
from dotenv import load_dotenv
import logging

load_dotenv()

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", case_sensitive=False, extra="ignore")

    ENVIRONMENT: str = "development"

    # Worker fan-out for pipeline arms and search trials
    BISSL_THREADS: Optional[int] = Field(default=None, ge=1)

    # Output
    OUTPUT_DIR: str = "runs"
    SHOW_PROGRESS: bool = False
    # wall_ms column in metrics CSVs; 0 when disabled so reruns compare bitwise
    RECORD_WALL_TIME: bool = True

    # Observability
    LOG_LEVEL: str = "INFO"

    @field_validator("LOG_LEVEL")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        level = v.upper()
        if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"LOG_LEVEL must be a logging level name, got {v!r}")
        return level

    @property
    def worker_count(self) -> int:
        return self.BISSL_THREADS or 1


try:
    settings = Settings()
    logger.debug("✅ Settings validated")
except Exception as e:
    logger.error(f"❌ Settings validation failed: {e}")
    raise
