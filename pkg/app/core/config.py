from pydantic_settings import BaseSettings, SettingsConfigDict
from functools import lru_cache


class Settings(BaseSettings):
    """Lab settings read from the environment (or `.env`)."""

    model_config = SettingsConfigDict(env_file=".env", case_sensitive=True)

    # Results store
    DATABASE_URL: str = "sqlite+aiosqlite:///./bpfusion.db"
    DB_ECHO: bool = False

    # API
    API_V1_STR: str = "/api/v1"
    PROJECT_NAME: str = "BP Fusion Lab"
    VERSION: str = "0.1.0"
    MAX_API_TRIALS: int = 5_000

    # CORS
    BACKEND_CORS_ORIGINS: list[str] = [
        "http://localhost:3000",
        "http://localhost:8000",
        "http://127.0.0.1:3000",
        "http://127.0.0.1:8000",
    ]
    ALLOW_CREDENTIALS: bool = True
    CORS_MAX_AGE: int = 600  # 10 minutes

    # Logging
    LOG_LEVEL: str = "INFO"

    # Monte Carlo
    DEFAULT_SEED: int = 20240101
    CALIBRATION_SLOTS: int = 10_000
    CALIBRATION_SEED: int = 7
    TRIAL_BLOCK_SIZE: int = 500
    MAX_WORKERS: int = 1

    # Reporting
    DB_CAP_DB: float = 100.0


@lru_cache()
def get_settings() -> Settings:
    return Settings()
