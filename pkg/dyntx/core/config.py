import os
from typing import Optional

from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    # Base directory and environment
    BASE_DIR: str = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
    PROJECT_NAME: str = "dyntx"
    VERSION: str = "1.0.0"

    # Horizon limits
    MAX_HORIZON: int = 6
    MAX_EXACT_HORIZON: int = 3

    # Exact (quadrature) backend
    QUAD_ORDER: int = 16
    QUAD_MIN_ORDER: int = 8
    QUAD_PRUNE: float = 1e-15  # node weights below this fraction of the largest are dropped
    MASS_FLOOR: float = 1e-14

    # Counting backends
    MC_DRAWS: int = 1_000_000
    MC_MIN_DRAWS: int = 100_000
    MC_CELL_FLOOR: int = 200
    EMPIRICAL_CELL_FLOOR: int = 30

    # Identification tolerances
    RELEVANCE_TOL: float = 1e-3
    RELEVANCE_SE_MULTIPLIER: float = 2.0
    H_TOL_EXACT: float = 1e-6
    H_TOL_SE_MULTIPLIER: float = 3.0
    MATCH_SPREAD_FACTOR: float = 10.0
    TRANSITION_FLOOR: float = 1e-3
    ARGMAX_TOL: float = 1e-10

    # Simulation and bootstrap
    DEFAULT_SEED: int = 20240101
    SIM_CHUNK_SIZE: int = 100_000
    N_JOBS: int = 1
    BOOTSTRAP_MIN_REPLICATES: int = 100
    BOOTSTRAP_MAX_FAILURE_RATE: float = 0.2

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FILE: Optional[str] = None

    # Outputs
    OUTPUT_DIR: str = os.path.join(BASE_DIR, "outputs")

    @field_validator("LOG_LEVEL", mode="before")
    @classmethod
    def normalize_log_level(cls, v: str) -> str:
        if isinstance(v, str):
            return v.upper()
        raise ValueError(v)

    model_config = SettingsConfigDict(
        env_prefix="DYNTX_",
        env_file=".env",
        case_sensitive=True,
        extra="ignore",
    )


# Create settings instance
settings = Settings()
