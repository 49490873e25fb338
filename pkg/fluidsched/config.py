from functools import lru_cache
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """Application settings"""

    # Randomness
    seed: int = 0

    # App config
    log_level: str = "INFO"

    # Tolerances
    simplex_tol: float = 1e-9
    violation_slack: float = 1e-12
    kkt_tol: float = 1e-8
    bisection_tol: float = 1e-10
    descent_tol: float = 1e-10
    descent_step_tol: float = 1e-12
    max_descent_iters: int = 200_000

    # Oracle
    oracle_resolution: float = 1e-4
    oracle_points: int = 200_000
    oracle_improvement_tol: float = 1e-10
    oracle_max_passes: int = 200

    model_config = {
        "env_file": ".env",
        "env_prefix": "FLUIDSCHED_",
        "case_sensitive": False,
        "extra": "ignore",
    }


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return Settings()
