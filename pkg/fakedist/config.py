"""Configuration settings for the package."""

from pathlib import Path

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Package settings."""

    model_config = SettingsConfigDict(
        env_prefix="FAKEDIST_", env_file=".env", env_file_encoding="utf-8", extra="ignore"
    )

    threads: int = 1
    log_level: str = "INFO"
    output_dir: Path = Path("runs")
    float_digits: int = 15

    # model tables
    rk4_steps: int = 4096
    quad_rtol: float = 1e-10
    inversion_rtol: float = 1e-10
    tail_fraction: float = 0.1
    indeterminate_band: float = 1e-6
    pole_split: float = 1e-3

    # audit tolerance model: tol = audit_c1 * h + audit_c2 * tol_grad
    audit_c1: float = 5.0
    audit_c2: float = 5.0
    identity_rtol: float = 0.02
    collar_layers: int = 3
    outer_layers: int = 2


settings = Settings()
