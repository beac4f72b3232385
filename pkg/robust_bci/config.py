"""Application configuration and environment settings"""
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings loaded from environment variables"""
    # Execution
    WORKERS: int = Field(1, ge=1, description="Worker count for cells, ensemble members and federated clients")
    LOG_LEVEL: str = Field("INFO", description="Root logging level")
    MASTER_SEED: int = Field(0, description="Default master seed for scenario runs")

    # Input/Output directories with defaults
    OUTPUT_DIR: str = Field("./output", description="Directory for reports, checkpoints and datasets")

    # Evaluation
    EVAL_BATCH_SIZE: int = Field(256, ge=1, description="Chunk size for inference and attacks")

    # Eigensolver used by Euclidean alignment
    EIGEN_MAX_SWEEPS: int = Field(100, ge=1, description="Jacobi sweep cap")
    EIGEN_TOLERANCE: float = Field(1e-10, gt=0, description="Relative off-diagonal convergence threshold")
    EIGEN_FLOOR_RATIO: float = Field(1e-10, gt=0, description="Eigenvalue floor relative to the largest eigenvalue")

    model_config = SettingsConfigDict(
        env_file='.env',
        env_file_encoding='utf-8',
        case_sensitive=True,
        extra='ignore'
    )


settings = Settings()
