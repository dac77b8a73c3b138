"""
Application Configuration

Centralizes process settings, logging and the run configuration.
Process settings come from environment variables (optionally via `.env`);
run hyperparameters come from a flat key=value file parsed into `RunConfig`.
"""

import os
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from app.core.errors import ConfigError
from app.models.schemas import ClusterConfig, FilterConfig, LossWeights

# =============================================================================
# Environment Variables
# =============================================================================

load_dotenv()


class Settings:
    """Process settings loaded from environment variables.

    These control how the tools run, not what they compute; nothing here
    changes a numeric result.
    """

    LOG_LEVEL = os.getenv("P2F_LOG_LEVEL", "INFO").upper()
    WORKERS = int(os.getenv("P2F_WORKERS", "4"))
    # Optional key=value file used when a command gets no --config
    DEFAULT_CONFIG = os.getenv("P2F_DEFAULT_CONFIG")


# Global settings instance
settings = Settings()

# =============================================================================
# Logging Configuration
# =============================================================================

logging.basicConfig(
    level=getattr(logging, settings.LOG_LEVEL, logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

# =============================================================================
# Run Configuration
# =============================================================================


class RunConfig(BaseModel):
    """Every hyperparameter of a run, flat and fully defaulted.

    Unknown keys are rejected. The parsed values are echoed into every report,
    so field order here is the order readers see.
    """

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    seed: int = 0

    # Model dimensions
    image_size: int = Field(64, ge=4)
    embed_dim: int = Field(16, ge=2)
    num_queries: int = Field(8, ge=1)
    query_dim: int = Field(32, ge=1)
    hidden_dim: int = Field(64, ge=1)
    num_classes: int = Field(4, ge=1)

    # Optimizer (desk-scale values; weight decay follows the published recipe)
    lr: float = Field(1e-3, ge=0.0)
    weight_decay: float = Field(0.05, ge=0.0)
    grad_clip: float = Field(1.0, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    batch_size: int = Field(8, ge=1)
    steps: int = Field(2000, ge=0)
    hflip_prob: float = Field(0.5, ge=0.0, le=1.0)

    # Losses
    lambda_ce: float = Field(2.0, gt=0.0)
    lambda_sdice: float = Field(5.0, gt=0.0)
    lambda_evi: float = Field(0.1, gt=0.0)
    no_object_coeff: float = Field(0.1, gt=0.0, le=1.0)
    target_eps: float = Field(1e-3, gt=0.0, lt=0.5)
    dice_smooth: float = Field(1.0, gt=0.0)
    points_per_mask: int = Field(1024, ge=4)
    importance_ratio: float = Field(0.75, ge=0.0, le=1.0)

    # Ablation switches
    symmetric_dice: bool = True
    evidential_sampling: bool = True
    mask_filtering: bool = True

    # Inference and clustering
    object_mask_threshold: float = Field(0.5, gt=0.0, lt=1.0)
    k_sigma: float = 2.0
    uncertainty_threshold: float = -0.6
    dbscan_eps: float = Field(0.04, gt=0.0)
    dbscan_min_samples: int = Field(17, ge=1)

    # Bookkeeping
    log_every: int = Field(50, ge=1)
    workers: int = Field(settings.WORKERS, ge=1)
    pq_target: float = Field(0.5, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_pooling(self) -> "RunConfig":
        if self.image_size % 2:
            raise ValueError("image_size must be even (the stem downsamples by 2)")
        return self

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_ce=self.lambda_ce,
            lambda_sdice=self.lambda_sdice,
            lambda_evi=self.lambda_evi,
            no_object_coeff=self.no_object_coeff,
        )

    def filter_config(self) -> FilterConfig:
        return FilterConfig(object_mask_threshold=self.object_mask_threshold)

    def cluster_config(self) -> ClusterConfig:
        return ClusterConfig(
            k_sigma=self.k_sigma,
            eps=self.dbscan_eps,
            min_samples=self.dbscan_min_samples,
        )


def parse_run_config(text: str, source: str = "<string>") -> RunConfig:
    """Parse flat key=value text into a validated RunConfig.

    Args:
        text: Config file contents
        source: Name used in error messages

    Returns:
        The validated configuration

    Raises:
        ConfigError: On malformed lines, duplicate or unknown keys, bad values
    """
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value

    return _validate(values, source)


def _validate(values: Dict[str, Any], source: str) -> RunConfig:
    try:
        return RunConfig(**values)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}"
            for err in e.errors()
        )
        raise ConfigError(f"{source}: {problems}") from e


def override_run_config(cfg: RunConfig, overrides: Dict[str, Any], source: str = "command line") -> RunConfig:
    """Return `cfg` with `overrides` applied and validated again.

    Raises:
        ConfigError: If an override is unknown or out of range
    """
    return _validate({**cfg.model_dump(), **overrides}, source)


def load_run_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Load a RunConfig from a file, or return defaults when no file is given.

    Falls back to `P2F_DEFAULT_CONFIG` when `path` is None.
    """
    path = path or settings.DEFAULT_CONFIG
    if path is None:
        return RunConfig()

    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    logger.info(f"Loading run config from {path}")
    return parse_run_config(path.read_text(encoding="utf-8"), source=str(path))


def dump_run_config(cfg: RunConfig) -> str:
    """Render a RunConfig as canonical key=value text (field order)."""
    lines = []
    for key, value in cfg.model_dump().items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
