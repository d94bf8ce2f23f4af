import logging
import sys
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.errors import ConfigError
from app.schemas.losses import DEFAULT_DELTA, LossWeights
from app.schemas.solver import SolverConfig


class Settings(BaseSettings):
    PROJECT_NAME: str = "Vidnum Toolkit"
    LOG_LEVEL: str = "INFO"
    SEED: int = 0
    THREADS: int = Field(default=1, ge=1)

    # Photometric objective
    LAMBDA1: float = Field(default=1.0, ge=0.0)
    LAMBDA2: float = Field(default=0.1, ge=0.0)
    LAMBDA3: float = Field(default=1.0, ge=0.0)
    DELTA: Tuple[float, ...] = DEFAULT_DELTA
    ALPHA_PIXEL: float = Field(default=0.45, gt=0.0, le=1.0)
    ALPHA_SMOOTH: float = Field(default=0.45, gt=0.0, le=1.0)
    EPSILON: float = Field(default=0.001, gt=0.0)
    SMOOTH_ORDER: int = Field(default=1, ge=1, le=2)
    GUIDANCE_LAMBDA: float = Field(default=0.1, ge=0.0)
    CENSUS_WINDOW: int = 3
    CENSUS_THRESHOLD: float = Field(default=0.01, ge=0.0)
    FLOW_CAP: float = Field(default=20.0, gt=0.0)

    # Solver
    PYRAMID_LEVELS: int = Field(default=4, ge=1)
    SCALE_FACTOR: float = Field(default=0.5, gt=0.0, lt=1.0)
    ITERS_PER_LEVEL: int = Field(default=150, ge=0)
    STEP: float = Field(default=1.0, gt=0.0)
    USE_SSIM: bool = False
    BIDIRECTIONAL: bool = False
    OCCLUSION_SECOND_PASS: bool = False
    OCCLUSION_ALPHA1: float = Field(default=0.01, ge=0.0)
    OCCLUSION_ALPHA2: float = Field(default=0.5, ge=0.0)

    # Segmentation and representation learning
    RELAX_WINDOW: int = 3
    URL_MAX_ITER: int = Field(default=1000, ge=1)
    URL_TOL: float = Field(default=1e-6, ge=0.0)

    model_config = SettingsConfigDict(env_prefix="VIDNUM_", env_file=".env", case_sensitive=True, extra="forbid")

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda1=self.LAMBDA1,
            lambda2=self.LAMBDA2,
            lambda3=self.LAMBDA3,
            delta=self.DELTA,
            alpha_pixel=self.ALPHA_PIXEL,
            alpha_smooth=self.ALPHA_SMOOTH,
            epsilon=self.EPSILON,
        )

    def solver_config(self) -> SolverConfig:
        return SolverConfig(
            pyramid_levels=self.PYRAMID_LEVELS,
            scale_factor=self.SCALE_FACTOR,
            iters_per_level=self.ITERS_PER_LEVEL,
            step=self.STEP,
            weights=self.loss_weights(),
            smooth_order=self.SMOOTH_ORDER,
            use_ssim=self.USE_SSIM,
            bidirectional=self.BIDIRECTIONAL,
            occlusion_second_pass=self.OCCLUSION_SECOND_PASS,
            occlusion_alpha1=self.OCCLUSION_ALPHA1,
            occlusion_alpha2=self.OCCLUSION_ALPHA2,
            seed=self.SEED,
        )


@lru_cache()
def get_settings():
    return Settings()


def _parse_value(key: str, raw: str):
    # Tuples arrive as comma-separated decimals
    if key == "DELTA":
        return tuple(float(x) for x in raw.split(",") if x.strip())
    return raw


def _split_assignment(text: str, where: str) -> Tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"{where}: expected 'key = value', got {text!r}")
    key, raw = text.split("=", 1)
    key = key.strip().upper()
    if not key:
        raise ConfigError(f"{where}: missing key")
    return key, raw.strip()


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, object]:
    """
    Parse a plain-text `key = value` run configuration.

    Keys are case-insensitive; `#` starts a comment. Unknown keys are rejected
    with the 1-based line number where they appear.
    """
    values: Dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        key, raw = _split_assignment(content, f"{source} line {lineno}")
        if key not in Settings.model_fields:
            raise ConfigError(f"{source} line {lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(key, raw)
        except ValueError as e:
            raise ConfigError(f"{source} line {lineno}: bad value for {key}: {e}")
    return values


def load_run_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> Settings:
    """
    Build Settings from defaults, environment, an optional config file and
    `KEY=VALUE` overrides (later sources win).
    """
    values: Dict[str, object] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}")
        values.update(parse_config_text(text, source=str(path)))

    for index, item in enumerate(overrides, start=1):
        key, raw = _split_assignment(item, f"override {index}")
        if key not in Settings.model_fields:
            raise ConfigError(f"override {index}: unknown key {key!r}")
        try:
            values[key] = _parse_value(key, raw)
        except ValueError as e:
            raise ConfigError(f"override {index}: bad value for {key}: {e}")

    try:
        return Settings(**values)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}")


def configure_logging(level: str = "INFO") -> None:
    """Send log records to stderr; stdout carries only results."""
    numeric = getattr(logging, level.upper(), logging.INFO)
    logging.basicConfig(level=numeric, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    # basicConfig is a no-op once handlers exist, so the level is applied separately
    logging.getLogger().setLevel(numeric)
