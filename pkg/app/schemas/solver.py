from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field

from app.schemas.fields import FlowField, OcclusionMask
from app.schemas.losses import LossReport, LossWeights

# ============================================
# Coarse-to-fine solver schemas
# ============================================

MIN_LEVEL_SIZE = 8  # coarsest pyramid level must be at least 8x8


class SolverConfig(BaseModel):
    """Settings for the variational coarse-to-fine flow solver"""
    model_config = ConfigDict(frozen=True)

    pyramid_levels: int = Field(default=4, ge=1)
    scale_factor: float = Field(default=0.5, gt=0.0, lt=1.0)
    iters_per_level: int = Field(default=150, ge=0)
    step: float = Field(default=1.0, gt=0.0)
    weights: LossWeights = Field(default_factory=LossWeights)
    smooth_order: Literal[1, 2] = 1
    use_ssim: bool = False
    bidirectional: bool = False
    occlusion_second_pass: bool = False
    occlusion_alpha1: float = Field(default=0.01, ge=0.0)
    occlusion_alpha2: float = Field(default=0.5, ge=0.0)
    max_halvings: int = Field(default=20, ge=1)
    seed: int = 0


class SolveResult(BaseModel):
    """Flow estimate with its optimization trace"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    flow: FlowField
    loss_trace: List[LossReport]  # finest level, one entry per accepted iterate
    level_traces: List[List[LossReport]] = Field(default_factory=list)
    epe: Optional[float] = None
    backward_flow: Optional[FlowField] = None
    masks: Optional[Tuple[OcclusionMask, OcclusionMask]] = None
    diagnostics: List[str] = Field(default_factory=list)

    @property
    def totals(self) -> List[float]:
        return [r.total for r in self.loss_trace]
